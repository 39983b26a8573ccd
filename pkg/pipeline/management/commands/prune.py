from pipeline import services
from pipeline.management.base import PipelineCommand


class Command(PipelineCommand):
    help = 'Magnitude-prune a model to a target sparsity, fine-tune with the mask held and write it.'
    subcommand = 'prune'
    flags = ('model', 'data', 'sparsity', 'epochs', 'seed', 'limit', 'output')

    def run(self, config, options):
        result = services.prune_model(config)
        self.stdout.write(f"sparsity: {result.mask.sparsity():.4f}")
        self.stdout.write(f"val_accuracy: {result.val_accuracy:.4f}")
        self.stdout.write(self.style.SUCCESS(f"Wrote {config.output} ({result.size_bytes} bytes)"))
