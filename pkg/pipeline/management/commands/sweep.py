from pipeline import services
from pipeline.management.base import PipelineCommand
from pipeline.reports import emit_sweep


class Command(PipelineCommand):
    help = 'Prune a trained model across the sparsity grid, fine-tune each point and tabulate validation results.'
    subcommand = 'sweep'
    flags = ('model', 'data', 'epochs', 'seed', 'limit', 'output_format', 'output')

    def run(self, config, options):
        result = services.run_sweep(config)
        self.emit(emit_sweep(result.sweep, config.output_format), config)
        self.stdout.write(f"baseline_accuracy: {result.baseline_accuracy:.4f}")
        self.stdout.write(self.style.SUCCESS(f"selected_sparsity: {result.selected:.2f}"))
