from pipeline import services
from pipeline.management.base import PipelineCommand


class Command(PipelineCommand):
    help = 'Quantize a float model to int8, calibrate activations and write it.'
    subcommand = 'quantize'
    flags = ('model', 'data', 'epochs', 'seed', 'limit', 'output')

    def run(self, config, options):
        result = services.quantize_model(config)
        self.stdout.write(f"float_accuracy: {result.float_accuracy:.4f}")
        self.stdout.write(f"quant_accuracy: {result.quant_accuracy:.4f}")
        self.stdout.write(f"size_ratio: {result.size_bytes / result.float_size_bytes:.4f}")
        self.stdout.write(self.style.SUCCESS(f"Wrote {config.output} ({result.size_bytes} bytes)"))
