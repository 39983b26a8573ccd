from pipeline import services
from pipeline.management.base import PipelineCommand


class Command(PipelineCommand):
    help = 'Train the canonical CNN on a dataset and write it as a .plite model.'
    subcommand = 'train'
    flags = ('data', 'epochs', 'seed', 'limit', 'output')

    def run(self, config, options):
        result = services.train_baseline(config)
        history = result.history
        for epoch in range(history.epochs):
            self.stdout.write(
                f"epoch {epoch + 1}: loss {history.train_loss[epoch]:.4f}, "
                f"train_acc {history.train_accuracy[epoch]:.4f}"
            )
        self.stdout.write(f"val_accuracy: {result.val_accuracy:.4f}")
        self.stdout.write(self.style.SUCCESS(f"Wrote {config.output} ({result.size_bytes} bytes)"))
