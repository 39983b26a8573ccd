"""
Shared plumbing for the pipeline management commands.
"""
import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from edgebench.errors import EdgeBenchError

from ..conf import OUTPUT_FORMATS, RunConfig

logger = logging.getLogger(__name__)

# Flags shared across subcommands: name -> (argparse flags, argparse options).
FLAGS = {
    'model': (('--model',), {'help': 'Path to a .plite model file.'}),
    'data': (('--data',), {'help': 'Dataset root: IDX directory, folder-per-class root, or synth:CxPxS.'}),
    'sparsity': (('--sparsity',), {'type': float, 'help': 'Target fraction of weights to zero, in [0, 1).'}),
    'epochs': (('--epochs',), {'type': int, 'help': 'Training or fine-tuning epochs.'}),
    'backend': (('--backend',), {'choices': ('reference', 'accelerated'), 'default': 'accelerated',
                                 'help': 'Kernel backend for inference.'}),
    'n_images': (('--n',), {'dest': 'n_images', 'type': int, 'help': 'Number of images to benchmark (>= 2).'}),
    'seed': (('--seed',), {'type': int, 'help': 'Random seed (default from settings).'}),
    'output_format': (('--format',), {'dest': 'output_format', 'choices': OUTPUT_FORMATS, 'default': 'md',
                                      'help': 'Table format.'}),
    'output': (('--out',), {'dest': 'output', 'help': 'Output path (model file or table).'}),
    'reports': (('--reports',), {'nargs': '+', 'help': 'Benchmark record JSON files.'}),
    'limit': (('--limit',), {'type': int, 'help': 'Use only the first N images of the dataset.'}),
}


class PipelineCommand(BaseCommand):
    subcommand = None
    flags = ()
    requires_system_checks = []

    def add_arguments(self, parser):
        for name in self.flags:
            args, kwargs = FLAGS[name]
            parser.add_argument(*args, **kwargs)
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        config = RunConfig.from_options(self.subcommand, options)
        self.stdout.write(f"seed: {config.seed}")
        config.validate()
        try:
            self.run(config, options)
        except (EdgeBenchError, OSError) as exc:
            logger.debug("%s failed", self.subcommand, exc_info=True)
            raise CommandError(str(exc)) from exc

    def run(self, config: RunConfig, options: dict):
        raise NotImplementedError('subclasses of PipelineCommand must provide a run() method')

    def emit(self, text: str, config: RunConfig) -> None:
        """Write a rendered table to ``--out`` when given, otherwise to stdout."""
        if config.output:
            path = Path(config.output)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding='utf-8')
            self.stdout.write(self.style.SUCCESS(f"Wrote {path} ({len(text.encode('utf-8'))} bytes)"))
        else:
            self.stdout.write(text, ending='')
