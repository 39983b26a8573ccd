"""
Settings access and per-run configuration for the pipeline commands.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, Optional, Tuple

from django.conf import settings
from django.core.management.base import CommandError

from edgebench.compressor import DEFAULT_SPARSITY_GRID
from edgebench.nn_engine import LayerKind
from edgebench.trainer import TrainConfig

DEFAULTS = {
    'SEED': 42,
    'TRAIN_FRACTION': 0.7,
    'EPOCHS': 5,
    'BATCH_SIZE': 32,
    'LEARNING_RATE': 0.01,
    'MOMENTUM': 0.9,
    'SPARSITY_GRID': list(DEFAULT_SPARSITY_GRID),
    'FINETUNE_EPOCHS': 2,
    'MAX_ACCURACY_DROP': 0.01,
    'PRUNE_SCOPE': 'per_layer',
    'CALIBRATION_SAMPLES': 100,
    'BENCH_IMAGES': 100,
    'ACCELERATED_KINDS': ['Conv2D', 'Dense'],
    'TRAIN_LIMIT': None,
}

SUBCOMMANDS = ('train', 'sweep', 'prune', 'quantize', 'export', 'bench', 'compare', 'report')
OUTPUT_FORMATS = ('md', 'csv')

# Command-line spelling of RunConfig fields whose flag differs from the field name.
FLAG_NAMES = {'output': 'out', 'n_images': 'n', 'output_format': 'format'}

# Flags each subcommand cannot run without.
REQUIRED_FLAGS = {
    'train': ('data', 'output'),
    'sweep': ('model', 'data'),
    'prune': ('model', 'data', 'sparsity', 'output'),
    'quantize': ('model', 'data', 'output'),
    'export': ('model', 'output'),
    'bench': ('model', 'data'),
    'compare': ('reports',),
    'report': ('reports',),
}


def get_setting(name):
    """Look up ``settings.EDGEBENCH[name]``, falling back to the built-in default."""
    if name not in DEFAULTS:
        raise KeyError(f"Unknown pipeline setting: {name}")
    return getattr(settings, 'EDGEBENCH', {}).get(name, DEFAULTS[name])


def accelerated_kinds() -> FrozenSet[LayerKind]:
    try:
        return frozenset(LayerKind(kind) for kind in get_setting('ACCELERATED_KINDS'))
    except ValueError as exc:
        raise CommandError(f"Invalid ACCELERATED_KINDS setting: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    model: Optional[Path] = None
    data: Optional[str] = None
    sparsity: Optional[float] = None
    epochs: Optional[int] = None
    backend: str = 'accelerated'
    n_images: Optional[int] = None
    seed: int = 42
    output_format: str = 'md'
    output: Optional[Path] = None
    reports: Tuple[Path, ...] = field(default_factory=tuple)
    limit: Optional[int] = None

    @classmethod
    def from_options(cls, subcommand: str, options: dict) -> 'RunConfig':
        """Build from parsed command options; unset values take the settings defaults."""
        def path(name):
            value = options.get(name)
            return Path(value) if value else None

        seed = options.get('seed')
        limit = options.get('limit')
        n_images = options.get('n_images')
        return cls(
            subcommand=subcommand,
            model=path('model'),
            data=options.get('data'),
            sparsity=options.get('sparsity'),
            epochs=options.get('epochs'),
            backend=options.get('backend') or 'accelerated',
            n_images=get_setting('BENCH_IMAGES') if n_images is None else n_images,
            seed=get_setting('SEED') if seed is None else seed,
            output_format=options.get('output_format') or 'md',
            output=path('output'),
            reports=tuple(Path(p) for p in options.get('reports') or ()),
            limit=get_setting('TRAIN_LIMIT') if limit is None else limit,
        )

    def validate(self) -> 'RunConfig':
        if self.subcommand not in SUBCOMMANDS:
            raise CommandError(f"Unknown subcommand {self.subcommand!r}")

        missing = [name for name in REQUIRED_FLAGS[self.subcommand] if not getattr(self, name)]
        if self.subcommand == 'prune' and self.sparsity == 0.0:
            missing = [name for name in missing if name != 'sparsity']
        if missing:
            flags = ', '.join('--' + FLAG_NAMES.get(name, name) for name in missing)
            raise CommandError(f"{self.subcommand} requires {flags}")

        if self.sparsity is not None and not 0.0 <= self.sparsity < 1.0:
            raise CommandError(f"--sparsity must lie in [0, 1), got {self.sparsity}")
        if self.epochs is not None:
            minimum = 1 if self.subcommand == 'train' else 0
            if self.epochs < minimum:
                raise CommandError(f"--epochs must be >= {minimum} for {self.subcommand}, got {self.epochs}")
        if self.n_images is not None and self.n_images < 2:
            raise CommandError(f"--n must be at least 2, got {self.n_images}")
        if self.limit is not None and self.limit < 2:
            raise CommandError(f"--limit must be at least 2, got {self.limit}")
        if self.seed < 0:
            raise CommandError(f"--seed must be non-negative, got {self.seed}")
        if self.output_format not in OUTPUT_FORMATS:
            raise CommandError(f"--format must be one of {', '.join(OUTPUT_FORMATS)}")
        if self.subcommand == 'compare' and len(self.reports) < 2:
            raise CommandError("compare needs at least two --reports")
        return self

    def train_config(self, epochs: Optional[int] = None) -> TrainConfig:
        return TrainConfig(
            epochs=epochs if epochs is not None else (self.epochs or get_setting('EPOCHS')),
            batch_size=get_setting('BATCH_SIZE'),
            learning_rate=get_setting('LEARNING_RATE'),
            seed=self.seed,
            momentum=get_setting('MOMENTUM'),
        )
