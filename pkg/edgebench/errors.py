"""
Exception hierarchy for the edgebench engine.

Every engine error derives from EdgeBenchError so callers (the management
commands in particular) can catch the whole family in one place.
"""
from typing import Optional


class EdgeBenchError(Exception):
    pass


class ShapeError(EdgeBenchError, ValueError):
    pass


class TrainingError(EdgeBenchError):
    def __init__(self, message: str, epoch: Optional[int] = None, batch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class MaskError(EdgeBenchError, ValueError):
    pass


class QuantizationError(EdgeBenchError, ValueError):
    pass


class CalibrationError(QuantizationError):
    pass


class LiteFormatError(EdgeBenchError):
    """Malformed .plite data; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(LiteFormatError):
    pass


class DatasetError(EdgeBenchError):
    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{message}: {path}" if path else message)
        self.path = path


class BenchmarkError(EdgeBenchError):
    pass


class ReportError(EdgeBenchError, ValueError):
    pass


class ConfigError(EdgeBenchError, ValueError):
    pass
