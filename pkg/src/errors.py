"""
SFE Lab Exceptions
==================

Structured errors raised across the laboratory. Every error derives from
SfeLabError so the CLI can report library failures separately from bugs.
"""

from typing import Optional, Sequence


class SfeLabError(Exception):
    """Base class for all laboratory errors."""


class ShapeError(SfeLabError, ValueError):
    """Incompatible shapes at a layer, loss or operation boundary."""

    def __init__(self, message: str, layer: Optional[str] = None,
                 expected: Optional[Sequence[int]] = None,
                 actual: Optional[Sequence[int]] = None):
        self.layer = layer
        self.expected = tuple(expected) if expected is not None else None
        self.actual = tuple(actual) if actual is not None else None
        prefix = f"[{layer}] " if layer else ""
        super().__init__(f"{prefix}{message}")


class NonFiniteError(SfeLabError, ArithmeticError):
    """NaN or Inf found in activations, gradients or losses."""

    def __init__(self, message: str, where: Optional[str] = None):
        self.where = where
        prefix = f"[{where}] " if where else ""
        super().__init__(f"{prefix}{message}")


class BackwardError(SfeLabError, RuntimeError):
    """backward() called without a recorded forward pass."""


class FormatError(SfeLabError, ValueError):
    """Malformed IDX or SFEL file (magic, version, truncation, payload)."""


class ConfigError(SfeLabError, ValueError):
    """Unknown key, malformed value or missing path in the experiment config."""


class StageError(SfeLabError, RuntimeError):
    """A pipeline stage failed; the original exception is chained."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
