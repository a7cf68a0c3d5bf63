"""Exception hierarchy shared by all itolab modules."""

from __future__ import annotations

import numpy as np


class ItoLabError(Exception):
    """Base class for every error raised deliberately by itolab."""


class InputError(ItoLabError, ValueError):
    """Invalid argument: wrong shape, out-of-range scalar, unknown option."""


class IntegrationError(ItoLabError, FloatingPointError):
    """Non-finite state during Langevin or ODE integration."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class NumericError(ItoLabError, FloatingPointError):
    """Non-finite activation or loss inside the model."""

    def __init__(self, message: str, where: str | int | None = None):
        suffix = f" [{where}]" if where is not None else ""
        super().__init__(message + suffix)
        self.where = where


class SamplingError(ItoLabError):
    """A trajectory cannot support the requested transition sampling."""


class FormatError(ItoLabError):
    """Binary file does not follow the expected layout."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class VocabularyError(ItoLabError, KeyError):
    """Token missing from a nominal embedding table."""

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class LayoutMismatchError(ItoLabError):
    """Conditioning feature layout disagrees with the model or checkpoint."""


class GraphFreedError(ItoLabError, RuntimeError):
    """Backward called on a graph whose buffers were already released."""


class ConditioningError(ItoLabError, np.linalg.LinAlgError):
    """Covariance matrix too ill-conditioned for a generalized eigensolve."""


class AmbiguityError(ItoLabError):
    """Spectrum does not support an unambiguous two-state split."""


class AlignmentError(ItoLabError):
    """Point subset is too small or degenerate for rigid alignment."""


class ConfigError(ItoLabError):
    """Run configuration failed validation; ``fields`` lists every violation."""

    def __init__(self, fields: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(fields))
        self.fields = list(fields)
