"""
Exception and warning hierarchy for hbtkit.

Every error raised on purpose by the toolkit derives from HbtError so the
command line can map it to a single exit code.
"""


class HbtError(Exception):
    """Base class for all toolkit errors."""


class ContractError(HbtError):
    """A structural precondition was violated (unsorted tags, bad bin width...)."""


class DomainError(HbtError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class NormalizationError(HbtError):
    """A histogram cannot be normalized (a channel recorded no tags)."""


class FitError(HbtError):
    """The least-squares engine was given bad input or the model produced NaN."""


class DegenerateFitError(FitError):
    """The fit is underdetermined or its result is nonphysical."""


class TtgFormatError(HbtError):
    """A .ttg file is malformed."""


class ConfigError(HbtError):
    """A pipeline configuration failed validation."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class ManifestError(HbtError):
    """A pipeline artifact is missing or inconsistent."""

    def __init__(self, message: str, filename: str):
        super().__init__(f"{filename}: {message}")
        self.filename = filename


class CorrectionRangeWarning(UserWarning):
    """Corrected g2 values fall outside the physical range; kept unclamped."""


class FitRangeWarning(UserWarning):
    """A fitted parameter left its nominal range."""
