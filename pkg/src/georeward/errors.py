"""Exception taxonomy shared by every module.

All failures raised on purpose derive from GeoRewardError so callers (and the
CLI exit-code mapping) can distinguish our diagnostics from genuine bugs.
"""


class GeoRewardError(Exception):
    """Base class for every error this package raises deliberately."""


class FormatError(GeoRewardError):
    """A tensor file violates the on-disk format.

    `field` names the offending part of the header or payload
    ("magic", "dtype", "rank", "dims", "payload length", ...).
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ShapeError(GeoRewardError, ValueError):
    """Array dimensions do not match what the operation requires."""


class GridTypeError(GeoRewardError, TypeError):
    """Array dtype is unsupported for the operation (e.g. sampling a u8 grid)."""


class DomainError(GeoRewardError, ValueError):
    """A numeric argument is outside its valid domain (depth <= 0, t <= 0, ...)."""


class NumericError(GeoRewardError, ArithmeticError):
    """A computation produced non-finite values; message names the stage."""


class EmptyMaskError(GeoRewardError):
    """No valid pixels/patches survive masking; the input is degenerate."""


class ConfigError(GeoRewardError, ValueError):
    """A configuration object violates its invariants."""


class InputError(GeoRewardError):
    """Input data is missing or structurally unusable (bad directory, counts)."""


class InsufficientDataError(GeoRewardError):
    """Too few samples for the estimator (fewer than 8 correspondences, ...)."""


class DegeneracyError(GeoRewardError):
    """The estimation problem is rank-deficient (zero motion, pure rotation)."""


class TrainingError(GeoRewardError):
    """Optimization diverged or aborted; carries the last good state if any."""

    def __init__(self, message: str, last_good=None, metrics=None):
        super().__init__(message)
        self.last_good = last_good
        self.metrics = metrics if metrics is not None else []
