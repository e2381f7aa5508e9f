"""
Exception hierarchy for the hybrid BED package.

Every error raised on purpose by this package derives from AdekiError so the
CLI can turn it into a clean non-zero exit. Errors caused by bad inputs also
subclass ValueError.
"""


class AdekiError(Exception):
    """Base class for all package errors."""


class ConfigError(AdekiError, ValueError):
    """Run configuration could not be read or validated."""


class InstabilityError(AdekiError):
    """The explicit time stepper blew up (usually a CFL violation)."""


class MissingCheckpointError(AdekiError):
    """A reverse pass needed solver state that was not recorded."""


class OutOfBoundsError(AdekiError, ValueError):
    """A point or design lies outside the domain it must live in."""


class MissingSnapshotError(AdekiError, KeyError):
    """A field series has no snapshot at the requested time."""


class NumericalFailureError(AdekiError):
    """A matrix that must be invertible or PSD was not."""


class DegenerateUpdateError(AdekiError):
    """A Bayesian update left no posterior mass."""


class SupportViolationError(AdekiError, ValueError):
    """Posterior mass sits where the prior has none."""


class TrainingFailureError(AdekiError):
    """Discrepancy training produced a non-finite loss."""


class CheckpointReplayError(AdekiError):
    """Replaying an EKI step from its checkpoint did not reproduce the stored state."""


class UndefinedRelativeErrorError(AdekiError, ZeroDivisionError):
    """Relative error requested against an all-zero reference field."""
