"""Exception hierarchy.

Everything derives from ``LidarArError`` so callers (the CLI in particular)
can map whole families onto exit codes.
"""


class LidarArError(Exception):
    """Base class for all package errors."""


class ArgumentError(LidarArError, ValueError):
    """Invalid argument: bad index, dimension mismatch, non-PD matrix."""


class ConfigError(LidarArError, ValueError):
    """Malformed configuration or scenario specification."""


class NumericalError(LidarArError, ArithmeticError):
    """Base for numerical failures (exit code 3 in the CLI)."""


class DegenerateWeightError(NumericalError):
    """A weight would be zero or a standard deviation is not positive."""


class DegenerateGeometryError(NumericalError):
    """Point or satellite geometry does not support the requested solution."""


class RankDeficiencyError(NumericalError):
    """Normal matrix is singular or too badly conditioned to factorize."""


class RegistrationError(NumericalError):
    """RANSAC could not find a consensus set."""


class SearchSpaceError(NumericalError):
    """Integer search exceeded its enumeration budget."""
