"""Instantaneous lidar-aided GNSS integer ambiguity resolution."""

from lidar_ar.errors import (
    ArgumentError,
    ConfigError,
    DegenerateGeometryError,
    DegenerateWeightError,
    RankDeficiencyError,
    RegistrationError,
    SearchSpaceError,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "ConfigError",
    "DegenerateGeometryError",
    "DegenerateWeightError",
    "RankDeficiencyError",
    "RegistrationError",
    "SearchSpaceError",
]
