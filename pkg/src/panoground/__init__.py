"""Grounding subtitles to normal-field-of-view candidates in 360-degree video frames."""

from .config import ConfigError, RunConfig
from .geometry import NFoVCamera, SphericalDir, candidate_grid
from .grounding import GroundingModel, GroundingOutput

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GroundingModel",
    "GroundingOutput",
    "NFoVCamera",
    "RunConfig",
    "SphericalDir",
    "candidate_grid",
]
