"""Multi-resolution occupancy mapping on a Haar wavelet octree."""

from .beam_model import BeamModelParams, UpdateType
from .estimator import OccupancyMapEstimator
from .geometry import PinholeProjection, Pose, SphericalProjection
from .integrator import (
    IntegratorConfig,
    Observation,
    integrate_multi_sensor,
    integrate_naive,
    integrate_rays,
    integrate_recursive,
)
from .octree import MapConfig, NodePartition, WaveletOctree

__all__ = [
    "BeamModelParams",
    "IntegratorConfig",
    "MapConfig",
    "NodePartition",
    "Observation",
    "OccupancyMapEstimator",
    "PinholeProjection",
    "Pose",
    "SphericalProjection",
    "UpdateType",
    "WaveletOctree",
    "integrate_multi_sensor",
    "integrate_naive",
    "integrate_rays",
    "integrate_recursive",
]
__version__ = "0.1.0"
