"""Canned inputs for the format-stability golden files.

Run ``python3 -m tests.golden_cases`` from the repository root to regenerate
the files in tests/golden after an intentional format change (and bump the
format version when doing so).
"""

import pathlib

import numpy as np

from haarmap.beam_model import BeamModelParams
from haarmap.geometry import PinholeProjection, Pose, SphericalProjection
from haarmap.integrator import Observation
from haarmap.io import ObservationLog, encode_log
from haarmap.octree import MapConfig, NodePartition, WaveletOctree

GOLDEN_DIR = pathlib.Path(__file__).parent / "golden"


def map_empty():
    return WaveletOctree(MapConfig(min_cell_width=0.1, tree_height=3))


def map_single_leaf():
    m = WaveletOctree(MapConfig(min_cell_width=0.25, tree_height=4, origin=(-2.0, -2.0, 0.0)))
    m.set_leaf(NodePartition(4, (3, 7, 1)), 2.5)
    return m


def map_mixed():
    m = WaveletOctree(MapConfig(min_cell_width=0.05, tree_height=5, clamp_lo=-2.0, clamp_hi=4.0))
    m.apply_cells([1, 3, 5, 5, 4], [(0, 1, 0), (6, 1, 2), (31, 31, 31), (12, 3, 9), (2, 2, 2)], [-1.25, 0.75, 3.0, -0.5, 1.5])
    m.apply_cells([2], [(1, 1, 1)], [-0.375])
    return m


def _ramp(shape, lo, hi):
    n = shape[0] * shape[1]
    return np.linspace(lo, hi, n).reshape(shape)


def log_empty():
    proj = SphericalProjection(8, 4, elevation_min=-0.3, elevation_max=0.3, max_range=10.0)
    return ObservationLog("lidar", proj, BeamModelParams(sigma_theta=0.01, kappa_r=0.02), [])


def log_spherical():
    proj = SphericalProjection(6, 3, elevation_min=-0.2, elevation_max=0.4, min_range=0.1, max_range=8.0)
    params = BeamModelParams(sigma_theta=0.005, kappa_r=0.01)
    frames = []
    for k in range(3):
        ranges = _ramp(proj.shape, 1.0 + k, 4.0 + k)
        ranges[0, k] = np.nan
        ranges[2, 5 - k] = np.inf
        pose = Pose((np.cos(0.1 * k), 0.0, 0.0, np.sin(0.1 * k)), (0.5 * k, -0.25, 1.0))
        frames.append(Observation(pose, proj, ranges, params, timestamp=0.1 * k, sensor="lidar"))
    return ObservationLog("lidar", proj, params, frames)


def log_pinhole():
    proj = PinholeProjection(4, 3, fx=3.0, fy=3.0, min_range=0.2, max_range=5.0)
    params = BeamModelParams(sigma_theta=0.002, kappa_r=0.005, range_noise="quadratic", free_space_on_miss=True)
    ranges = _ramp(proj.shape, 0.5, 2.0)
    ranges[1, 1] = np.nan
    frames = [Observation(Pose(), proj, ranges, params, timestamp=2.0, sensor="depth")]
    return ObservationLog("depth", proj, params, frames)


MAPS = {"map_empty": map_empty, "map_single_leaf": map_single_leaf, "map_mixed": map_mixed}
LOGS = {"log_empty": log_empty, "log_spherical": log_spherical, "log_pinhole": log_pinhole}


def write_all(directory=GOLDEN_DIR):
    directory.mkdir(parents=True, exist_ok=True)
    for name, make in MAPS.items():
        (directory / f"{name}.wvmp").write_bytes(make().to_bytes())
    for name, make in LOGS.items():
        (directory / f"{name}.wvlg").write_bytes(encode_log(make()))


if __name__ == "__main__":
    write_all()
