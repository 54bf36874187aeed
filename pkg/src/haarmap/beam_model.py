"""Continuous inverse measurement model with range and angular uncertainty.

Noise in both sensor coordinates is approximated by the quadratic B-spline
``q`` (support [-3, 3]); the occupancy probability of a point at normalized
range offset ``v = (x_r - z_r) / sigma_r`` and angular offset
``w = x_theta / sigma_theta`` from a beam is

    s(v, w) = 1/2 + (Q(v) - Q(v - 3) / 2 - 1/2) * (Q(w + 3) - Q(w - 3))

with ``Q`` the cumulative of ``q`` (a cubic B-spline).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

def q(t):
    """Quadratic B-spline density on [-3, 3]."""
    t = np.clip(np.asarray(t, dtype=np.float64), -3.0, 3.0)
    a = np.abs(t)
    return np.where(a < 1.0, (3.0 - t * t) / 8.0, np.where(a <= 3.0, (3.0 - a) ** 2 / 16.0, 0.0))


def Q(t):
    """Cumulative of :func:`q`; a cubic B-spline rising from 0 at -3 to 1 at 3."""
    t = np.clip(np.asarray(t, dtype=np.float64), -3.0, 3.0)
    return np.where(
        t <= -3.0,
        0.0,
        np.where(
            t <= -1.0,
            (3.0 + t) ** 3 / 48.0,
            np.where(
                t < 1.0,
                0.5 + (9.0 * t - t**3) / 24.0,
                np.where(t < 3.0, 1.0 - (3.0 - t) ** 3 / 48.0, 1.0),
            ),
        ),
    )


def range_factor(v):
    """``Q(v) - Q(v - 3)/2 - 1/2``: -1/2 in free space, positive in the surface band."""
    v = np.asarray(v, dtype=np.float64)
    return Q(v) - 0.5 * Q(v - 3.0) - 0.5


def angle_factor(w):
    """Angular attenuation: 1 on the beam axis, falling to 0 at three sigma."""
    w = np.asarray(w, dtype=np.float64)
    return Q(w + 3.0) - Q(w - 3.0)


# the range factor rises on (-3, v*) and falls on (v*, 6); v* solves
# q(v) = q(v - 3) / 2, i.e. (3 - v)^2 / 16 = v^2 / 32 on [1, 2]
RANGE_FACTOR_ARGMAX = 6.0 - 3.0 * np.sqrt(2.0)
RANGE_FACTOR_MAX = float(range_factor(RANGE_FACTOR_ARGMAX))


def occupancy(v, w):
    """Occupancy probability at normalized offsets ``(v, w)`` from a beam endpoint."""
    return 0.5 + range_factor(v) * angle_factor(w)


class UpdateType(enum.IntEnum):
    FULLY_UNOBSERVED = 0
    FREE_OR_UNOBSERVED = 1
    POSSIBLY_OCCUPIED = 2


@dataclass(frozen=True)
class BeamModelParams:
    """Per-sensor uncertainty model.

    ``range_noise`` is ``"constant"`` (sigma_r = kappa_r, meters) or
    ``"quadratic"`` (sigma_r = kappa_r * z_r**2, kappa_r in 1/m).
    """

    sigma_theta: float
    kappa_r: float
    range_noise: str = "constant"
    update_logodds_lo: float = -4.0
    update_logodds_hi: float = 4.0
    probability_floor: float = 1e-4
    free_space_on_miss: bool = False

    def __post_init__(self):
        if not self.sigma_theta > 0:
            raise ValueError("sigma_theta must be positive")
        if not self.kappa_r > 0:
            raise ValueError("kappa_r must be positive")
        if self.range_noise not in ("constant", "quadratic"):
            raise ValueError(f"unknown range noise law {self.range_noise!r}")
        if not self.update_logodds_lo < 0 < self.update_logodds_hi:
            raise ValueError("update log-odds bounds must straddle zero")
        if not 0 < self.probability_floor < 0.5:
            raise ValueError("probability_floor must be in (0, 0.5)")

    def sigma_r(self, z_r):
        z_r = np.asarray(z_r, dtype=np.float64)
        if self.range_noise == "constant":
            return np.full_like(z_r, self.kappa_r)
        return self.kappa_r * z_r * z_r

    @property
    def tau_theta(self):
        return 3.0 * self.sigma_theta

    def tau_r(self, z_r):
        return 3.0 * self.sigma_r(z_r)


@dataclass
class BeamMeasurement:
    """A frame's worth of beams: measured range, pixel index and unit direction."""

    z_r: np.ndarray
    beam_index: np.ndarray
    direction: np.ndarray


def inverse_model(x_r, x_theta, z_r, params: BeamModelParams):
    """Occupancy probability of points at sensor coordinates ``(x_r, x_theta)``
    given beams measured at range ``z_r``."""
    z_r = np.asarray(z_r, dtype=np.float64)
    v = (np.asarray(x_r, dtype=np.float64) - z_r) / params.sigma_r(z_r)
    w = np.asarray(x_theta, dtype=np.float64) / params.sigma_theta
    return occupancy(v, w)


def probability_to_logodds(s, params: BeamModelParams):
    """Clamped log-odds of an update probability; exactly 0 at s = 1/2."""
    s = np.asarray(s, dtype=np.float64)
    d = params.probability_floor
    sc = np.clip(s, d, 1.0 - d)
    out = np.clip(np.log(sc / (1.0 - sc)), params.update_logodds_lo, params.update_logodds_hi)
    return np.where(s == 0.5, 0.0, out)


def inverse_model_logodds(x_r, x_theta, z_r, params: BeamModelParams):
    return probability_to_logodds(inverse_model(x_r, x_theta, z_r, params), params)


def epsilon_max(v_h_r, v_h_theta, update_type, params: BeamModelParams, sigma_r):
    """Worst-case probability deviation from a partition's center sample.

    ``v_h_r`` and ``v_h_theta`` are the partition's half-diagonal projected
    onto the range and angular sensor axes.
    """
    theta_term = 3.0 * np.asarray(v_h_theta, dtype=np.float64) / (16.0 * params.sigma_theta)
    r_term = 3.0 * np.asarray(v_h_r, dtype=np.float64) / (8.0 * np.asarray(sigma_r, dtype=np.float64))
    update_type = np.asarray(update_type)
    return np.where(
        update_type == UpdateType.FULLY_UNOBSERVED,
        0.0,
        np.where(update_type == UpdateType.POSSIBLY_OCCUPIED, np.maximum(theta_term, r_term), theta_term),
    )


def classify_update(
    r_lo, r_hi, z_min, z_max, n_valid, params: BeamModelParams, fully_outside=False, n_miss=0, max_range=np.inf
):
    """Three-way classification of partitions against the beams that may cover them.

    ``z_min``/``z_max`` are the extreme ranges over the valid candidate beams
    (``n_valid`` of them) and ``n_miss`` counts no-return beams, which only
    matter when ``params.free_space_on_miss`` is set (they then free space
    out to ``max_range``).  Errs toward
    POSSIBLY_OCCUPIED, never toward FULLY_UNOBSERVED.
    """
    r_lo = np.asarray(r_lo, dtype=np.float64)
    r_hi = np.asarray(r_hi, dtype=np.float64)
    z_min = np.asarray(z_min, dtype=np.float64)
    z_max = np.asarray(z_max, dtype=np.float64)
    has_beams = np.asarray(n_valid) > 0
    with np.errstate(invalid="ignore"):
        sig_lo, sig_hi = params.sigma_r(z_min), params.sigma_r(z_max)
        band_start = np.minimum(z_min - 3.0 * sig_lo, z_max - 3.0 * sig_hi)
        band_end = z_max + 6.0 * sig_hi
        occupied = has_beams & (r_hi >= band_start) & (r_lo <= band_end)
        observed = has_beams & (r_lo < band_end)
    if params.free_space_on_miss:
        observed = observed | ((np.asarray(n_miss) > 0) & (r_lo < max_range))
    out = np.where(occupied, UpdateType.POSSIBLY_OCCUPIED, np.where(observed, UpdateType.FREE_OR_UNOBSERVED, UpdateType.FULLY_UNOBSERVED))
    out = np.where(np.asarray(fully_outside), UpdateType.FULLY_UNOBSERVED, out)
    return out.astype(np.int8)



def _range_factor_bounds(v_lo, v_hi):
    b_lo_end, b_hi_end = range_factor(v_lo), range_factor(v_hi)
    lo = np.minimum(b_lo_end, b_hi_end)
    hi = np.where(
        (v_lo <= RANGE_FACTOR_ARGMAX) & (v_hi >= RANGE_FACTOR_ARGMAX), RANGE_FACTOR_MAX, np.maximum(b_lo_end, b_hi_end)
    )
    return lo, hi


def probability_interval(r_lo, r_hi, z_min, z_max, n_valid, w_max, params: BeamModelParams, n_miss=0, max_range=np.inf):
    """Interval containing the occupancy probability of every point of a cell.

    Every point is assumed to take its update from some candidate beam with
    range in ``[z_min, z_max]`` at a normalized angular offset of at most
    ``w_max``.  Cells without candidate beams get the degenerate interval
    ``[1/2, 1/2]``.
    """
    r_lo = np.asarray(r_lo, dtype=np.float64)
    r_hi = np.asarray(r_hi, dtype=np.float64)
    has = np.asarray(n_valid) > 0
    z_min = np.where(has, z_min, 1.0)
    z_max = np.where(has, z_max, 1.0)
    sig_small, sig_large = params.sigma_r(z_min), params.sigma_r(z_max)
    num_lo = r_lo - z_max
    num_hi = r_hi - z_min
    v_lo = np.where(num_lo < 0, num_lo / np.minimum(sig_small, sig_large), num_lo / np.maximum(sig_small, sig_large))
    v_hi = np.where(num_hi > 0, num_hi / np.minimum(sig_small, sig_large), num_hi / np.maximum(sig_small, sig_large))
    b_lo, b_hi = _range_factor_bounds(v_lo, v_hi)
    b_lo = np.where(has, b_lo, np.inf)
    b_hi = np.where(has, b_hi, -np.inf)
    if params.free_space_on_miss:
        miss = np.asarray(n_miss) > 0
        b_lo = np.where(miss & (r_lo < max_range), np.minimum(b_lo, -0.5), b_lo)
        b_lo = np.where(miss & (r_hi >= max_range), np.minimum(b_lo, 0.0), b_lo)
        b_hi = np.where(miss & (r_lo < max_range), np.maximum(b_hi, -0.5), b_hi)
        b_hi = np.where(miss & (r_hi >= max_range), np.maximum(b_hi, 0.0), b_hi)
    any_beam = np.isfinite(b_lo)
    a_lo = angle_factor(np.asarray(w_max, dtype=np.float64))
    s_lo = 0.5 + np.minimum(a_lo * b_lo, b_lo)
    s_hi = 0.5 + np.maximum(a_lo * b_hi, b_hi)
    return np.where(any_beam, s_lo, 0.5), np.where(any_beam, s_hi, 0.5)
