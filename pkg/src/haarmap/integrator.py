"""Integration of posed range observations into a :class:`WaveletOctree`.

Three integrators share the beam model and the map's update path:

* ``integrate_recursive`` samples the update coarse-to-fine, stopping as
  soon as a cell's worst-case deviation from its center sample drops below
  ``epsilon_thresh`` and skipping free-space updates on cells already
  saturated at the lower clamp bound;
* ``integrate_naive`` samples every cell at the finest update resolution;
* ``integrate_rays`` marches each beam through the grid and ignores angular
  uncertainty.

The coarse-to-fine sampler runs breadth-first, one octree level at a time,
which visits exactly the cells a depth-first recursion would.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import beam_model as bm
from .geometry import Pose, beam_row_range
from .haar import OCTANT_OFFSETS
from .octree import NodePartition, UpdateTree, WaveletOctree

log = logging.getLogger(__name__)

# leaves within this distance of the lower clamp bound count as saturated
SATURATION_TOL = 4e-6
MODES = ("beams", "rays", "naive")


@dataclass
class Observation:
    """One posed frame of a range sensor; ``ranges`` is (H, W), NaN where invalid."""

    pose: Pose
    projection: object
    ranges: np.ndarray
    params: bm.BeamModelParams
    timestamp: float = 0.0
    sensor: str = "sensor"

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float64)
        if self.ranges.shape != self.projection.shape:
            raise ValueError(f"range image shape {self.ranges.shape} does not match projection {self.projection.shape}")

    @classmethod
    def from_points(cls, pose, projection, points_sensor, params, **kwargs):
        """Rasterize a sensor-frame point cloud into a range image (nearest return per pixel)."""
        coords = projection.to_sensor_coords(np.asarray(points_sensor, dtype=np.float64).reshape(-1, 3))
        ranges = np.full(projection.shape, np.inf)
        ok = coords.valid
        np.minimum.at(ranges, (coords.row[ok], coords.col[ok]), coords.r[ok])
        ranges[~np.isfinite(ranges)] = np.nan
        return cls(pose, projection, ranges, params, **kwargs)

    @property
    def valid(self):
        return self.projection.valid_ranges(self.ranges)

    @property
    def miss(self):
        with np.errstate(invalid="ignore"):
            return ~np.isfinite(self.ranges) | (self.ranges > self.projection.max_range)

    def endpoints_world(self):
        pts = self.projection.range_to_points(np.where(self.valid, self.ranges, np.nan))
        return self.pose.to_world(pts[self.valid])


@dataclass
class IntegratorConfig:
    epsilon_thresh: float = 0.1
    max_update_resolution: float | None = None
    skip_saturated: bool = True
    mode: str = "beams"
    skip_saturated_occupied: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.epsilon_thresh < 0:
            raise ValueError("epsilon_thresh must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def update_depth(self, map_config):
        if self.max_update_resolution is None:
            return map_config.tree_height
        return map_config.depth_for_width(self.max_update_resolution)


@dataclass
class UpdateStats:
    nodes_visited: int = 0
    terminated_early: int = 0
    skipped_saturated: int = 0
    leaves_updated: int = 0
    outside_map: int = 0
    per_depth_visits: dict = field(default_factory=dict)

    def __iadd__(self, other):
        self.nodes_visited += other.nodes_visited
        self.terminated_early += other.terminated_early
        self.skipped_saturated += other.skipped_saturated
        self.leaves_updated += other.leaves_updated
        self.outside_map += other.outside_map
        for d, n in other.per_depth_visits.items():
            self.per_depth_visits[d] = self.per_depth_visits.get(d, 0) + n
        return self

    def as_dict(self):
        return {
            "nodes_visited": self.nodes_visited,
            "terminated_early": self.terminated_early,
            "skipped_saturated": self.skipped_saturated,
            "leaves_updated": self.leaves_updated,
            "outside_map": self.outside_map,
        }


class RangeImageIndex:
    """Constant-time min/max/count queries over rectangles of a range image.

    Wrapping sensors get a horizontally doubled image so that column ranges
    crossing the seam stay contiguous.
    """

    def __init__(self, obs: Observation):
        valid = obs.valid
        miss = obs.miss & ~valid
        z = obs.ranges
        if obs.projection.wraps:
            valid = np.concatenate([valid, valid], axis=1)
            miss = np.concatenate([miss, miss], axis=1)
            z = np.concatenate([z, z], axis=1)
        self.height, self.width = valid.shape
        zmin = np.where(valid, z, np.inf).astype(np.float64)
        zmax = np.where(valid, z, -np.inf).astype(np.float64)
        self._min = self._sparse_table(zmin, np.minimum)
        self._max = self._sparse_table(zmax, np.maximum)
        self._valid_sat = self._summed(valid)
        self._miss_sat = self._summed(miss)

    @staticmethod
    def _summed(mask):
        sat = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
        sat[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1)
        return sat

    @staticmethod
    def _sparse_table(img, op):
        h, w = img.shape
        rows = [img]
        k = 1
        while 2 * k <= h:
            prev = rows[-1]
            rows.append(op(prev[:-k], prev[k:]))
            k *= 2
        table = []
        for level in rows:
            cols = [level]
            k = 1
            while 2 * k <= w:
                prev = cols[-1]
                cols.append(op(prev[:, :-k], prev[:, k:]))
                k *= 2
            table.append(cols)
        return table

    def _rect(self, table, op, i0, i1, j0, j1):
        a = np.floor(np.log2(i1 - i0 + 1)).astype(np.int64)
        b = np.floor(np.log2(j1 - j0 + 1)).astype(np.int64)
        out = np.empty(i0.shape)
        for la in np.unique(a):
            for lb in np.unique(b[a == la]):
                sel = (a == la) & (b == lb)
                t = table[la][lb]
                ii0, ii1 = i0[sel], i1[sel] - (1 << la) + 1
                jj0, jj1 = j0[sel], j1[sel] - (1 << lb) + 1
                out[sel] = op(op(t[ii0, jj0], t[ii0, jj1]), op(t[ii1, jj0], t[ii1, jj1]))
        return out

    def _count(self, sat, i0, i1, j0, j1):
        return sat[i1 + 1, j1 + 1] - sat[i0, j1 + 1] - sat[i1 + 1, j0] + sat[i0, j0]

    def query(self, i0, i1, j0, j1):
        """(z_min, z_max, n_valid, n_miss) over inclusive pixel rectangles; empty rects give zero counts."""
        empty = (i1 < i0) | (j1 < j0)
        i0c, i1c = np.where(empty, 0, i0), np.where(empty, 0, i1)
        j0c, j1c = np.where(empty, 0, j0), np.where(empty, 0, j1)
        zmin = self._rect(self._min, np.minimum, i0c, i1c, j0c, j1c)
        zmax = self._rect(self._max, np.maximum, i0c, i1c, j0c, j1c)
        n_valid = np.where(empty, 0, self._count(self._valid_sat, i0c, i1c, j0c, j1c))
        n_miss = np.where(empty, 0, self._count(self._miss_sat, i0c, i1c, j0c, j1c))
        return zmin, zmax, n_valid, n_miss


class FrameModel:
    """Everything the samplers need about one observation, precomputed once."""

    def __init__(self, obs: Observation):
        self.obs = obs
        self.pose = obs.pose
        self.projection = obs.projection
        self.params = obs.params
        self.valid = obs.valid
        self.miss = obs.miss & ~self.valid
        self.ranges = np.where(self.valid, obs.ranges, np.nan)
        self.index = RangeImageIndex(obs)
        self.rotation = obs.pose.matrix
        self.w_max = self.projection.half_pixel_diagonal / self.params.sigma_theta

    @property
    def empty(self):
        if self.params.free_space_on_miss:
            return not (np.any(self.valid) or np.any(self.miss))
        return not np.any(self.valid)

    def evaluate(self, points_world):
        """Update log-odds at world points (nearest-beam model)."""
        coords = self.projection.to_sensor_coords(self.pose.to_sensor(points_world))
        return self._evaluate_coords(coords)

    def _evaluate_coords(self, coords):
        p = self.params
        row, col = coords.row, coords.col
        z = self.ranges[row, col]
        beam_ok = coords.valid & self.valid[row, col]
        w = np.where(coords.valid, coords.theta, np.inf) / p.sigma_theta
        zs = np.where(beam_ok, z, 1.0)
        v = (coords.r - zs) / p.sigma_r(zs)
        s = np.where(beam_ok, bm.occupancy(v, w), 0.5)
        if p.free_space_on_miss:
            miss = coords.valid & self.miss[row, col] & (coords.r < self.projection.max_range)
            s = np.where(miss, 0.5 - 0.5 * bm.angle_factor(w), s)
        return bm.probability_to_logodds(s, p), s

    def project(self, map_config, depth, idx):
        centers = map_config.cell_centers(depth, idx)
        half = 0.5 * float(map_config.cell_width(depth))
        proj = self.projection.project_cells(self.pose.to_sensor(centers), np.full(len(idx), half), self.rotation)
        return centers, proj

    def beam_stats(self, proj):
        i0, i1 = beam_row_range(self.projection, proj.row_lo, proj.row_hi)
        j0, j1 = self.projection.beam_col_range(proj.col_lo, proj.col_hi)
        zmin, zmax, n_valid, n_miss = self.index.query(i0, i1, j0, j1)
        single = (i0 == i1) & (j0 == j1)
        return zmin, zmax, n_valid, n_miss, single, i0, j0


def _logodds_bounds(frame: FrameModel, proj, stats, update_type, s_center):
    """Interval of update log-odds over each cell (see ``probability_interval``)."""
    p = frame.params
    zmin, zmax, n_valid, n_miss, single, i0, j0 = stats
    s_lo, s_hi = bm.probability_interval(
        proj.r_lo, proj.r_hi, zmin, zmax, n_valid, frame.w_max, p, n_miss, frame.projection.max_range
    )
    # a single candidate beam: the Lipschitz bound around the center sample also holds
    one = single & (n_valid == 1) & ~proj.straddles
    if np.any(one):
        sig = p.sigma_r(np.where(one, zmin, 1.0))
        eps = bm.epsilon_max(proj.v_h_r, proj.v_h_theta, update_type, p, sig)
        s_lo = np.where(one, np.maximum(s_lo, s_center - eps), s_lo)
        s_hi = np.where(one, np.minimum(s_hi, s_center + eps), s_hi)
    covered = n_valid + n_miss if p.free_space_on_miss else n_valid
    partial = ~proj.inside_footprint | (covered < _rect_sizes(frame, proj))
    s_lo = np.where(partial, np.minimum(s_lo, 0.5), s_lo)
    s_hi = np.where(partial, np.maximum(s_hi, 0.5), s_hi)
    return bm.probability_to_logodds(s_lo, p), bm.probability_to_logodds(s_hi, p)


def _rect_sizes(frame, proj):
    i0, i1 = beam_row_range(frame.projection, proj.row_lo, proj.row_hi)
    j0, j1 = frame.projection.beam_col_range(proj.col_lo, proj.col_hi)
    return np.maximum(i1 - i0 + 1, 0) * np.maximum(j1 - j0 + 1, 0)


def _sample_levels(wmap: WaveletOctree, frame: FrameModel, cfg: IntegratorConfig, depth, idx, max_depth, stats, stop_depth=None):
    """Coarse-to-fine sampling from the given cells.

    Returns the terminal cells as ``(depths, idx, values)`` plus the cells
    still to be refined below ``stop_depth`` (empty when it equals ``max_depth``).
    """
    stop_depth = max_depth if stop_depth is None else stop_depth
    mc = wmap.config
    lo_clamp, hi_clamp = mc.clamp_lo, mc.clamp_hi
    out_d, out_i, out_v = [], [], []
    d = depth
    while idx.shape[0] and d <= stop_depth:
        n = idx.shape[0]
        stats.nodes_visited += n
        stats.per_depth_visits[d] = stats.per_depth_visits.get(d, 0) + n
        centers, proj = frame.project(mc, d, idx)
        bstats = frame.beam_stats(proj)
        zmin, zmax, n_valid, n_miss = bstats[:4]
        utype = bm.classify_update(
            proj.r_lo, proj.r_hi, zmin, zmax, n_valid, frame.params, proj.fully_outside, n_miss, frame.projection.max_range
        )
        active = utype != bm.UpdateType.FULLY_UNOBSERVED
        if cfg.skip_saturated and np.any(active):
            free = active & (utype == bm.UpdateType.FREE_OR_UNOBSERVED)
            if np.any(free):
                _, cell_hi = wmap.cell_range(d, idx[free])
                sat = np.zeros(n, dtype=bool)
                sat[free] = cell_hi <= lo_clamp + SATURATION_TOL
                stats.skipped_saturated += int(sat.sum())
                active &= ~sat
        sel = np.nonzero(active)[0]
        if sel.size == 0:
            idx = idx[:0]
            break
        idx, centers, utype = idx[sel], centers[sel], utype[sel]
        proj = _subset(proj, sel)
        bstats = tuple(x[sel] for x in bstats)
        values, s_center = frame.evaluate(centers)
        if d == max_depth:
            done = np.ones(sel.size, dtype=bool)
        else:
            L_lo, L_hi = _logodds_bounds(frame, proj, bstats, utype, s_center)
            if cfg.skip_saturated_occupied:
                cell_lo, _ = wmap.cell_range(d, idx)
                sat_hi = (L_lo >= 0) & (cell_lo >= hi_clamp - SATURATION_TOL)
                stats.skipped_saturated += int(sat_hi.sum())
                keep = ~sat_hi
                idx, values, L_lo, L_hi = idx[keep], values[keep], L_lo[keep], L_hi[keep]
                proj = _subset(proj, np.nonzero(keep)[0])
            eps = np.maximum(L_hi - values, values - L_lo)
            done = (eps < cfg.epsilon_thresh) & ~proj.straddles
            stats.terminated_early += int(done.sum())
        if np.any(done):
            out_d.append(np.full(int(done.sum()), d))
            out_i.append(idx[done])
            out_v.append(values[done])
        rest = idx[~done]
        idx = (rest[:, None, :] * 2 + OCTANT_OFFSETS[None]).reshape(-1, 3)
        d += 1
    if d > max_depth:
        idx = idx[:0]
    if not out_d:
        return (np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64), np.zeros(0)), idx
    return (np.concatenate(out_d), np.concatenate(out_i), np.concatenate(out_v)), idx


def _subset(proj, sel):
    return type(proj)(**{k: (v[sel] if isinstance(v, np.ndarray) else v) for k, v in vars(proj).items()})


def _apply(wmap, depths, idx, values, stats):
    nonzero = values != 0.0
    stats.leaves_updated += int(nonzero.sum())
    if np.any(nonzero):
        wmap.apply_update_block(UpdateTree.from_cells(wmap.config.tree_height, depths[nonzero], idx[nonzero], values[nonzero]))


def _outside_map(wmap, frame):
    _, proj = frame.project(wmap.config, 0, np.zeros((1, 3), dtype=np.int64))
    return bool(proj.fully_outside[0])


def _concat(parts):
    return tuple(np.concatenate([p[k] for p in parts]) for k in range(3))


def integrate_recursive(wmap: WaveletOctree, obs: Observation, cfg: IntegratorConfig | None = None) -> UpdateStats:
    """Coarse-to-fine adaptive update of ``wmap`` with one observation."""
    cfg = cfg or IntegratorConfig()
    stats = UpdateStats()
    frame = FrameModel(obs)
    max_depth = cfg.update_depth(wmap.config)
    root = np.zeros((1, 3), dtype=np.int64)
    if _outside_map(wmap, frame):
        stats.outside_map += 1
        stats.nodes_visited += 1
        log.warning("observation does not overlap the map")
        return stats
    if cfg.threads == 1:
        terminal, _ = _sample_levels(wmap, frame, cfg, 0, root, max_depth, stats)
    else:
        # the root level runs here; each remaining octant subtree is sampled
        # concurrently and merged back in octant order
        head, rest = _sample_levels(wmap, frame, cfg, 0, root, max_depth, stats, stop_depth=0)
        part_stats = [UpdateStats() for _ in range(rest.shape[0])]
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(
                pool.map(
                    lambda k: _sample_levels(wmap, frame, cfg, 1, rest[k : k + 1], max_depth, part_stats[k])[0],
                    range(rest.shape[0]),
                )
            )
        for ps in part_stats:
            stats += ps
        terminal = _concat([head, *results])
    _apply(wmap, *terminal, stats)
    return stats


def integrate_naive(wmap: WaveletOctree, obs: Observation, cfg: IntegratorConfig | None = None, chunk=1 << 18):
    """Evaluate the update at the center of every cell at the finest update resolution."""
    cfg = cfg or IntegratorConfig(mode="naive")
    stats = UpdateStats()
    frame = FrameModel(obs)
    depth = cfg.update_depth(wmap.config)
    n = 2**depth
    total = n**3
    out_i, out_v = [], []
    for start in range(0, total, chunk):
        lin = np.arange(start, min(start + chunk, total), dtype=np.int64)
        idx = np.stack([lin // (n * n), (lin // n) % n, lin % n], axis=-1)
        values, _ = frame.evaluate(wmap.config.cell_centers(depth, idx))
        stats.nodes_visited += lin.size
        nz = values != 0.0
        out_i.append(idx[nz])
        out_v.append(values[nz])
    idx = np.concatenate(out_i)
    values = np.concatenate(out_v)
    _apply(wmap, np.full(values.size, depth), idx, values, stats)
    return stats


def traverse_rays(map_config, depth, origin, directions, lengths):
    """Grid cells at ``depth`` pierced by each ray segment (3D DDA).

    Returns ``(ray_index, cell_index)`` pairs.  Segments are clipped to the
    map's root cell first.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    lengths = np.asarray(lengths, dtype=np.float64).reshape(-1)
    width = float(map_config.cell_width(depth))
    n_cells = 2**depth
    lo = np.asarray(map_config.origin)
    hi = lo + map_config.root_width
    # slab clip to the root box
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    t_enter = np.maximum(np.minimum(t1, t2).max(axis=1), 0.0)
    t_exit = np.minimum(np.maximum(t1, t2).min(axis=1), lengths)
    live = t_enter < t_exit
    rays = np.nonzero(live)[0]
    t_enter, t_exit, d = t_enter[live], t_exit[live], dirs[live]
    start = origin + d * t_enter[:, None]
    cell = np.clip(np.floor((start - lo) / width).astype(np.int64), 0, n_cells - 1)
    step = np.where(d > 0, 1, np.where(d < 0, -1, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        next_boundary = lo + (cell + (step > 0)) * width
        t_max = np.where(step != 0, (next_boundary - origin) / d, np.inf)
        t_delta = np.where(step != 0, width / np.abs(d), np.inf)
    out_r, out_c = [], []
    active = np.arange(rays.size)
    while active.size:
        out_r.append(rays[active])
        out_c.append(cell[active].copy())
        tm = t_max[active]
        axis = np.argmin(tm, axis=1)
        rows = np.arange(active.size)
        t_next = tm[rows, axis]
        cell[active, axis] += step[active, axis]
        t_max[active, axis] += t_delta[active, axis]
        inside = np.all((cell[active] >= 0) & (cell[active] < n_cells), axis=1)
        active = active[(t_next < t_exit[active]) & inside]
    if not out_r:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(out_r), np.concatenate(out_c)


def integrate_rays(wmap: WaveletOctree, obs: Observation, cfg: IntegratorConfig | None = None):
    """Ray-marching ablation: range-only profile along each beam's traversed cells."""
    cfg = cfg or IntegratorConfig(mode="rays")
    stats = UpdateStats()
    frame = FrameModel(obs)
    depth = cfg.update_depth(wmap.config)
    p = obs.params
    valid = frame.valid
    z = obs.ranges[valid]
    dirs_sensor = obs.projection.beam_directions()[valid]
    sig = p.sigma_r(z)
    # ranges are depths for pinhole sensors: scale the march length along the ray
    along = dirs_sensor[:, 2] if obs.projection.kind == "pinhole" else np.ones_like(z)
    lengths = (z + 3.0 * sig) / along
    dirs_world = dirs_sensor @ obs.pose.matrix.T
    ray, cells = traverse_rays(wmap.config, depth, obs.pose.origin, dirs_world, lengths)
    stats.nodes_visited += ray.size
    if ray.size == 0:
        return stats
    centers = wmap.config.cell_centers(depth, cells)
    r_center = obs.projection.chart(obs.pose.to_sensor(centers))[0]
    v = (r_center - z[ray]) / sig[ray]
    values = bm.probability_to_logodds(0.5 + bm.range_factor(v), p)
    # one update per cell and frame; occupied evidence wins over free
    n = 2**depth
    lin = (cells[:, 0] * n + cells[:, 1]) * n + cells[:, 2]
    order = np.lexsort((-values, lin))
    lin_s = lin[order]
    first = np.ones(lin_s.size, dtype=bool)
    first[1:] = lin_s[1:] != lin_s[:-1]
    keep = order[first]
    _apply(wmap, np.full(keep.size, depth), cells[keep], values[keep], stats)
    return stats


INTEGRATORS = {"beams": integrate_recursive, "naive": integrate_naive, "rays": integrate_rays}


def integrate(wmap, obs, cfg: IntegratorConfig):
    return INTEGRATORS[cfg.mode](wmap, obs, cfg)


def integrate_multi_sensor(wmap: WaveletOctree, frames, configs) -> UpdateStats:
    """Integrate ``(observation)`` frames in order, each with its sensor's config.

    ``configs`` maps sensor name to :class:`IntegratorConfig`; every config's
    update resolution must be reachable from the map's finest cells.
    """
    for name, cfg in configs.items():
        try:
            cfg.update_depth(wmap.config)
        except ValueError as exc:
            raise ValueError(f"sensor {name!r}: {exc}") from exc
    total = UpdateStats()
    for obs in frames:
        if obs.sensor not in configs:
            raise ValueError(f"no integrator configured for sensor {obs.sensor!r}")
        total += integrate(wmap, obs, configs[obs.sensor])
    return total
