"""Poses, projection models and sensor-space bounds of octree cells.

Both projection models expose a 2D chart in which the beams sit on an
integer pixel grid.  The angular coordinate ``theta`` of a point is the
Euclidean distance in that chart, converted to chart units (radians of
azimuth/elevation for spherical sensors, normalized image coordinates for
pinhole cameras), to its nearest beam.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Pose:
    """Sensor-to-world rigid transform; quaternion stored as (w, x, y, z)."""

    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        quat = np.asarray(self.rotation, dtype=np.float64)
        if quat.shape != (4,) or not np.all(np.isfinite(quat)):
            raise ValueError("rotation must be a finite (w, x, y, z) quaternion")
        if abs(np.linalg.norm(quat) - 1.0) > 1e-9:
            raise ValueError(f"rotation quaternion must have unit norm, got {np.linalg.norm(quat)}")
        trans = np.asarray(self.translation, dtype=np.float64)
        if trans.shape != (3,) or not np.all(np.isfinite(trans)):
            raise ValueError("translation must be a finite 3-vector")
        object.__setattr__(self, "rotation", tuple(float(x) for x in quat))
        object.__setattr__(self, "translation", tuple(float(x) for x in trans))

    @classmethod
    def from_rotation(cls, rotation: Rotation, translation):
        x, y, z, w = rotation.as_quat()
        quat = np.array([w, x, y, z])
        return cls(tuple(quat / np.linalg.norm(quat)), tuple(np.asarray(translation, dtype=np.float64)))

    @property
    def scipy_rotation(self) -> Rotation:
        w, x, y, z = self.rotation
        return Rotation.from_quat([x, y, z, w])

    @property
    def matrix(self):
        return self.scipy_rotation.as_matrix()

    @property
    def origin(self):
        return np.asarray(self.translation)

    def to_sensor(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points - self.origin) @ self.matrix

    def to_world(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix.T + self.origin

    def compose(self, other: "Pose") -> "Pose":
        rot = self.scipy_rotation * other.scipy_rotation
        return Pose.from_rotation(rot, self.to_world(np.asarray(other.translation)))


@dataclass
class SensorCoords:
    """Sensor coordinates of a batch of points.

    ``r`` is the range (spherical) or depth (pinhole), ``theta`` the chart
    distance to the nearest beam at pixel ``(row, col)``.  Points that are
    behind a pinhole camera, at the sensor origin, or outside the image
    footprint are flagged ``valid == False``.
    """

    r: np.ndarray
    theta: np.ndarray
    row: np.ndarray
    col: np.ndarray
    valid: np.ndarray

    @property
    def beam_index(self):
        return np.stack([self.row, self.col], axis=-1)


@dataclass
class PartitionProjection:
    """Conservative sensor-space bounds of a batch of cubes.

    ``col_lo``..``row_hi`` bound the cube's image in fractional pixel
    coordinates; ``v_h_r`` and ``v_h_theta`` bound the distance of any cube
    point from the center's projection along the range and chart axes.
    ``straddles`` marks cubes containing the sensor origin (or crossing a
    pinhole camera's image plane); their angular bounds are unbounded.
    """

    r_lo: np.ndarray
    r_hi: np.ndarray
    r_center: np.ndarray
    v_h_r: np.ndarray
    v_h_theta: np.ndarray
    col_lo: np.ndarray
    col_hi: np.ndarray
    row_lo: np.ndarray
    row_hi: np.ndarray
    straddles: np.ndarray
    fully_outside: np.ndarray
    inside_footprint: np.ndarray = field(default=None)


def _wrap_2pi(a):
    return np.mod(a, TWO_PI)


class _Projection:
    kind = ""
    width: int
    height: int
    min_range: float
    max_range: float

    def _check_common(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be at least 1")
        if not self.max_range > self.min_range > 0:
            raise ValueError("need max_range > min_range > 0")

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def wraps(self) -> bool:
        return False

    def nearest_beam(self, col_f, row_f):
        """Nearest beam pixel and the chart offset to it."""
        col_n = np.rint(col_f)
        row_n = np.clip(np.rint(row_f), 0, self.height - 1)
        if self.wraps:
            col = np.mod(col_n, self.width).astype(np.int64)
        else:
            col_n = np.clip(col_n, 0, self.width - 1)
            col = col_n.astype(np.int64)
        d_col = (col_f - col_n) * self.col_pitch
        d_row = (row_f - row_n) * self.row_pitch
        return row_n.astype(np.int64), col, np.hypot(d_col, d_row)

    @property
    def half_pixel_diagonal(self):
        return 0.5 * float(np.hypot(self.col_pitch, self.row_pitch))

    def to_sensor_coords(self, points_sensor) -> SensorCoords:
        r, col_f, row_f, valid = self.chart(points_sensor)
        row, col, theta = self.nearest_beam(np.where(valid, col_f, 0.0), np.where(valid, row_f, 0.0))
        return SensorCoords(r=np.maximum(r, 0.0), theta=np.where(valid, theta, np.inf), row=row, col=col, valid=valid)

    def beam_chart(self):
        """Chart coordinates (col, row) of every beam, each of shape (H, W)."""
        cols, rows = np.meshgrid(np.arange(self.width, dtype=np.float64), np.arange(self.height, dtype=np.float64))
        return cols, rows

    def range_to_points(self, ranges):
        """Sensor-frame endpoints for a (H, W) image of ranges/depths."""
        return self.beam_directions() * np.asarray(ranges, dtype=np.float64)[..., None] / self._range_scale()[..., None]

    def valid_ranges(self, ranges):
        ranges = np.asarray(ranges, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            return np.isfinite(ranges) & (ranges >= self.min_range) & (ranges <= self.max_range)


@dataclass(frozen=True)
class SphericalProjection(_Projection):
    """Range sensor with beams on a regular azimuth/elevation grid.

    Beams sit at pixel centers: column ``j`` has azimuth
    ``azimuth_min + (j + 0.5) * pitch``; row ``i`` has elevation
    ``elevation_min + (i + 0.5) * pitch``.
    """

    width: int
    height: int
    azimuth_min: float = -np.pi
    azimuth_max: float = np.pi
    elevation_min: float = -np.pi / 8
    elevation_max: float = np.pi / 8
    min_range: float = 0.1
    max_range: float = 50.0
    kind = "spherical"

    def __post_init__(self):
        self._check_common()
        if not 0 < self.azimuth_max - self.azimuth_min <= TWO_PI + 1e-12:
            raise ValueError("azimuth extent must be in (0, 2 pi]")
        if not -np.pi / 2 <= self.elevation_min < self.elevation_max <= np.pi / 2:
            raise ValueError("elevation extent must lie in [-pi/2, pi/2]")

    @property
    def wraps(self):
        return self.azimuth_max - self.azimuth_min >= TWO_PI - 1e-9

    @property
    def col_pitch(self):
        return (self.azimuth_max - self.azimuth_min) / self.width

    @property
    def row_pitch(self):
        return (self.elevation_max - self.elevation_min) / self.height

    @property
    def col_period(self):
        return TWO_PI / self.col_pitch

    def _range_scale(self):
        return np.ones(self.shape)

    def beam_angles(self):
        az = self.azimuth_min + (np.arange(self.width) + 0.5) * self.col_pitch
        el = self.elevation_min + (np.arange(self.height) + 0.5) * self.row_pitch
        return az, el

    def beam_directions(self):
        az, el = self.beam_angles()
        az, el = np.meshgrid(az, el)
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)

    def direction_from_angles(self, az, el):
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)

    def _col_coordinate(self, az):
        # fractional column in [-0.5, period - 0.5)
        return _wrap_2pi(az - self.azimuth_min) / self.col_pitch - 0.5

    def _col_inside(self, col_f):
        return self.wraps | (col_f <= self.width - 0.5)

    def chart(self, points_sensor):
        p = np.asarray(points_sensor, dtype=np.float64)
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        r = np.sqrt(x * x + y * y + z * z)
        az = np.arctan2(y, x)
        el = np.arctan2(z, np.hypot(x, y))
        col_f = self._col_coordinate(az)
        row_f = (el - self.elevation_min) / self.row_pitch - 0.5
        valid = (r > 0) & self._col_inside(col_f) & (row_f >= -0.5) & (row_f <= self.height - 0.5)
        return r, col_f, row_f, valid

    def project_cells(self, centers_sensor, half_widths, rotation_matrix=None) -> PartitionProjection:
        c = np.asarray(centers_sensor, dtype=np.float64)
        rho = np.sqrt(3.0) * np.asarray(half_widths, dtype=np.float64)
        d = np.linalg.norm(c, axis=-1)
        d_xy = np.hypot(c[..., 0], c[..., 1])
        straddles = d <= rho
        with np.errstate(invalid="ignore", divide="ignore"):
            alpha = np.where(straddles, np.pi, np.arcsin(np.clip(rho / np.maximum(d, 1e-300), 0.0, 1.0)))
            alpha_az = np.where(d_xy > rho, np.arcsin(np.clip(rho / np.maximum(d_xy, 1e-300), 0.0, 1.0)), np.pi)
        az_c = np.arctan2(c[..., 1], c[..., 0])
        el_c = np.arctan2(c[..., 2], d_xy)
        row_c = (el_c - self.elevation_min) / self.row_pitch - 0.5
        row_lo = np.where(straddles, -np.inf, row_c - alpha / self.row_pitch)
        row_hi = np.where(straddles, np.inf, row_c + alpha / self.row_pitch)
        col_c = self._col_coordinate(az_c)
        all_cols = straddles | (alpha_az >= np.pi)
        col_lo = np.where(all_cols, -np.inf, col_c - alpha_az / self.col_pitch)
        col_hi = np.where(all_cols, np.inf, col_c + alpha_az / self.col_pitch)
        v_h_theta = np.where(straddles, np.inf, np.hypot(alpha, alpha_az))
        r_lo = np.maximum(d - rho, 0.0)
        r_hi = d + rho
        rows_out = (row_hi < -0.5) | (row_lo > self.height - 0.5)
        if self.wraps:
            cols_out = np.zeros_like(rows_out)
            cols_in = np.ones_like(rows_out)
        else:
            hits = np.zeros_like(rows_out)
            full = np.zeros_like(rows_out)
            for k in (-1.0, 0.0, 1.0):
                lo = col_lo + k * self.col_period
                hi = col_hi + k * self.col_period
                hits |= (hi >= -0.5) & (lo <= self.width - 0.5)
                full |= (lo >= -0.5) & (hi <= self.width - 0.5)
            cols_out = ~(hits | all_cols)
            cols_in = full & ~all_cols
        inside = ~straddles & cols_in & (row_lo >= -0.5) & (row_hi <= self.height - 0.5)
        return PartitionProjection(
            r_lo=r_lo,
            r_hi=r_hi,
            r_center=d,
            v_h_r=rho,
            v_h_theta=v_h_theta,
            col_lo=col_lo,
            col_hi=col_hi,
            row_lo=row_lo,
            row_hi=row_hi,
            straddles=straddles,
            fully_outside=(rows_out | cols_out) & ~straddles,
            inside_footprint=inside,
        )

    def beam_col_range(self, col_lo, col_hi):
        """Inclusive candidate column range; may exceed ``width`` for wrapping sensors."""
        w = self.width
        finite = np.isfinite(col_lo) & np.isfinite(col_hi)
        if self.wraps:
            j0 = np.rint(np.where(finite, col_lo, 0.0))
            j1 = np.rint(np.where(finite, col_hi, 0.0))
            everything = ~finite | (j1 - j0 >= w - 1)
            start = np.mod(j0, w)
            return (
                np.where(everything, 0, start).astype(np.int64),
                np.where(everything, w - 1, start + (j1 - j0)).astype(np.int64),
            )
        lo_all = np.full(np.shape(col_lo), np.inf)
        hi_all = np.full(np.shape(col_lo), -np.inf)
        for k in (-1.0, 0.0, 1.0):
            lo = np.where(finite, col_lo, 0.0) + k * self.col_period
            hi = np.where(finite, col_hi, 0.0) + k * self.col_period
            hit = (hi >= -0.5) & (lo <= w - 0.5)
            lo_all = np.where(hit, np.minimum(lo_all, np.clip(np.rint(lo), 0, w - 1)), lo_all)
            hi_all = np.where(hit, np.maximum(hi_all, np.clip(np.rint(hi), 0, w - 1)), hi_all)
        lo_all = np.where(finite, lo_all, 0)
        hi_all = np.where(finite, hi_all, w - 1)
        empty = lo_all > hi_all
        return np.where(empty, 0, lo_all).astype(np.int64), np.where(empty, -1, hi_all).astype(np.int64)

    def perturb_directions(self, rng, sigma_theta):
        """Noisy beam directions, offset in the azimuth/elevation chart."""
        az, el = self.beam_angles()
        az, el = np.meshgrid(az, el)
        if sigma_theta > 0:
            az = az + rng.normal(0.0, sigma_theta, az.shape)
            el = el + rng.normal(0.0, sigma_theta, el.shape)
        return self.direction_from_angles(az, el)


@dataclass(frozen=True)
class PinholeProjection(_Projection):
    """Depth camera; pixel ``(u, v)`` centers at integer coordinates, z forward."""

    width: int
    height: int
    fx: float = 100.0
    fy: float = 100.0
    cx: float = 0.0
    cy: float = 0.0
    min_range: float = 0.1
    max_range: float = 10.0
    kind = "pinhole"

    def __post_init__(self):
        self._check_common()
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def col_pitch(self):
        return 1.0 / self.fx

    @property
    def row_pitch(self):
        return 1.0 / self.fy

    def _range_scale(self):
        # ranges are depths: endpoint = depth * (a, b, 1) = depth / dir_z * dir
        return self.beam_directions()[..., 2]

    def beam_directions(self):
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64), np.arange(self.height, dtype=np.float64))
        rays = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)

    def chart(self, points_sensor):
        p = np.asarray(points_sensor, dtype=np.float64)
        z = p[..., 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        col_f = self.fx * p[..., 0] / zs + self.cx
        row_f = self.fy * p[..., 1] / zs + self.cy
        valid = (
            front & (col_f >= -0.5) & (col_f <= self.width - 0.5) & (row_f >= -0.5) & (row_f <= self.height - 0.5)
        )
        return z, col_f, row_f, valid

    def project_cells(self, centers_sensor, half_widths, rotation_matrix=None) -> PartitionProjection:
        """Bounds from the cube's corners; the image of a cube in front of the
        camera is the convex hull of its projected corners."""
        c = np.asarray(centers_sensor, dtype=np.float64)
        h = np.asarray(half_widths, dtype=np.float64)
        signs = np.array([[(o >> k) & 1 for k in range(3)] for o in range(8)], dtype=np.float64) * 2.0 - 1.0
        rot = np.eye(3) if rotation_matrix is None else np.asarray(rotation_matrix)
        # world axis-aligned corner offsets expressed in the sensor frame
        offsets = signs @ rot
        corners = c[:, None, :] + h[:, None, None] * offsets[None, :, :]
        z = corners[..., 2]
        z_min, z_max = z.min(axis=1), z.max(axis=1)
        straddles = z_min <= 0
        behind = z_max <= 0
        zs = np.where(z > 0, z, 1.0)
        a = corners[..., 0] / zs
        b = corners[..., 1] / zs
        zc = np.where(c[:, 2] > 0, c[:, 2], 1.0)
        ac, bc = c[:, 0] / zc, c[:, 1] / zc
        v_h_theta = np.where(straddles, np.inf, np.sqrt(((a - ac[:, None]) ** 2 + (b - bc[:, None]) ** 2).max(axis=1)))
        pad = 1e-9
        col_lo = np.where(straddles, -np.inf, self.fx * a.min(axis=1) + self.cx - pad)
        col_hi = np.where(straddles, np.inf, self.fx * a.max(axis=1) + self.cx + pad)
        row_lo = np.where(straddles, -np.inf, self.fy * b.min(axis=1) + self.cy - pad)
        row_hi = np.where(straddles, np.inf, self.fy * b.max(axis=1) + self.cy + pad)
        outside_img = (col_hi < -0.5) | (col_lo > self.width - 0.5) | (row_hi < -0.5) | (row_lo > self.height - 0.5)
        # a cube crossing the image plane can still miss the frustum: inside
        # it, x / z and y / z are bounded by the image edges for 0 < z <= z_max
        zm = np.maximum(z_max, 0.0)
        a_lo, a_hi = (-0.5 - self.cx) / self.fx, (self.width - 0.5 - self.cx) / self.fx
        b_lo, b_hi = (-0.5 - self.cy) / self.fy, (self.height - 0.5 - self.cy) / self.fy
        x, y = corners[..., 0], corners[..., 1]
        beside = (
            (x.min(axis=1) > np.maximum(0.0, a_hi * zm))
            | (x.max(axis=1) < np.minimum(0.0, a_lo * zm))
            | (y.min(axis=1) > np.maximum(0.0, b_hi * zm))
            | (y.max(axis=1) < np.minimum(0.0, b_lo * zm))
        )
        outside_img = np.where(straddles, beside, outside_img)
        inside = (
            ~straddles & (col_lo >= -0.5) & (col_hi <= self.width - 0.5) & (row_lo >= -0.5) & (row_hi <= self.height - 0.5)
        )
        return PartitionProjection(
            r_lo=np.maximum(z_min, 0.0),
            r_hi=np.maximum(z_max, 0.0),
            r_center=c[:, 2],
            v_h_r=np.maximum(c[:, 2] - z_min, z_max - c[:, 2]),
            v_h_theta=v_h_theta,
            col_lo=col_lo,
            col_hi=col_hi,
            row_lo=row_lo,
            row_hi=row_hi,
            straddles=straddles & ~behind,
            fully_outside=behind | outside_img,
            inside_footprint=inside,
        )

    def beam_col_range(self, col_lo, col_hi):
        finite = np.isfinite(col_lo) & np.isfinite(col_hi)
        j0 = np.clip(np.rint(np.where(finite, col_lo, 0.0)), 0, self.width - 1)
        j1 = np.clip(np.rint(np.where(finite, col_hi, 0.0)), 0, self.width - 1)
        return np.where(finite, j0, 0).astype(np.int64), np.where(finite, j1, self.width - 1).astype(np.int64)

    def perturb_directions(self, rng, sigma_theta):
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64), np.arange(self.height, dtype=np.float64))
        a = (u - self.cx) / self.fx
        b = (v - self.cy) / self.fy
        if sigma_theta > 0:
            a = a + rng.normal(0.0, sigma_theta, a.shape)
            b = b + rng.normal(0.0, sigma_theta, b.shape)
        rays = np.stack([a, b, np.ones_like(a)], axis=-1)
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


ProjectionModel = SphericalProjection | PinholeProjection


def beam_row_range(projection, row_lo, row_hi):
    finite = np.isfinite(row_lo) & np.isfinite(row_hi)
    i0 = np.clip(np.rint(np.where(finite, row_lo, 0.0)), 0, projection.height - 1)
    i1 = np.clip(np.rint(np.where(finite, row_hi, 0.0)), 0, projection.height - 1)
    return np.where(finite, i0, 0).astype(np.int64), np.where(finite, i1, projection.height - 1).astype(np.int64)


def to_sensor_coords(pose: Pose, projection, world_points) -> SensorCoords:
    """Sensor coordinates and nearest beam of world-frame points."""
    return projection.to_sensor_coords(pose.to_sensor(world_points))


def partition_to_sensor(pose: Pose, projection, centers, cell_widths) -> PartitionProjection:
    """Conservative range/angle bounds of world-aligned cubes."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    half = 0.5 * np.broadcast_to(np.asarray(cell_widths, dtype=np.float64), centers.shape[:1])
    return projection.project_cells(pose.to_sensor(centers), half, pose.matrix)
