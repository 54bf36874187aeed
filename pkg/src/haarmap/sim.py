"""Synthetic scenes and range-sensor simulation.

Scenes are unions of analytic solids (boxes, spheres, capped vertical
cylinders, half-spaces).  Ray casting is exact; every solid reports the ray
interval it occupies, and the hit is the first boundary crossing ahead of
the origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from .beam_model import BeamModelParams
from .geometry import Pose
from .haar import OCTANT_OFFSETS
from .integrator import Observation
from .octree import WaveletOctree
from .units import parse_quantity, parse_vector


def _as_rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _yaw_matrix(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# elementwise forms, so a ray's arithmetic does not depend on the batch size
def _unyaw(v, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([c * v[..., 0] + s * v[..., 1], c * v[..., 1] - s * v[..., 0], v[..., 2]], axis=-1)


def _dot(a, b):
    return a[..., 0] * b[0] + a[..., 1] * b[1] + a[..., 2] * b[2]


def _set_vector(obj, name):
    v = np.asarray(getattr(obj, name), dtype=np.float64)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError(f"{obj.kind} {name} must be a finite 3-vector")
    object.__setattr__(obj, name, v)


def _check_positive(obj, *names):
    for name in names:
        value = getattr(obj, name)
        if not np.all(np.asarray(value) > 0):
            raise ValueError(f"{obj.kind} {name} must be positive")


def _slab(o, d, lo, hi):
    """Ray interval inside an axis-aligned box, per ray."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    # rays parallel to a slab: inside iff origin between the planes
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    return np.minimum(t1, t2).max(axis=-1), np.maximum(t1, t2).min(axis=-1)


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0
    kind = "box"

    def __post_init__(self):
        _set_vector(self, "center")
        _set_vector(self, "size")
        _check_positive(self, "size")

    def _local(self, p):
        return _unyaw(np.asarray(p, dtype=np.float64) - self.center, self.yaw)

    def interval(self, o, d):
        h = 0.5 * np.asarray(self.size)
        return _slab(self._local(o), _unyaw(np.asarray(d, dtype=np.float64), self.yaw), -h, h)

    def sdf(self, p):
        q = np.abs(self._local(p)) - 0.5 * np.asarray(self.size)
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)

    def aabb(self):
        corners = np.array([[(k >> i) & 1 for i in range(3)] for k in range(8)]) - 0.5
        pts = (corners * self.size) @ _yaw_matrix(self.yaw).T + self.center
        return pts.min(axis=0), pts.max(axis=0)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    kind = "sphere"

    def __post_init__(self):
        _set_vector(self, "center")
        _check_positive(self, "radius")

    def interval(self, o, d):
        oc = np.asarray(o) - self.center
        a = np.einsum("...i,...i", d, d)
        b = np.einsum("...i,...i", oc, d)
        c = np.einsum("...i,...i", oc, oc) - self.radius**2
        disc = b * b - a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        hit = disc >= 0
        return np.where(hit, (-b - root) / a, np.inf), np.where(hit, (-b + root) / a, -np.inf)

    def sdf(self, p):
        return np.linalg.norm(np.asarray(p) - self.center, axis=-1) - self.radius

    def aabb(self):
        return self.center - self.radius, self.center + self.radius


@dataclass(frozen=True)
class Cylinder:
    """Vertical capped cylinder (a pole); ``center`` is the midpoint of its axis."""

    center: np.ndarray
    radius: float
    height: float
    kind = "cylinder"

    def __post_init__(self):
        _set_vector(self, "center")
        _check_positive(self, "radius", "height")

    def interval(self, o, d):
        oc = np.asarray(o) - self.center
        d = np.asarray(d)
        a = d[..., 0] ** 2 + d[..., 1] ** 2
        b = oc[..., 0] * d[..., 0] + oc[..., 1] * d[..., 1]
        c = oc[..., 0] ** 2 + oc[..., 1] ** 2 - self.radius**2
        disc = b * b - a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = np.where(disc >= 0, (-b - root) / a, np.inf)
            t1 = np.where(disc >= 0, (-b + root) / a, -np.inf)
        vertical = a == 0
        t0 = np.where(vertical, np.where(c <= 0, -np.inf, np.inf), t0)
        t1 = np.where(vertical, np.where(c <= 0, np.inf, -np.inf), t1)
        h = 0.5 * self.height
        z0, z1 = _slab(oc[..., 2:3], d[..., 2:3], -h, h)
        return np.maximum(t0, z0), np.minimum(t1, z1)

    def sdf(self, p):
        oc = np.asarray(p) - self.center
        q = np.stack([np.hypot(oc[..., 0], oc[..., 1]) - self.radius, np.abs(oc[..., 2]) - 0.5 * self.height], axis=-1)
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)

    def aabb(self):
        ext = np.array([self.radius, self.radius, 0.5 * self.height])
        return self.center - ext, self.center + ext


@dataclass(frozen=True)
class Plane:
    """Half-space below ``point`` against the unit ``normal``."""

    point: np.ndarray
    normal: np.ndarray
    kind = "plane"

    def __post_init__(self):
        _set_vector(self, "point")
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("plane normal must be nonzero")
        object.__setattr__(self, "normal", n / norm)

    def interval(self, o, d):
        h = _dot(np.asarray(o) - self.point, self.normal)
        dn = _dot(np.asarray(d, dtype=np.float64), self.normal)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -h / dn
        t_in = np.where(dn < 0, t, np.where(dn > 0, -np.inf, np.where(h <= 0, -np.inf, np.inf)))
        t_out = np.where(dn > 0, t, np.where(dn < 0, np.inf, np.where(h <= 0, np.inf, -np.inf)))
        return t_in, t_out

    def sdf(self, p):
        return _dot(np.asarray(p, dtype=np.float64) - self.point, self.normal)


@dataclass
class Scene:
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    primitives: list = field(default_factory=list)
    name: str = "scene"

    def __post_init__(self):
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        if not np.all(self.bounds_max > self.bounds_min):
            raise ValueError("scene bounds must have positive extent")
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")
        for i, prim in enumerate(self.primitives):
            if not self._touches_bounds(prim):
                raise ValueError(f"primitive {i} ({prim.kind}) does not intersect the scene bounds")

    def _touches_bounds(self, prim):
        if isinstance(prim, Plane):
            corners = np.array([[(k >> i) & 1 for i in range(3)] for k in range(8)], dtype=np.float64)
            pts = self.bounds_min + corners * (self.bounds_max - self.bounds_min)
            vals = prim.sdf(pts)
            return vals.min() <= 0
        lo, hi = prim.aabb()
        return bool(np.all(lo <= self.bounds_max) and np.all(hi >= self.bounds_min))

    def cast_rays(self, origins, directions, max_range=np.inf):
        """Distance along each ray to the first surface (in units of ``|direction|``); inf on a miss."""
        d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        o = np.broadcast_to(np.asarray(origins, dtype=np.float64), d.shape)
        if np.any(np.linalg.norm(d, axis=-1) == 0):
            raise ValueError("ray direction must be nonzero")
        best = np.full(d.shape[0], np.inf)
        for prim in self.primitives:
            t_in, t_out = prim.interval(o, d)
            ok = t_in <= t_out
            t = np.where(t_in > 0, t_in, np.where(t_out > 0, t_out, np.inf))
            best = np.minimum(best, np.where(ok, t, np.inf))
        return np.where(best <= max_range, best, np.inf)

    def signed_distance(self, points):
        p = np.asarray(points, dtype=np.float64)
        return np.min([prim.sdf(p) for prim in self.primitives], axis=0)


@dataclass(frozen=True)
class GroundTruthQuery:
    point: np.ndarray
    is_occupied: bool
    distance_to_surface: float


def cast_ray(scene: Scene, origin, direction, max_range=np.inf) -> float:
    """Distance to the first surface along a single ray (direction normalized); inf on a miss."""
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm == 0:
        raise ValueError("ray direction must be nonzero")
    # unit directions (to rounding) are cast as given, matching batched casts
    if abs(norm - 1.0) > 1e-12:
        d = d / norm
    return float(scene.cast_rays(np.asarray(origin, dtype=np.float64), d, max_range)[0])


def signed_distance(scene: Scene, points):
    return scene.signed_distance(points)


def ground_truth(scene: Scene, point) -> GroundTruthQuery:
    dist = float(scene.signed_distance(np.asarray(point, dtype=np.float64)))
    return GroundTruthQuery(np.asarray(point, dtype=np.float64), dist <= 0.0, dist)


def render_observation(
    scene: Scene, pose: Pose, projection, params: BeamModelParams, rng=None, noise=True, **kwargs
) -> Observation:
    """Simulate one frame; direction noise is drawn before range noise from the same generator."""
    rng = _as_rng(rng)
    sigma_theta = params.sigma_theta if noise else 0.0
    dirs = projection.perturb_directions(rng, sigma_theta) if noise else projection.beam_directions()
    flat = dirs.reshape(-1, 3)
    t = scene.cast_rays(pose.origin, flat @ pose.matrix.T)
    if projection.kind == "pinhole":
        z = t * flat[:, 2]
    else:
        z = t
    z = z.reshape(projection.shape)
    hit = np.isfinite(z)
    if noise:
        eps = rng.standard_normal(projection.shape)
        z = np.where(hit, z + eps * params.sigma_r(np.where(hit, z, 1.0)), z)
    with np.errstate(invalid="ignore"):
        z = np.where(hit & (z <= projection.max_range), z, np.nan)
    return Observation(pose, projection, z, params, **kwargs)


def _parse_primitive(spec, i):
    where = f"primitives[{i}]"
    if not isinstance(spec, dict) or "type" not in spec:
        raise ValueError(f"{where}: expected a mapping with a 'type' key")
    kind = spec["type"]
    try:
        if kind == "box":
            return Box(
                parse_vector(spec["center"], "length", f"{where}.center"),
                parse_vector(spec["size"], "length", f"{where}.size"),
                parse_quantity(spec.get("yaw", "0 rad"), "angle", f"{where}.yaw"),
            )
        if kind == "sphere":
            return Sphere(
                parse_vector(spec["center"], "length", f"{where}.center"),
                parse_quantity(spec["radius"], "length", f"{where}.radius"),
            )
        if kind == "cylinder":
            return Cylinder(
                parse_vector(spec["center"], "length", f"{where}.center"),
                parse_quantity(spec["radius"], "length", f"{where}.radius"),
                parse_quantity(spec["height"], "length", f"{where}.height"),
            )
        if kind == "plane":
            normal = spec["normal"]
            if not (isinstance(normal, list) and len(normal) == 3):
                raise ValueError(f"{where}.normal: expected 3 unitless numbers")
            return Plane(parse_vector(spec["point"], "length", f"{where}.point"), np.asarray(normal, dtype=np.float64))
    except KeyError as exc:
        raise ValueError(f"{where}: missing field {exc.args[0]!r}") from None
    raise ValueError(f"{where}: unknown primitive type {kind!r}")


def scene_from_dict(doc) -> Scene:
    if not isinstance(doc, dict) or "primitives" not in doc or "bounds" not in doc:
        raise ValueError("scene: expected 'bounds' and 'primitives'")
    bounds = doc["bounds"]
    prims = [_parse_primitive(p, i) for i, p in enumerate(doc["primitives"] or [])]
    return Scene(
        parse_vector(bounds["min"], "length", "bounds.min"),
        parse_vector(bounds["max"], "length", "bounds.max"),
        prims,
        name=str(doc.get("name", "scene")),
    )


def load_scene(path) -> Scene:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ValueError(f"{path}: {exc}") from None
    return scene_from_dict(doc)


def builtin_scene(name="desk_flat") -> Scene:
    """Scenes shipped with the package: ``desk_flat`` and ``thin_poles``."""
    text = resources.files("haarmap.data").joinpath(f"{name}.yaml").read_text(encoding="utf-8")
    return scene_from_dict(yaml.safe_load(text))


def ground_truth_map(scene: Scene, config):
    """Map with cells touching any solid at ``clamp_hi`` and all other cells at ``clamp_lo``.

    Cells are refined only where the signed distance at their center does
    not rule out a surface crossing.
    """
    wmap = WaveletOctree(config)
    idx = np.zeros((1, 3), dtype=np.int64)
    depths, cells, values = [], [], []
    for d in range(config.tree_height + 1):
        half_diag = 0.5 * np.sqrt(3.0) * config.cell_width(d)
        dist = scene.signed_distance(config.cell_centers(d, idx))
        free = dist > half_diag
        solid = dist < -half_diag if d < config.tree_height else ~free
        done = free | solid
        depths.append(np.full(int(done.sum()), d))
        cells.append(idx[done])
        values.append(np.where(solid[done], config.clamp_hi, config.clamp_lo))
        rest = idx[~done]
        idx = (rest[:, None, :] * 2 + OCTANT_OFFSETS[None]).reshape(-1, 3)
    wmap.apply_cells(np.concatenate(depths), np.concatenate(cells), np.concatenate(values))
    return wmap
