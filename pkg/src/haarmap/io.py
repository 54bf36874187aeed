"""Run configuration, trajectories and the binary observation log.

Observation log layout (little-endian)::

    "WVLG"  u16 version  u32 header_len  header (UTF-8 JSON)
    per frame:
        f64 timestamp
        f64 qw qx qy qz tx ty tz           sensor pose in the world
        u8  kind                           0 = range image, 1 = point list
        kind 0: u32 width, u32 height, width*height f32 ranges (NaN = invalid)
        kind 1: u32 n, n*3 f32 sensor-frame points

The JSON header holds the sensor name, its projection and beam-model
parameters (SI units) and the frame count.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, fields

import numpy as np
import yaml
from scipy.spatial.transform import Rotation, Slerp

from .beam_model import BeamModelParams
from .geometry import PinholeProjection, Pose, SphericalProjection
from .integrator import IntegratorConfig, Observation
from .octree import MapConfig
from .units import UnitError, parse_quantity, parse_vector

LOG_MAGIC = b"WVLG"
LOG_VERSION = 1
KIND_IMAGE = 0
KIND_POINTS = 1
_FRAME_HEAD = struct.Struct("<d7dB")

# camera optical frame (z forward, x right, y down) inside a body frame (x forward, z up)
CAMERA_MOUNT = Rotation.from_matrix(np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]))


class ConfigError(ValueError):
    """Malformed configuration, scene or trajectory; the message names the field."""


class LogFormatError(ValueError):
    pass


# ---------------------------------------------------------------- projections


def projection_to_dict(projection) -> dict:
    out = {"type": projection.kind}
    for f in fields(projection):
        out[f.name] = getattr(projection, f.name)
    return out


def projection_from_dict(doc: dict):
    doc = dict(doc)
    kind = doc.pop("type", None)
    cls = {"spherical": SphericalProjection, "pinhole": PinholeProjection}.get(kind)
    if cls is None:
        raise LogFormatError(f"unknown projection type {kind!r}")
    return cls(**doc)


def params_to_dict(params: BeamModelParams) -> dict:
    return {f.name: getattr(params, f.name) for f in fields(params)}


def params_from_dict(doc: dict) -> BeamModelParams:
    return BeamModelParams(**doc)


# ------------------------------------------------------------- config parsing


def _get(doc, key, where, default=KeyError):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping")
    if key in doc:
        return doc[key]
    if default is KeyError:
        raise ConfigError(f"{where}: missing field '{key}'")
    return default


def _length(doc, key, where, default=KeyError):
    value = _get(doc, key, where, default)
    if value is default and default is not KeyError:
        return default
    try:
        return parse_quantity(value, "length", f"{where}.{key}")
    except UnitError as exc:
        raise ConfigError(str(exc)) from None


def _angle(doc, key, where, default=KeyError):
    value = _get(doc, key, where, default)
    if value is default and default is not KeyError:
        return default
    try:
        return parse_quantity(value, "angle", f"{where}.{key}")
    except UnitError as exc:
        raise ConfigError(str(exc)) from None


def _vector(doc, key, where, kind="length"):
    try:
        return parse_vector(_get(doc, key, where), kind, f"{where}.{key}")
    except UnitError as exc:
        raise ConfigError(str(exc)) from None


def _number(doc, key, where, default=KeyError, kind=float):
    value = _get(doc, key, where, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}.{key}: expected a number, got {value!r}")
    if kind is int and int(value) != value:
        raise ConfigError(f"{where}.{key}: expected an integer, got {value!r}")
    return kind(value)


def _wrap(where, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from None


def parse_map_config(doc, where="map") -> MapConfig:
    return _wrap(
        where,
        MapConfig,
        min_cell_width=_length(doc, "min_cell_width", where),
        tree_height=_number(doc, "tree_height", where, kind=int),
        origin=tuple(_vector(doc, "origin", where)),
        clamp_lo=_number(doc, "clamp_lo", where, -2.0),
        clamp_hi=_number(doc, "clamp_hi", where, 4.0),
    )


def parse_projection(doc, where):
    kind = _get(doc, "type", where)
    if kind == "spherical":
        kwargs = dict(
            width=_number(doc, "width", where, kind=int),
            height=_number(doc, "height", where, kind=int),
            azimuth_min=_angle(doc, "azimuth_min", where, -math.pi),
            azimuth_max=_angle(doc, "azimuth_max", where, math.pi),
            elevation_min=_angle(doc, "elevation_min", where),
            elevation_max=_angle(doc, "elevation_max", where),
            min_range=_length(doc, "min_range", where),
            max_range=_length(doc, "max_range", where),
        )
        return _wrap(where, SphericalProjection, **kwargs)
    if kind == "pinhole":
        width = _number(doc, "width", where, kind=int)
        height = _number(doc, "height", where, kind=int)
        kwargs = dict(
            width=width,
            height=height,
            fx=_number(doc, "fx", where),
            fy=_number(doc, "fy", where),
            cx=_number(doc, "cx", where, (width - 1) / 2.0),
            cy=_number(doc, "cy", where, (height - 1) / 2.0),
            min_range=_length(doc, "min_range", where),
            max_range=_length(doc, "max_range", where),
        )
        return _wrap(where, PinholeProjection, **kwargs)
    raise ConfigError(f"{where}.type: expected 'spherical' or 'pinhole', got {kind!r}")


def parse_model(doc, where) -> BeamModelParams:
    law = _get(doc, "range_noise", where, "constant")
    if law == "constant":
        kappa = _length(doc, "kappa_r", where)
    elif law == "quadratic":
        try:
            kappa = parse_quantity(_get(doc, "kappa_r", where), "inverse_length", f"{where}.kappa_r")
        except UnitError as exc:
            raise ConfigError(str(exc)) from None
    else:
        raise ConfigError(f"{where}.range_noise: expected 'constant' or 'quadratic', got {law!r}")
    free = _get(doc, "free_space_on_miss", where, False)
    if not isinstance(free, bool):
        raise ConfigError(f"{where}.free_space_on_miss: expected true/false")
    return _wrap(
        where,
        BeamModelParams,
        sigma_theta=_angle(doc, "sigma_theta", where),
        kappa_r=kappa,
        range_noise=law,
        update_logodds_lo=_number(doc, "update_logodds_lo", where, -4.0),
        update_logodds_hi=_number(doc, "update_logodds_hi", where, 4.0),
        free_space_on_miss=free,
    )


def parse_integrator(doc, where) -> IntegratorConfig:
    doc = doc or {}
    res = _get(doc, "max_update_resolution", where, None)
    skip = _get(doc, "skip_saturated", where, True)
    if not isinstance(skip, bool):
        raise ConfigError(f"{where}.skip_saturated: expected true/false")
    return _wrap(
        where,
        IntegratorConfig,
        epsilon_thresh=_number(doc, "epsilon_thresh", where, 0.1),
        max_update_resolution=None if res is None else _length(doc, "max_update_resolution", where),
        skip_saturated=skip,
        mode=_get(doc, "mode", where, "beams"),
    )


@dataclass
class SensorConfig:
    name: str
    projection: object
    model: BeamModelParams
    integrator: IntegratorConfig


@dataclass
class EvalConfig:
    test_every: int = 20
    samples_per_ray: int = 10
    bands: tuple = ((-0.1, 0.05), (0.05, 0.2), (0.2, 0.5), (0.5, 2.0), (2.0, math.inf))


@dataclass
class RunConfig:
    map: MapConfig
    sensors: dict
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    simulate: dict = field(default_factory=dict)

    def sensor(self, name=None) -> SensorConfig:
        if name is None:
            if len(self.sensors) != 1:
                raise ConfigError(f"several sensors configured ({', '.join(self.sensors)}); name one")
            return next(iter(self.sensors.values()))
        if name not in self.sensors:
            raise ConfigError(f"sensor {name!r} not in config (have {', '.join(self.sensors)})")
        return self.sensors[name]


def parse_eval(doc, where="eval") -> EvalConfig:
    doc = doc or {}
    out = EvalConfig(
        test_every=_number(doc, "test_every", where, 20, kind=int),
        samples_per_ray=_number(doc, "samples_per_ray", where, 10, kind=int),
    )
    if out.test_every < 1 or out.samples_per_ray < 1:
        raise ConfigError(f"{where}: test_every and samples_per_ray must be positive")
    if "bands" in doc:
        bands = []
        for i, band in enumerate(doc["bands"]):
            if not (isinstance(band, list) and len(band) == 2):
                raise ConfigError(f"{where}.bands[{i}]: expected [lo, hi]")
            try:
                lo, hi = (parse_quantity(b, "length", f"{where}.bands[{i}]") for b in band)
            except UnitError as exc:
                raise ConfigError(str(exc)) from None
            if not lo < hi:
                raise ConfigError(f"{where}.bands[{i}]: lower edge must be below upper edge")
            bands.append((lo, hi))
        for i in range(1, len(bands)):
            if bands[i][0] != bands[i - 1][1]:
                raise ConfigError(f"{where}.bands: bands must be contiguous")
        out.bands = tuple(bands)
    return out


def run_config_from_dict(doc) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a mapping at top level")
    sensors_doc = _get(doc, "sensors", "config")
    if not isinstance(sensors_doc, dict) or not sensors_doc:
        raise ConfigError("config.sensors: expected at least one named sensor")
    sensors = {}
    for name, sdoc in sensors_doc.items():
        where = f"sensors.{name}"
        sensors[name] = SensorConfig(
            name=str(name),
            projection=parse_projection(_get(sdoc, "projection", where), f"{where}.projection"),
            model=parse_model(_get(sdoc, "model", where), f"{where}.model"),
            integrator=parse_integrator(_get(sdoc, "integrator", where, {}), f"{where}.integrator"),
        )
    cfg = RunConfig(
        map=parse_map_config(_get(doc, "map", "config")),
        sensors=sensors,
        eval=parse_eval(doc.get("eval")),
        seed=_number(doc, "seed", "config", 0, kind=int),
        simulate=doc.get("simulate") or {},
    )
    for name, s in sensors.items():
        _wrap(f"sensors.{name}.integrator", s.integrator.update_depth, cfg.map)
    return cfg


def load_yaml(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None


def load_run_config(path) -> RunConfig:
    return run_config_from_dict(load_yaml(path))


# ---------------------------------------------------------------- trajectories


def orbit_poses(center, radius, frames, height=None, start_angle=0.0, turns=1.0, facing="tangent"):
    """Body poses on a horizontal circle; the body x axis follows the direction of travel."""
    center = np.asarray(center, dtype=np.float64)
    angles = start_angle + 2.0 * np.pi * turns * np.arange(frames) / max(frames, 1)
    z = center[2] if height is None else height
    poses = []
    for a in angles:
        pos = center[:2] + radius * np.array([np.cos(a), np.sin(a)])
        yaw = a + np.pi / 2 if facing == "tangent" else a + np.pi
        rot = Rotation.from_euler("z", yaw)
        poses.append(Pose.from_rotation(rot, [pos[0], pos[1], z]))
    return poses


def waypoint_poses(times, positions, yaws, frames):
    """Linear position and slerped heading between waypoints, sampled uniformly in time."""
    times = np.asarray(times, dtype=np.float64)
    if times.size < 2 or np.any(np.diff(times) <= 0):
        raise ConfigError("trajectory.waypoints: need at least two waypoints with increasing time")
    positions = np.asarray(positions, dtype=np.float64)
    t = np.linspace(times[0], times[-1], frames)
    rots = Slerp(times, Rotation.from_euler("z", np.asarray(yaws, dtype=np.float64)))(t)
    pos = np.stack([np.interp(t, times, positions[:, k]) for k in range(3)], axis=-1)
    return [Pose.from_rotation(rots[i], pos[i]) for i in range(frames)], t


def parse_trajectory(doc, where="trajectory"):
    """Body poses and timestamps from a trajectory block."""
    kind = _get(doc, "type", where)
    frames = _number(doc, "frames", where, kind=int)
    if frames < 0:
        raise ConfigError(f"{where}.frames: must be non-negative")
    period = _get(doc, "period", where, "0.1 s")
    try:
        dt = parse_quantity(period, "time", f"{where}.period")
    except UnitError as exc:
        raise ConfigError(str(exc)) from None
    if kind == "orbit":
        poses = orbit_poses(
            _vector(doc, "center", where),
            _length(doc, "radius", where),
            frames,
            start_angle=_angle(doc, "start_angle", where, 0.0),
            turns=_number(doc, "turns", where, 1.0),
        )
        return poses, dt * np.arange(frames)
    if kind == "waypoints":
        wps = _get(doc, "waypoints", where)
        if not isinstance(wps, list):
            raise ConfigError(f"{where}.waypoints: expected a list")
        times, positions, yaws = [], [], []
        for i, wp in enumerate(wps):
            w = f"{where}.waypoints[{i}]"
            try:
                times.append(parse_quantity(_get(wp, "time", w), "time", f"{w}.time"))
            except UnitError as exc:
                raise ConfigError(str(exc)) from None
            positions.append(_vector(wp, "position", w))
            yaws.append(_angle(wp, "yaw", w, 0.0))
        if frames == 0:
            return [], np.zeros(0)
        poses, t = waypoint_poses(times, positions, yaws, frames)
        return poses, t
    raise ConfigError(f"{where}.type: expected 'orbit' or 'waypoints', got {kind!r}")


def sensor_pose(body: Pose, projection) -> Pose:
    """Mount a sensor on a body pose; cameras look along the body x axis."""
    if projection.kind == "pinhole":
        return Pose.from_rotation(body.scipy_rotation * CAMERA_MOUNT, body.translation)
    return body


# ------------------------------------------------------------- observation log


@dataclass
class ObservationLog:
    sensor: str
    projection: object
    params: BeamModelParams
    frames: list

    @property
    def header(self):
        return {
            "version": LOG_VERSION,
            "sensor": self.sensor,
            "projection": projection_to_dict(self.projection),
            "model": params_to_dict(self.params),
            "frames": len(self.frames),
        }


def encode_log(log: ObservationLog) -> bytes:
    header = json.dumps(log.header, sort_keys=True, allow_nan=True).encode("utf-8")
    out = [LOG_MAGIC, struct.pack("<HI", LOG_VERSION, len(header)), header]
    last = -math.inf
    for obs in log.frames:
        if obs.timestamp < last:
            raise LogFormatError("frames must be time-ordered")
        last = obs.timestamp
        if obs.projection != log.projection:
            raise LogFormatError("frame projection differs from the log header")
        pose = obs.pose
        out.append(_FRAME_HEAD.pack(float(obs.timestamp), *pose.rotation, *pose.translation, KIND_IMAGE))
        h, w = obs.ranges.shape
        out.append(struct.pack("<II", w, h))
        out.append(np.ascontiguousarray(obs.ranges, dtype="<f4").tobytes())
    return b"".join(out)


def write_log(path, log: ObservationLog):
    data = encode_log(log)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def decode_log(data: bytes) -> ObservationLog:
    mv = memoryview(data)
    if len(data) < 10 or bytes(mv[:4]) != LOG_MAGIC:
        raise LogFormatError("not an observation log (bad magic)")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != LOG_VERSION:
        raise LogFormatError(f"unsupported log version {version}")
    pos = 10
    if pos + hlen > len(data):
        raise LogFormatError("truncated header")
    try:
        header = json.loads(bytes(mv[pos : pos + hlen]).decode("utf-8"))
        projection = projection_from_dict(header["projection"])
        params = params_from_dict(header["model"])
        n_frames = int(header["frames"])
        sensor = str(header.get("sensor", "sensor"))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise LogFormatError(f"bad log header: {exc}") from None
    pos += hlen
    frames = []
    last = -math.inf
    for i in range(n_frames):
        if pos + _FRAME_HEAD.size > len(data):
            raise LogFormatError(f"truncated frame {i} at byte {pos}")
        vals = _FRAME_HEAD.unpack_from(data, pos)
        pos += _FRAME_HEAD.size
        ts, quat, trans, kind = vals[0], vals[1:5], vals[5:8], vals[8]
        if ts < last:
            raise LogFormatError(f"frame {i}: timestamps not ordered")
        last = ts
        try:
            pose = Pose(tuple(quat), tuple(trans))
        except ValueError as exc:
            raise LogFormatError(f"frame {i}: {exc}") from None
        if kind == KIND_IMAGE:
            w, h = struct.unpack_from("<II", data, pos)
            pos += 8
            if (h, w) != projection.shape:
                raise LogFormatError(f"frame {i}: image {w}x{h} does not match header {projection.shape[1]}x{projection.shape[0]}")
            nbytes = 4 * w * h
            if pos + nbytes > len(data):
                raise LogFormatError(f"truncated frame {i}")
            ranges = np.frombuffer(data, dtype="<f4", count=w * h, offset=pos).reshape(h, w).astype(np.float64)
            pos += nbytes
            frames.append(Observation(pose, projection, ranges, params, timestamp=ts, sensor=sensor))
        elif kind == KIND_POINTS:
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + 12 * n > len(data):
                raise LogFormatError(f"truncated frame {i}")
            pts = np.frombuffer(data, dtype="<f4", count=3 * n, offset=pos).reshape(n, 3).astype(np.float64)
            pos += 12 * n
            frames.append(Observation.from_points(pose, projection, pts, params, timestamp=ts, sensor=sensor))
        else:
            raise LogFormatError(f"frame {i}: unknown payload kind {kind}")
    if pos != len(data):
        raise LogFormatError(f"{len(data) - pos} trailing bytes after {n_frames} frames")
    return ObservationLog(sensor, projection, params, frames)


def encode_point_frame(timestamp, pose: Pose, points) -> bytes:
    """A point-list frame record, for logs produced by point-cloud sensors."""
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f4").reshape(-1, 3))
    return (
        _FRAME_HEAD.pack(float(timestamp), *pose.rotation, *pose.translation, KIND_POINTS)
        + struct.pack("<I", pts.shape[0])
        + pts.tobytes()
    )


def read_log(path) -> ObservationLog:
    with open(path, "rb") as fh:
        return decode_log(fh.read())


# ---------------------------------------------------------------- point files


def read_points(path):
    """Query points: CSV or whitespace text with three columns (meters), '#' comments allowed."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 coordinates")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                if not rows and lineno == 1:
                    continue  # header row
                raise ConfigError(f"{path}:{lineno}: bad number") from None
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)
