"""Command-line interface: simulate, build, query, eval, stats.

Exit codes: 0 success, 2 bad input (files, configuration, units), 3 an
internal invariant was violated.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time

import numpy as np

from . import evaluation as ev
from .integrator import IntegratorConfig, UpdateStats, integrate_multi_sensor
from .io import (
    ConfigError,
    LogFormatError,
    ObservationLog,
    load_run_config,
    load_yaml,
    parse_trajectory,
    read_log,
    read_points,
    sensor_pose,
    write_log,
)
from .octree import DecodeError, WaveletOctree
from .sim import builtin_scene, load_scene, render_observation
from .units import UnitError, parse_quantity

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INVARIANT = 3
CONSISTENCY_TOL = 1e-5

log = logging.getLogger("haarmap")


class InvariantViolation(RuntimeError):
    pass


def _length_arg(text, field):
    """CLI lengths accept a unit suffix; a bare number means meters."""
    text = str(text).strip()
    try:
        return float(text)
    except ValueError:
        pass
    if text and text[-1].isalpha() and " " not in text:
        split = len(text.rstrip("abcdefghijklmnopqrstuvwxyz"))
        text = f"{text[:split]} {text[split:]}"
    return parse_quantity(text, "length", field)


def _resolve_scene(ref):
    if ref is None:
        raise ConfigError("no scene given: pass --scene (a scene file or 'desk_flat'/'thin_poles')")
    if os.path.exists(ref):
        return load_scene(ref)
    try:
        return builtin_scene(ref)
    except (FileNotFoundError, ModuleNotFoundError):
        raise ConfigError(f"scene {ref!r} is neither a file nor a built-in scene") from None


def _emit_csv(rows, stream):
    w = csv.writer(stream, lineterminator="\n")
    for row in rows:
        w.writerow(row)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# -------------------------------------------------------------- subcommands


def cmd_simulate(args):
    cfg = load_run_config(args.config)
    sim = dict(cfg.simulate)
    if args.trajectory:
        sim["trajectory"] = load_yaml(args.trajectory)
    if "trajectory" not in sim:
        raise ConfigError("simulate: no trajectory (config 'simulate.trajectory' or --trajectory)")
    scene = _resolve_scene(args.scene or sim.get("scene"))
    sensor = cfg.sensor(args.sensor or sim.get("sensor"))
    bodies, times = parse_trajectory(sim["trajectory"], "simulate.trajectory")
    seed = cfg.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    noise = not args.noiseless and bool(sim.get("noise", True))
    frames = [
        render_observation(
            scene, sensor_pose(body, sensor.projection), sensor.projection, sensor.model, rng, noise=noise,
            timestamp=float(t), sensor=sensor.name,
        )
        for body, t in zip(bodies, times)
    ]
    nbytes = write_log(args.out, ObservationLog(sensor.name, sensor.projection, sensor.model, frames))
    print(f"wrote {len(frames)} frames ({nbytes} bytes) to {args.out}")
    return EXIT_OK


def _integrator_for(cfg, sensor, args):
    base = cfg.sensors[sensor].integrator
    return IntegratorConfig(
        epsilon_thresh=base.epsilon_thresh if args.epsilon is None else args.epsilon,
        max_update_resolution=(
            base.max_update_resolution if args.resolution is None else _length_arg(args.resolution, "--resolution")
        ),
        skip_saturated=base.skip_saturated and not args.no_skip,
        mode=args.mode or base.mode,
        threads=args.threads,
    )


def cmd_build(args):
    cfg = load_run_config(args.config)
    logs = [read_log(p) for p in args.logs]
    configs = {}
    frames = []
    for path, lg in zip(args.logs, logs):
        if lg.sensor not in cfg.sensors:
            raise ConfigError(f"{path}: sensor {lg.sensor!r} is not configured")
        if lg.projection != cfg.sensors[lg.sensor].projection:
            raise ConfigError(f"{path}: projection differs from config for sensor {lg.sensor!r}")
        configs[lg.sensor] = _integrator_for(cfg, lg.sensor, args)
        configs[lg.sensor].update_depth(cfg.map)
        chosen = lg.frames if args.all_frames else ev.split_frames(lg.frames, cfg.eval.test_every)[0]
        frames.extend(chosen)
    frames.sort(key=lambda o: o.timestamp)
    wmap = WaveletOctree(cfg.map)
    wall0, cpu0 = time.perf_counter(), time.process_time()
    peak = 0
    stats = UpdateStats()
    for obs in frames:
        stats += integrate_multi_sensor(wmap, [obs], configs)
        peak = max(peak, wmap.stats()["coefficient_bytes"])
    wall, cpu = time.perf_counter() - wall0, time.process_time() - cpu0
    err = wmap.check_consistency()
    if err > CONSISTENCY_TOL:
        raise InvariantViolation(f"hierarchy inconsistent after build (max error {err:.3g})")
    wmap.save(args.out)
    mstats = wmap.stats()
    row = {
        "frames": len(frames),
        **stats.as_dict(),
        "wall_s": wall,
        "cpu_s": cpu,
        "peak_map_bytes": peak,
        "map_bytes": mstats["coefficient_bytes"],
        "nodes": mstats["allocated_nodes"],
    }
    _emit_csv([list(row), [_fmt(v) for v in row.values()]], sys.stdout)
    return EXIT_OK


def _parse_slice(text):
    axis, _, value = text.partition("=")
    if axis.strip() != "z" or not value:
        raise ConfigError(f"--slice: expected 'z=<height>', got {text!r}")
    return _length_arg(value, "--slice")


def cmd_query(args):
    wmap = WaveletOctree.load(args.map)
    mc = wmap.config
    if (args.points is None) == (args.slice is None):
        raise ConfigError("query: give exactly one of --points FILE or --slice z=H")
    if args.points is not None:
        pts = read_points(args.points)
    else:
        z = _parse_slice(args.slice)
        step = mc.min_cell_width if args.step is None else _length_arg(args.step, "--step")
        if step <= 0:
            raise ConfigError("--step must be positive")
        n = int(np.floor(mc.root_width / step + 1e-9))
        ticks = (np.arange(n) + 0.5) * step
        gx, gy = np.meshgrid(mc.origin[0] + ticks, mc.origin[1] + ticks, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=-1)
    values = wmap.query_points(pts)
    inside = ~np.isnan(values)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        rows = [["x", "y", "z", "logodds", "in_bounds"]]
        for p, v, ok in zip(pts, values, inside):
            rows.append([_fmt(p[0]), _fmt(p[1]), _fmt(p[2]), _fmt(v) if ok else "nan", int(ok)])
        _emit_csv(rows, out)
    finally:
        if args.out:
            out.close()
    if not inside.all():
        log.warning("%d of %d query points outside the map", int((~inside).sum()), len(values))
    return EXIT_OK


def cmd_eval(args):
    cfg = load_run_config(args.config)
    scene_ref = args.scene or cfg.simulate.get("scene")
    if scene_ref is None:
        raise ConfigError("eval needs the scene for distance annotation: pass --scene FILE")
    scene = _resolve_scene(scene_ref)
    wmap = WaveletOctree.load(args.map)
    lg = read_log(args.log)
    _, test = ev.split_frames(lg.frames, cfg.eval.test_every)
    if not test:
        raise ConfigError(f"log has {len(lg.frames)} frames; none held out with test_every={cfg.eval.test_every}")
    seed = cfg.seed if args.seed is None else args.seed
    points = ev.sample_test_points(test, scene, cfg.eval.samples_per_ray, np.random.default_rng([seed, 1]))
    mstats = wmap.stats()
    report = ev.evaluate(
        wmap, points, cfg.eval.bands, stats={"map_bytes": mstats["coefficient_bytes"], "nodes": mstats["allocated_nodes"]}
    )
    ev.write_report(report, args.out)
    summary = report.summary()
    _emit_csv([list(summary), [_fmt(v) for v in summary.values()]], sys.stdout)
    return EXIT_OK


def cmd_stats(args):
    wmap = WaveletOctree.load(args.map)
    st = wmap.stats()
    print(f"map {args.map}")
    print(f"  min cell width   {wmap.config.min_cell_width} m, tree height {wmap.config.tree_height}")
    print(f"  allocated nodes  {st['allocated_nodes']}")
    print(f"  coefficients     {st['coefficient_count']} ({st['coefficient_bytes']} bytes)")
    print(f"  dense equivalent {st['dense_voxel_count']} cells ({st['dense_bytes']} bytes)")
    print(f"  compression      {st['compression_ratio']:.2f}x")
    print(f"  nodes per depth  {' '.join(str(x) for x in st['depth_histogram'])}")
    keys = ["allocated_nodes", "coefficient_count", "coefficient_bytes", "dense_voxel_count", "dense_bytes", "compression_ratio"]
    _emit_csv([keys, [_fmt(st[k]) for k in keys]], sys.stdout)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="haarmap", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for integration")
    p.add_argument("--config", default=None, help="run configuration (YAML)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render an observation log from a scene")
    s.add_argument("--scene", help="scene file or built-in scene name")
    s.add_argument("--trajectory", help="trajectory file (YAML); overrides the config")
    s.add_argument("--sensor", help="sensor name from the config")
    s.add_argument("--noiseless", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("build", help="integrate observation logs into a map")
    b.add_argument("logs", nargs="+")
    b.add_argument("--out", required=True)
    b.add_argument("--mode", choices=["beams", "rays", "naive"])
    b.add_argument("--epsilon", type=float, help="early-termination threshold (log-odds)")
    b.add_argument("--resolution", help="finest update resolution, e.g. '5cm'")
    b.add_argument("--no-skip", action="store_true", help="disable saturated-region skipping")
    b.add_argument("--all-frames", action="store_true", help="also integrate held-out test frames")
    b.set_defaults(func=cmd_build)

    q = sub.add_parser("query", help="export log-odds at points or on a horizontal slice")
    q.add_argument("map")
    q.add_argument("--points")
    q.add_argument("--slice", help="z=<height>")
    q.add_argument("--step", help="slice grid spacing (default: finest cell width)")
    q.add_argument("--out")
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("eval", help="score a map on held-out frames")
    e.add_argument("map")
    e.add_argument("log")
    e.add_argument("--scene")
    e.add_argument("--out", default="eval_out")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("stats", help="map statistics")
    t.add_argument("map")
    t.set_defaults(func=cmd_stats)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if args.command in ("simulate", "build", "eval") and not args.config:
        print(f"error: {args.command} needs --config", file=sys.stderr)
        return EXIT_INPUT
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, LogFormatError, DecodeError, UnitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
