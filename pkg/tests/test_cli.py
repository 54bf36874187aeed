import csv
import io

import numpy as np
import pytest
import yaml

from haarmap import cli
from haarmap.io import ObservationLog, load_run_config, parse_trajectory, read_log, sensor_pose, write_log
from haarmap.octree import MapConfig, NodePartition, WaveletOctree
from haarmap.sim import builtin_scene, ground_truth_map, render_observation

SMALL = {
    "seed": 11,
    "map": {"min_cell_width": "10 cm", "tree_height": 6, "origin": "-3.2 -3.2 -1 m"},
    "sensors": {
        "lidar": {
            "projection": {
                "type": "spherical",
                "width": 128,
                "height": 16,
                "elevation_min": "-30 deg",
                "elevation_max": "30 deg",
                "min_range": "0.1 m",
                "max_range": "20 m",
            },
            "model": {"sigma_theta": "0.5 deg", "kappa_r": "2 cm"},
            "integrator": {"epsilon_thresh": 0.1, "mode": "beams"},
        }
    },
    "eval": {"test_every": 5, "samples_per_ray": 3},
    "simulate": {
        "scene": "desk_flat",
        "sensor": "lidar",
        "trajectory": {"type": "orbit", "center": "0 0 1.2 m", "radius": "1.5 m", "frames": 10, "period": "0.1 s"},
    },
}


def write_config(path, doc=SMALL, **top):
    doc = {**doc, **top}
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def csv_rows(text):
    return list(csv.reader(io.StringIO(text)))


def stats_row(out):
    rows = [r for r in csv_rows(out) if r]
    return dict(zip(rows[-2], rows[-1]))


@pytest.fixture
def config(tmp_path):
    return write_config(tmp_path / "run.yaml")


@pytest.fixture
def desk_log(tmp_path, config, capsys):
    path = tmp_path / "desk.wvlg"
    code, _, err = run(capsys, "--config", config, "simulate", "--out", path)
    assert code == 0, err
    return path


# ---------------------------------------------------------------- simulate


def test_simulate_writes_frames_and_header(desk_log, config):
    lg = read_log(desk_log)
    cfg = load_run_config(config)
    assert len(lg.frames) == 10
    assert lg.header["frames"] == 10
    assert lg.projection == cfg.sensors["lidar"].projection
    assert lg.params == cfg.sensors["lidar"].model
    assert np.all(np.diff([f.timestamp for f in lg.frames]) > 0)


def test_simulate_is_deterministic(tmp_path, config, capsys, desk_log):
    again = tmp_path / "again.wvlg"
    other = tmp_path / "other.wvlg"
    assert run(capsys, "--config", config, "simulate", "--out", again)[0] == 0
    assert run(capsys, "--seed", 99, "--config", config, "simulate", "--out", other)[0] == 0
    assert again.read_bytes() == desk_log.read_bytes()
    assert other.read_bytes() != desk_log.read_bytes()


def test_simulate_frame_matches_library(desk_log, config):
    cfg = load_run_config(config)
    sensor = cfg.sensor("lidar")
    bodies, times = parse_trajectory(cfg.simulate["trajectory"])
    rng = np.random.default_rng(cfg.seed)
    obs = render_observation(
        builtin_scene("desk_flat"), sensor_pose(bodies[0], sensor.projection), sensor.projection, sensor.model, rng
    )
    frame = read_log(desk_log).frames[0]
    assert frame.pose == obs.pose
    assert np.array_equal(frame.ranges, obs.ranges.astype(np.float32).astype(np.float64), equal_nan=True)


def test_simulate_errors(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.yaml", simulate={"scene": "desk_flat"})
    code, _, err = run(capsys, "--config", cfg, "simulate", "--out", tmp_path / "x.wvlg")
    assert code == 2 and "trajectory" in err
    cfg = write_config(tmp_path / "noscene.yaml", simulate={**SMALL["simulate"], "scene": "nowhere"})
    code, _, err = run(capsys, "--config", cfg, "simulate", "--out", tmp_path / "x.wvlg")
    assert code == 2 and "nowhere" in err
    traj = {**SMALL["simulate"]["trajectory"], "radius": 1.5}
    cfg = write_config(tmp_path / "units.yaml", simulate={**SMALL["simulate"], "trajectory": traj})
    code, _, err = run(capsys, "--config", cfg, "simulate", "--out", tmp_path / "x.wvlg")
    assert code == 2 and "simulate.trajectory.radius" in err


def test_scene_file_errors_name_the_field(tmp_path, config, capsys):
    scene = tmp_path / "scene.yaml"
    scene.write_text("name: s\nbounds: {min: '-1 -1 -1 m', max: '1 1 1 m'}\nprimitives:\n  - {type: sphere, center: '0 0 0 m', radius: 0.5}\n")
    code, _, err = run(capsys, "--config", config, "simulate", "--scene", scene, "--out", tmp_path / "x.wvlg")
    assert code == 2 and "radius" in err


def test_missing_config_is_input_error(tmp_path, capsys):
    assert run(capsys, "simulate", "--out", tmp_path / "x")[0] == 2
    assert run(capsys, "--config", tmp_path / "nope.yaml", "simulate", "--out", tmp_path / "x")[0] == 2
    assert run(capsys, "--threads", 0, "stats", tmp_path / "m")[0] == 2


# ------------------------------------------------------------------- build


def empty_log(tmp_path, config):
    cfg = load_run_config(config)
    s = cfg.sensor()
    path = tmp_path / "empty.wvlg"
    write_log(path, ObservationLog("lidar", s.projection, s.model, []))
    return path


def test_build_empty_log(tmp_path, config, capsys):
    out = tmp_path / "empty.wvmp"
    code, stdout, err = run(capsys, "--config", config, "build", empty_log(tmp_path, config), "--out", out)
    assert code == 0, err
    row = stats_row(stdout)
    assert row["frames"] == "0" and row["leaves_updated"] == "0" and row["nodes"] == "0"
    assert WaveletOctree.load(out).num_nodes == 0


def test_build_stats_parse_nonnegative(tmp_path, config, desk_log, capsys):
    code, stdout, err = run(capsys, "--config", config, "build", desk_log, "--out", tmp_path / "m.wvmp")
    assert code == 0, err
    row = stats_row(stdout)
    assert int(row["frames"]) == 8  # two of ten frames held out
    for key, value in row.items():
        assert float(value) >= 0, key
    assert int(row["leaves_updated"]) > 0 and int(row["nodes"]) > 0
    assert float(row["cpu_s"]) > 0


def test_naive_and_recursive_query_dumps_match(tmp_path, config, capsys):
    cfg5 = write_config(
        tmp_path / "five.yaml",
        simulate={**SMALL["simulate"], "trajectory": {**SMALL["simulate"]["trajectory"], "frames": 5}},
    )
    log = tmp_path / "five.wvlg"
    assert run(capsys, "--config", cfg5, "simulate", "--out", log)[0] == 0
    dumps = []
    for mode in ("naive", "beams"):
        m = tmp_path / f"{mode}.wvmp"
        code, _, err = run(
            capsys, "--config", cfg5, "build", log, "--all-frames", "--mode", mode, "--epsilon", 0, "--no-skip", "--out", m
        )
        assert code == 0, err
        code, out, _ = run(capsys, "query", m, "--slice", "z=0.45", "--step", "10cm")
        assert code == 0
        dumps.append(out)
    assert dumps[0] == dumps[1]
    values = np.array([float(r[3]) for r in csv_rows(dumps[0])[1:]])
    assert np.count_nonzero(values) > 100


def test_build_rejects_mismatched_log(tmp_path, config, desk_log, capsys):
    doc = yaml.safe_load(yaml.safe_dump(SMALL))
    doc["sensors"]["lidar"]["projection"]["width"] = 64
    other = write_config(tmp_path / "other.yaml", doc)
    code, _, err = run(capsys, "--config", other, "build", desk_log, "--out", tmp_path / "m.wvmp")
    assert code == 2 and "projection" in err
    doc["sensors"] = {"camera": SMALL["sensors"]["lidar"]}
    renamed = write_config(tmp_path / "renamed.yaml", doc)
    code, _, err = run(capsys, "--config", renamed, "build", desk_log, "--out", tmp_path / "m.wvmp")
    assert code == 2 and "lidar" in err
    assert not (tmp_path / "m.wvmp").exists()


def test_build_bad_log_and_units(tmp_path, config, capsys):
    bad = tmp_path / "bad.wvlg"
    bad.write_bytes(b"not a log")
    assert run(capsys, "--config", config, "build", bad, "--out", tmp_path / "m")[0] == 2
    log = empty_log(tmp_path, config)
    code, _, err = run(capsys, "--config", config, "build", log, "--resolution", "5 parsecs", "--out", tmp_path / "m")
    assert code == 2 and "--resolution" in err


def test_invariant_violation_exit_code(tmp_path, config, monkeypatch, capsys):
    monkeypatch.setattr(WaveletOctree, "check_consistency", lambda self: 1.0)
    code, _, err = run(capsys, "--config", config, "build", empty_log(tmp_path, config), "--out", tmp_path / "m")
    assert code == 3 and "invariant" in err


# ------------------------------------------------------------------- query


def slice_values(capsys, path, *extra):
    code, out, err = run(capsys, "query", path, "--slice", "z=0.05", *extra)
    assert code == 0, err
    rows = csv_rows(out)
    assert rows[0] == ["x", "y", "z", "logodds", "in_bounds"]
    return np.array([[float(v) for v in r] for r in rows[1:]])


def test_fresh_map_slice_is_zero(tmp_path, capsys):
    path = tmp_path / "fresh.wvmp"
    WaveletOctree(MapConfig(min_cell_width=0.1, tree_height=4)).save(path)
    table = slice_values(capsys, path)
    assert table.shape == (16 * 16, 5)
    assert np.all(table[:, 3] == 0.0) and np.all(table[:, 4] == 1)


def test_single_leaf_slice(tmp_path, capsys):
    path = tmp_path / "leaf.wvmp"
    m = WaveletOctree(MapConfig(min_cell_width=0.1, tree_height=4))
    m.set_leaf(NodePartition(4, (5, 9, 0)), 1.75)
    m.save(path)
    table = slice_values(capsys, path)
    nz = np.flatnonzero(table[:, 3])
    assert len(nz) == 1
    assert table[nz[0], :3] == pytest.approx([0.55, 0.95, 0.05])
    assert table[nz[0], 3] == pytest.approx(1.75, abs=1e-6)


def test_slice_matches_library(tmp_path, capsys, rng):
    cfg = MapConfig(min_cell_width=0.1, tree_height=5, origin=(-1.6, -1.6, 0.0))
    m = WaveletOctree(cfg)
    cells = rng.integers(0, 32, size=(100, 3))
    cells[:, 2] = 3
    cells = np.unique(cells, axis=0)
    m.apply_cells(np.full(len(cells), 5), cells, rng.uniform(-2, 4, len(cells)))
    path = tmp_path / "r.wvmp"
    m.save(path)
    code, out, _ = run(capsys, "query", path, "--slice", "z=35cm")
    table = np.array([[float(v) for v in r] for r in csv_rows(out)[1:]])
    assert table.shape == (32 * 32, 5)
    expected = m.query_points(table[:, :3])
    assert np.array_equal(table[:, 3], expected.astype(np.float64))
    centers = cfg.cell_centers(5, cells)
    assert np.allclose(m.query_points(centers), table[np.lexsort((table[:, 1], table[:, 0]))][
        np.ravel_multi_index((cells[:, 0], cells[:, 1]), (32, 32)), 3
    ])


def test_query_points_flag_out_of_bounds(tmp_path, capsys, caplog):
    path = tmp_path / "m.wvmp"
    WaveletOctree(MapConfig(min_cell_width=0.1, tree_height=3)).save(path)
    pts = tmp_path / "pts.csv"
    pts.write_text("x,y,z\n0.1,0.1,0.1\n5,5,5\n")
    out_csv = tmp_path / "q.csv"
    assert run(capsys, "query", path, "--points", pts, "--out", out_csv)[0] == 0
    rows = csv_rows(out_csv.read_text())
    assert rows[1][3:] == ["0.0", "1"] and rows[2][3:] == ["nan", "0"]
    assert "1 of 2 query points outside" in caplog.text


def test_query_argument_errors(tmp_path, capsys):
    path = tmp_path / "m.wvmp"
    WaveletOctree(MapConfig(min_cell_width=0.1, tree_height=3)).save(path)
    assert run(capsys, "query", path)[0] == 2
    assert run(capsys, "query", path, "--slice", "y=1")[0] == 2
    assert run(capsys, "query", path, "--slice", "z=1", "--step", "0")[0] == 2
    assert run(capsys, "query", tmp_path / "missing.wvmp", "--slice", "z=1")[0] == 2


# -------------------------------------------------------------------- eval


def noiseless_log(tmp_path, config, capsys):
    path = tmp_path / "clean.wvlg"
    code, _, err = run(capsys, "--config", config, "simulate", "--noiseless", "--out", path)
    assert code == 0, err
    return path


def eval_summary(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    return {k: float(v) for k, v in stats_row(out).items()}


def test_eval_perfect_map(tmp_path, capsys):
    # a 2.5 cm ground-truth map of the whole room
    doc = {**SMALL, "map": {"min_cell_width": "2.5 cm", "tree_height": 9, "origin": "-6.4 -6.4 -1 m"}}
    config = write_config(tmp_path / "fine.yaml", doc)
    log = noiseless_log(tmp_path, config, capsys)
    truth = ground_truth_map(builtin_scene("desk_flat"), load_run_config(config).map)
    path = tmp_path / "truth.wvmp"
    truth.save(path)
    out_dir = tmp_path / "ev"
    summary = eval_summary(capsys, "--config", config, "eval", path, log, "--out", out_dir)
    assert summary["auc"] >= 0.99
    assert summary["auc"] == pytest.approx(0.9966, abs=0.003)  # frozen regression value
    assert {p.name for p in out_dir.iterdir()} == {"roc.csv", "bands.csv", "summary.csv"}
    assert len(csv_rows((out_dir / "bands.csv").read_text())) == 1 + 5


def test_eval_empty_map_is_chance(tmp_path, config, capsys):
    log = noiseless_log(tmp_path, config, capsys)
    path = tmp_path / "empty.wvmp"
    WaveletOctree(load_run_config(config).map).save(path)
    summary = eval_summary(capsys, "--config", config, "eval", path, log, "--out", tmp_path / "ev")
    assert summary["auc"] == pytest.approx(0.5, abs=0.02)
    assert summary["n_unknown"] == summary["n_occupied"] + summary["n_free"]


def test_eval_is_deterministic(tmp_path, config, desk_log, capsys):
    m = tmp_path / "m.wvmp"
    assert run(capsys, "--config", config, "build", desk_log, "--out", m)[0] == 0
    a, b = tmp_path / "a", tmp_path / "b"
    run(capsys, "--config", config, "eval", m, desk_log, "--out", a)
    run(capsys, "--config", config, "eval", m, desk_log, "--out", b)
    for name in ("roc.csv", "bands.csv", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    header, values = csv_rows((a / "summary.csv").read_text())
    assert len(header) == len(values) and all(float(v) == float(v) for v in values)


def test_eval_needs_scene(tmp_path, desk_log, capsys):
    doc = {k: v for k, v in SMALL.items() if k != "simulate"}
    config = write_config(tmp_path / "noscene.yaml", doc)
    m = tmp_path / "m.wvmp"
    WaveletOctree(load_run_config(config).map).save(m)
    code, _, err = run(capsys, "--config", config, "eval", m, desk_log)
    assert code == 2 and "--scene" in err
    summary = eval_summary(capsys, "--config", config, "eval", m, desk_log, "--scene", "desk_flat", "--out", tmp_path / "e")
    assert summary["auc"] == pytest.approx(0.5, abs=0.02)


def test_eval_without_test_frames(tmp_path, config, capsys):
    log = empty_log(tmp_path, config)
    m = tmp_path / "m.wvmp"
    WaveletOctree(load_run_config(config).map).save(m)
    code, _, err = run(capsys, "--config", config, "eval", m, log)
    assert code == 2 and "held out" in err


# ------------------------------------------------------------------- stats


def test_stats_fresh_map(tmp_path, capsys):
    path = tmp_path / "fresh.wvmp"
    WaveletOctree(MapConfig(min_cell_width=0.1, tree_height=4)).save(path)
    code, out, _ = run(capsys, "stats", path)
    assert code == 0
    row = stats_row(out)
    assert row["allocated_nodes"] == "0"
    assert "allocated nodes  0" in out


def test_stats_match_library_and_compress(tmp_path, config, desk_log, capsys):
    m = tmp_path / "m.wvmp"
    assert run(capsys, "--config", config, "build", desk_log, "--out", m)[0] == 0
    code, out, _ = run(capsys, "stats", m)
    row = stats_row(out)
    lib = WaveletOctree.load(m).stats()
    for key in ("allocated_nodes", "coefficient_count", "coefficient_bytes", "dense_voxel_count", "dense_bytes"):
        assert int(row[key]) == lib[key]
    ratio = float(row["compression_ratio"])
    assert ratio == pytest.approx(lib["dense_bytes"] / lib["coefficient_bytes"])
    assert ratio > 1
