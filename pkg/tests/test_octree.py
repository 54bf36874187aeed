import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from haarmap.octree import (
    DecodeError,
    MapConfig,
    NodePartition,
    OutOfBounds,
    UpdateTree,
    WaveletOctree,
    morton_decode,
    morton_encode,
)


class DenseGrid:
    """Reference map: raw clamped log-odds on the full finest grid, never compressed."""

    def __init__(self, config):
        self.config = config
        n = 2**config.tree_height
        self.values = np.zeros((n, n, n))

    def add(self, depth, index, value):
        s = 2 ** (self.config.tree_height - depth)
        i, j, k = (np.asarray(index) * s).tolist()
        block = self.values[i : i + s, j : j + s, k : k + s]
        block[...] = np.clip(block + value, self.config.clamp_lo, self.config.clamp_hi)

    def coarse(self, depth):
        n = 2**depth
        s = self.values.shape[0] // n
        return self.values.reshape(n, s, n, s, n, s).mean(axis=(1, 3, 5))


def random_cells(rng, h, count, min_depth=0):
    """Non-overlapping random cells at mixed depths."""
    taken = np.zeros((2**h,) * 3, dtype=bool)
    out = []
    for _ in range(count * 4):
        d = int(rng.integers(min_depth, h + 1))
        idx = rng.integers(0, 2**d, 3)
        s = 2 ** (h - d)
        sl = tuple(slice(int(i) * s, (int(i) + 1) * s) for i in idx)
        if taken[sl].any():
            continue
        taken[sl] = True
        out.append((d, idx))
        if len(out) == count:
            break
    return out


def test_fresh_map_queries():
    m = WaveletOctree(MapConfig(0.1, 4))
    assert m.query_point([0.3, 0.7, 1.1]) == 0.0
    assert m.query_coarse(NodePartition.root(m.config)) == 0.0
    with pytest.raises(OutOfBounds):
        m.query_point([-0.01, 0.5, 0.5])
    assert np.isnan(m.query_points(np.array([[5.0, 0.0, 0.0]]))[0])
    with pytest.raises(ValueError):
        m.query_coarse(NodePartition(5, (0, 0, 0), m.config))


def test_write_read_identity():
    cfg = MapConfig(0.1, 4)
    m = WaveletOctree(cfg)
    leaf = NodePartition.containing(cfg, [0.42, 1.01, 0.05])
    m.set_leaf(leaf, 1.2)
    assert m.query_point(leaf.center) == pytest.approx(1.2, abs=1e-5)
    parent = NodePartition(cfg.tree_height - 1, tuple(np.asarray(leaf.index) // 2), cfg)
    assert m.query_coarse(parent) == pytest.approx(1.2 / 8, abs=1e-6)


def test_parent_of_single_leaf():
    cfg = MapConfig(1.0, 3)
    m = WaveletOctree(cfg)
    m.set_leaf(NodePartition(3, (5, 2, 7), cfg), 2.0)
    assert m.query_coarse(NodePartition(2, (2, 1, 3), cfg)) == pytest.approx(0.25)


def test_partition_geometry():
    cfg = MapConfig(0.25, 3, origin=(-1, 0, 2))
    p = NodePartition(1, (1, 0, 1), cfg)
    assert p.width == 1.0
    np.testing.assert_allclose(p.center, [0.5, 0.5, 3.5])
    assert p.half_diagonal == pytest.approx(np.sqrt(3) / 2)
    kids = p.children()
    lo = np.min([k.center - k.width / 2 for k in kids], axis=0)
    hi = np.max([k.center + k.width / 2 for k in kids], axis=0)
    np.testing.assert_allclose(lo, p.center - 0.5)
    np.testing.assert_allclose(hi, p.center + 0.5)
    assert len({k.index for k in kids}) == 8


@pytest.mark.parametrize(
    "kwargs",
    [dict(min_cell_width=0), dict(tree_height=0), dict(clamp_lo=0.5), dict(clamp_hi=-1.0), dict(prune_threshold=-1)],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        MapConfig(**kwargs)


@given(st.integers(1, 12), st.data())
def test_morton_round_trip(depth, data):
    idx = np.array(data.draw(st.lists(st.integers(0, 2**depth - 1), min_size=3, max_size=3)))
    assert np.array_equal(morton_decode(morton_encode(idx, depth), depth), idx)


@pytest.mark.parametrize("h", [4, 5])
def test_dense_equivalence(h, rng):
    cfg = MapConfig(0.1, h)
    m = WaveletOctree(cfg)
    ref = DenseGrid(cfg)
    for step in range(25):
        cells = random_cells(rng, h, int(rng.integers(1, 40)))
        depths = [d for d, _ in cells]
        index = np.array([i for _, i in cells])
        values = rng.uniform(-3, 3, len(cells))
        m.apply_cells(depths, index, values)
        for (d, i), v in zip(cells, values):
            ref.add(d, i, v)
        if step % 6 == 0:
            np.testing.assert_allclose(m.to_dense(), ref.values, atol=1e-4)
    np.testing.assert_allclose(m.to_dense(), ref.values, atol=1e-4)
    for d in range(h):
        np.testing.assert_allclose(m.to_dense(d), ref.coarse(d), atol=1e-4)
    pts = rng.uniform(0, cfg.root_width, (500, 3))
    idx, _ = cfg.point_index(pts)
    np.testing.assert_allclose(m.query_points(pts), ref.values[tuple(idx.T)], atol=1e-4)
    assert m.check_consistency() <= 1e-5
    dense = m.to_dense()
    assert dense.min() >= cfg.clamp_lo - 1e-6 and dense.max() <= cfg.clamp_hi + 1e-6


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_consistency_and_clamp_invariants(seed):
    rng = np.random.default_rng(seed)
    cfg = MapConfig(0.1, 4)
    m = WaveletOctree(cfg)
    for _ in range(5):
        cells = random_cells(rng, 4, 10)
        m.apply_cells([d for d, _ in cells], [i for _, i in cells], rng.uniform(-5, 5, len(cells)))
        assert m.check_consistency() <= 1e-5
        lo, hi = m.cell_range(0, [(0, 0, 0)])
        dense = m.to_dense()
        assert dense.min() >= cfg.clamp_lo - 1e-6 and dense.max() <= cfg.clamp_hi + 1e-6
        # the cached subtree range brackets the reconstruction
        assert lo[0] <= dense.min() + 1e-5 and hi[0] >= dense.max() - 1e-5


def test_zero_update_is_identity(rng):
    m = WaveletOctree(MapConfig(0.1, 4))
    cells = random_cells(rng, 4, 20)
    m.apply_cells([d for d, _ in cells], [i for _, i in cells], rng.uniform(-1, 1, len(cells)))
    before = m.to_dense()
    m.apply_update_block(UpdateTree(4))
    m.apply_cells([d for d, _ in cells], [i for _, i in cells], np.zeros(len(cells)))
    np.testing.assert_array_equal(m.to_dense(), before)


def test_update_then_negation(rng):
    cfg = MapConfig(0.1, 4, clamp_lo=-50.0, clamp_hi=50.0)
    m = WaveletOctree(cfg)
    cells = random_cells(rng, 4, 30)
    m.apply_cells([d for d, _ in cells], [i for _, i in cells], rng.uniform(-1, 1, len(cells)))
    before = m.to_dense()
    cells = random_cells(rng, 4, 30)
    u = UpdateTree.from_cells(4, [d for d, _ in cells], [i for _, i in cells], rng.uniform(-2, 2, len(cells)))
    m.apply_update_block(u)
    m.apply_update_block(u.negated())
    assert np.abs(m.to_dense() - before).max() <= 1e-4


def test_large_uniform_update_saturates():
    cfg = MapConfig(0.1, 4)
    m = WaveletOctree(cfg)
    m.set_leaf(NodePartition(4, (3, 3, 3), cfg), -1.0)
    m.apply_update_block(UpdateTree.uniform(cfg, NodePartition.root(cfg), 10.0))
    assert np.all(m.to_dense() == np.float32(cfg.clamp_hi))


def test_update_tree_rejects_overlap():
    with pytest.raises(ValueError):
        UpdateTree.from_cells(3, [1, 2], [(0, 0, 0), (1, 1, 1)], [1.0, 1.0])


def test_saturated_free_map_prunes_to_root():
    cfg = MapConfig(0.1, 5)
    m = WaveletOctree(cfg)
    # saturate one octant at a time so the clamp fires piecewise
    for o in range(8):
        m.apply_cells([1], [[(o >> k) & 1 for k in range(3)]], [-7.0])
    m.apply_cells([3], [(2, 5, 1)], [1.0])
    m.apply_cells([3], [(2, 5, 1)], [-9.0])
    m.prune()
    assert m.num_nodes <= 8
    assert np.all(m.to_dense() == np.float32(cfg.clamp_lo))


def test_lossless_prune_changes_nothing(rng):
    cfg = MapConfig(0.1, 5)
    m = WaveletOctree(cfg)
    for _ in range(6):
        cells = random_cells(rng, 5, 30)
        m.apply_cells([d for d, _ in cells], [i for _, i in cells], rng.uniform(-3, 3, len(cells)))
    # opposite updates leave zero-detail nodes behind
    cells = random_cells(rng, 5, 10, min_depth=4)
    for sign in (1.0, -1.0):
        m.apply_cells([d for d, _ in cells], [i for _, i in cells], sign * np.full(len(cells), 0.5))
    before = m.to_dense()
    m.prune()
    assert np.abs(m.to_dense() - before).max() == 0.0
    assert m.prune() == 0
    assert m.check_consistency() <= 1e-5


def test_lossy_prune_error_bound(rng):
    cfg = MapConfig(0.1, 5, prune_threshold=0.05)
    m = WaveletOctree(cfg)
    for _ in range(6):
        cells = random_cells(rng, 5, 40)
        m.apply_cells([d for d, _ in cells], [i for _, i in cells], rng.uniform(-0.3, 0.3, len(cells)))
    before = m.to_dense()
    n0 = m.num_nodes
    m.prune(lossy=True)
    assert m.num_nodes < n0
    assert np.abs(m.to_dense() - before).max() <= cfg.prune_threshold * cfg.tree_height


def test_sparsity_of_saturated_region():
    cfg = MapConfig(0.1, 5)
    m = WaveletOctree(cfg)
    # region: the depth-2 cell (1, 2, 0) saturated in pieces from finer cells
    kids = [(2 + (o & 1), 4 + (o >> 1 & 1), 0 + (o >> 2 & 1)) for o in range(8)]
    for _ in range(3):
        m.apply_cells([3] * 8, kids, [-1.5] * 8)
    m.prune()
    region_key = morton_encode(np.array([1, 2, 0]), 2)
    for d, idx, _, _ in m.iter_nodes():
        if d >= 2:
            assert morton_encode(np.array(idx) >> (d - 2), 2) != region_key


def test_stats():
    cfg = MapConfig(0.1, 6)
    m = WaveletOctree(cfg)
    assert m.stats()["allocated_nodes"] == 0
    m.set_leaf(NodePartition(6, (10, 20, 30), cfg), 1.0)
    st_ = m.stats()
    assert st_["allocated_nodes"] == 6
    assert st_["depth_histogram"] == [1] * 6
    assert st_["coefficient_bytes"] == 4 * (1 + 7 * 6)
    assert st_["dense_voxel_count"] == 64**3


def _random_map(rng, h, n_updates):
    cfg = MapConfig(0.05, h, origin=(-1.0, 2.0, 0.5))
    m = WaveletOctree(cfg)
    n = 2**h
    for _ in range(n_updates):
        idx = rng.integers(0, n, (300, 3))
        idx = np.unique(idx, axis=0)
        m.apply_cells(np.full(len(idx), h), idx, rng.uniform(-2, 3, len(idx)))
    return m


def test_serialization_round_trip(rng):
    fresh = WaveletOctree(MapConfig(0.1, 3))
    assert WaveletOctree.from_bytes(fresh.to_bytes()).coefficients_equal(fresh)
    m = _random_map(rng, 8, 14)
    assert m.num_nodes >= 10_000
    data = m.to_bytes()
    back = WaveletOctree.from_bytes(data)
    assert back.num_nodes == m.num_nodes
    assert back.to_bytes() == data
    assert back.config == m.config
    pts = rng.uniform(-1, 11, (2000, 3))
    np.testing.assert_array_equal(back.query_points(pts), m.query_points(pts))
    np.testing.assert_array_equal(back.cell_range(2, [(1, 1, 1)]), m.cell_range(2, [(1, 1, 1)]))


def test_save_load(tmp_path, rng):
    m = _random_map(rng, 4, 2)
    m.save(tmp_path / "a.wvmp")
    assert WaveletOctree.load(tmp_path / "a.wvmp").coefficients_equal(m)


def test_decode_errors(rng):
    data = bytearray(_random_map(rng, 4, 2).to_bytes())
    bad = bytearray(data)
    bad[0] ^= 0xFF
    with pytest.raises(DecodeError) as err:
        WaveletOctree.from_bytes(bad)
    assert err.value.offset == 0
    bad = bytearray(data)
    bad[4] = 99
    with pytest.raises(DecodeError, match="version"):
        WaveletOctree.from_bytes(bad)
    with pytest.raises(DecodeError, match="truncated"):
        WaveletOctree.from_bytes(data[:10])
    with pytest.raises(DecodeError):
        WaveletOctree.from_bytes(data[:-5])
    with pytest.raises(DecodeError, match="trailing"):
        WaveletOctree.from_bytes(bytes(data) + bytes(32))


@settings(max_examples=40)
@given(st.binary(max_size=200))
def test_decoder_never_crashes_on_garbage(blob):
    try:
        WaveletOctree.from_bytes(blob)
    except DecodeError:
        pass
