"""Octree of Haar wavelet coefficients holding clamped occupancy log-odds.

The map stores one scale coefficient for the root cell and, per allocated
node, the seven detail coefficients relating the node's cell to its eight
children.  Unallocated subtrees are uniform: every cell below them has the
reconstructed value of the nearest allocated ancestor's child.  Nodes live
in a flat pool (numpy arrays addressed by index).

Cells are addressed by ``(depth, index)``; depth 0 is the root cell and
depth ``tree_height`` the finest cells, which never carry a node.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .haar import OCTANT_OFFSETS, SIGNS, child_offsets, lift_backward_3d, lift_forward_3d

MAGIC = b"WVMP"
FORMAT_VERSION = 1
MAX_TREE_HEIGHT = 20
_HEADER = struct.Struct("<4sHd3dBfff")
_NODE_DTYPE = np.dtype([("mask", "u1"), ("details", "<f4", (7,))])
_MASK_BITS = (1 << np.arange(8)).astype(np.uint8)


class OutOfBounds(ValueError):
    """A point or partition lies outside the map's root cell."""


class DecodeError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class MapConfig:
    min_cell_width: float = 0.1
    tree_height: int = 6
    origin: tuple = (0.0, 0.0, 0.0)
    clamp_lo: float = -2.0
    clamp_hi: float = 4.0
    prune_threshold: float = 0.0

    def __post_init__(self):
        if not self.min_cell_width > 0:
            raise ValueError("min_cell_width must be positive")
        if not 1 <= int(self.tree_height) <= MAX_TREE_HEIGHT:
            raise ValueError(f"tree_height must be in [1, {MAX_TREE_HEIGHT}]")
        if not self.clamp_lo < 0 < self.clamp_hi:
            raise ValueError("need clamp_lo < 0 < clamp_hi")
        if self.prune_threshold < 0:
            raise ValueError("prune_threshold must be non-negative")
        origin = np.asarray(self.origin, dtype=np.float64)
        if origin.shape != (3,):
            raise ValueError("origin must be a 3-vector")
        object.__setattr__(self, "origin", tuple(float(x) for x in origin))
        object.__setattr__(self, "tree_height", int(self.tree_height))
        object.__setattr__(self, "min_cell_width", float(self.min_cell_width))

    @property
    def root_width(self):
        return self.min_cell_width * 2**self.tree_height

    def cell_width(self, depth):
        return self.min_cell_width * 2.0 ** (self.tree_height - np.asarray(depth))

    def depth_for_width(self, width):
        """Depth whose cells are ``width`` wide; ``width`` must be min_cell_width * 2**k."""
        k = np.log2(width / self.min_cell_width)
        if abs(k - round(k)) > 1e-9 or round(k) < 0 or round(k) > self.tree_height:
            raise ValueError(
                f"resolution {width} is not min_cell_width * 2**k for k in [0, {self.tree_height}]"
            )
        return self.tree_height - int(round(k))

    def cell_centers(self, depth, index):
        index = np.asarray(index, dtype=np.float64)
        width = self.cell_width(depth)
        return np.asarray(self.origin) + (index + 0.5) * np.asarray(width)[..., None]

    def point_index(self, points, depth=None):
        """Cell indices containing ``points`` and an in-bounds mask."""
        depth = self.tree_height if depth is None else depth
        points = np.asarray(points, dtype=np.float64)
        rel = (points - np.asarray(self.origin)) / self.cell_width(depth)
        n = 2**depth
        with np.errstate(invalid="ignore"):
            inside = np.all((rel >= 0) & (rel < n), axis=-1)
        idx = np.floor(np.where(inside[..., None], rel, 0.0)).astype(np.int64)
        return np.clip(idx, 0, n - 1), inside


@dataclass(frozen=True)
class NodePartition:
    """The cube owned by the octree cell ``index`` at ``depth``."""

    depth: int
    index: tuple
    config: MapConfig = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "index", tuple(int(i) for i in self.index))

    @property
    def width(self):
        return float(self.config.cell_width(self.depth))

    @property
    def center(self):
        return self.config.cell_centers(self.depth, np.asarray(self.index))

    @property
    def half_diagonal(self):
        return np.sqrt(3.0) / 2.0 * self.width

    def children(self):
        base = np.asarray(self.index) * 2
        return [NodePartition(self.depth + 1, tuple(base + OCTANT_OFFSETS[o]), self.config) for o in range(8)]

    @classmethod
    def root(cls, config):
        return cls(0, (0, 0, 0), config)

    @classmethod
    def containing(cls, config, point, depth=None):
        depth = config.tree_height if depth is None else depth
        idx, inside = config.point_index(np.asarray(point)[None], depth)
        if not inside[0]:
            raise OutOfBounds(f"point {point} is outside the map")
        return cls(depth, tuple(idx[0]), config)


def morton_encode(index, depth):
    """Interleave (x, y, z) cell indices; three bits per level, x lowest."""
    index = np.asarray(index, dtype=np.int64)
    key = np.zeros(index.shape[:-1], dtype=np.int64)
    for bit in range(int(depth)):
        for axis in range(3):
            key |= ((index[..., axis] >> bit) & 1) << (3 * bit + axis)
    return key


def morton_decode(key, depth):
    key = np.asarray(key, dtype=np.int64)
    index = np.zeros(key.shape + (3,), dtype=np.int64)
    for bit in range(int(depth)):
        for axis in range(3):
            index[..., axis] |= ((key >> (3 * bit + axis)) & 1) << bit
    return index


class UpdateTree:
    """A measurement update in wavelet form, rooted at the map's root cell.

    ``scale`` is the update's root scale coefficient; ``levels[d]`` holds
    the sorted Morton keys of cells at depth ``d`` carrying a detail block
    and those blocks.  Cells without a block are uniform.
    """

    def __init__(self, tree_height, scale=0.0, levels=None):
        self.tree_height = int(tree_height)
        self.scale = float(scale)
        self.levels = levels if levels is not None else {}

    @classmethod
    def from_cells(cls, tree_height, depths, index, values):
        """Compress a piecewise-constant update over non-overlapping cells."""
        depths = np.asarray(depths, dtype=np.int64).reshape(-1)
        index = np.asarray(index, dtype=np.int64).reshape(-1, 3)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if not (depths.shape[0] == index.shape[0] == values.shape[0]):
            raise ValueError("depths, index and values must have matching lengths")
        if depths.size and (depths.min() < 0 or depths.max() > tree_height):
            raise ValueError("update cell depth outside the tree")
        levels = {}
        carry_keys = np.zeros(0, dtype=np.int64)
        carry_vals = np.zeros(0)
        max_depth = int(depths.max()) if depths.size else 0
        scale = 0.0
        for d in range(max_depth, -1, -1):
            sel = depths == d
            keys = np.concatenate([carry_keys, morton_encode(index[sel], d)])
            vals = np.concatenate([carry_vals, values[sel]])
            if d == 0:
                if keys.size > 1:
                    raise ValueError("update cells overlap")
                scale = float(vals[0]) if keys.size else 0.0
                break
            if keys.size == 0:
                carry_keys, carry_vals = keys, vals
                continue
            uniq, inverse = np.unique(keys, return_inverse=True)
            if uniq.size != keys.size:
                raise ValueError("update cells overlap")
            parents, pinv = np.unique(keys >> 3, return_inverse=True)
            block = np.zeros((parents.size, 8))
            block[pinv, keys & 7] = vals
            # uniform blocks need no detail storage
            parent_scale, details = lift_forward_3d(block)
            keep = np.any(details != 0.0, axis=1)
            if np.any(keep):
                levels[d - 1] = (parents[keep], details[keep])
            carry_keys, carry_vals = parents, parent_scale
        return cls(tree_height, scale, levels)

    @classmethod
    def uniform(cls, config, partition, value):
        """A constant ``value`` on one partition, zero elsewhere."""
        return cls.from_cells(config.tree_height, [partition.depth], [partition.index], [value])

    def negated(self):
        return UpdateTree(self.tree_height, -self.scale, {d: (k, -v) for d, (k, v) in self.levels.items()})

    def _details_at(self, depth, keys):
        if depth not in self.levels:
            return np.full(keys.shape, -1, dtype=np.int64)
        lkeys, _ = self.levels[depth]
        pos = np.searchsorted(lkeys, keys)
        pos_c = np.minimum(pos, lkeys.size - 1)
        return np.where((pos < lkeys.size) & (lkeys[pos_c] == keys), pos_c, -1)


class WaveletOctree:
    """Occupancy log-odds map stored as Haar wavelet coefficients."""

    def __init__(self, config: MapConfig | None = None):
        self.config = config if config is not None else MapConfig()
        self.root_scale = np.float32(0.0)
        self._root = -1
        self._size = 0
        self._alloc_arrays(64)

    # ------------------------------------------------------------------ pool
    def _alloc_arrays(self, capacity):
        self._details = np.zeros((capacity, 7), dtype=np.float32)
        self._children = np.full((capacity, 8), -1, dtype=np.int64)
        self._relmin = np.zeros(capacity)
        self._relmax = np.zeros(capacity)
        self._depth = np.zeros(capacity, dtype=np.int16)
        self._key = np.zeros(capacity, dtype=np.int64)

    def _grow(self, needed):
        cap = self._details.shape[0]
        if needed <= cap:
            return
        new_cap = max(needed, 2 * cap)
        for name in ("_details", "_children", "_relmin", "_relmax", "_depth", "_key"):
            old = getattr(self, name)
            new = np.empty((new_cap,) + old.shape[1:], dtype=old.dtype)
            new[: old.shape[0]] = old
            if name == "_children":
                new[old.shape[0]:] = -1
            else:
                new[old.shape[0]:] = 0
            setattr(self, name, new)

    def _allocate(self, depths, keys):
        n = len(keys)
        start = self._size
        self._grow(start + n)
        ids = np.arange(start, start + n)
        self._details[ids] = 0.0
        self._children[ids] = -1
        self._relmin[ids] = 0.0
        self._relmax[ids] = 0.0
        self._depth[ids] = depths
        self._key[ids] = keys
        self._size += n
        return ids

    @property
    def num_nodes(self):
        return self._size

    def copy(self):
        out = WaveletOctree(self.config)
        out.root_scale = np.float32(self.root_scale)
        out._root = self._root
        out._size = self._size
        for name in ("_details", "_children", "_relmin", "_relmax", "_depth", "_key"):
            setattr(out, name, getattr(self, name)[: max(self._size, 1)].copy())
        return out

    # --------------------------------------------------------------- queries
    def _descend(self, depth, index):
        """Reconstructed scale and node id of cells at one depth."""
        index = np.asarray(index, dtype=np.int64).reshape(-1, 3)
        n = index.shape[0]
        scale = np.full(n, float(self.root_scale))
        node = np.full(n, self._root, dtype=np.int64)
        for d in range(depth):
            shift = depth - d - 1
            octant = ((index >> shift) & 1) @ np.array([1, 2, 4])
            has = node >= 0
            if not np.any(has):
                break
            nid = node[has]
            oc = octant[has]
            scale[has] += np.einsum("ij,ij->i", self._details[nid].astype(np.float64), SIGNS[oc, 1:])
            node[has] = self._children[nid, oc]
        return scale, node

    def query_points(self, points):
        """Finest-resolution log-odds at ``points``; NaN outside the map."""
        points = np.asarray(points, dtype=np.float64)
        shape = points.shape[:-1]
        idx, inside = self.config.point_index(points.reshape(-1, 3))
        scale, _ = self._descend(self.config.tree_height, idx)
        return np.where(inside, scale, np.nan).reshape(shape)

    def query_point(self, point):
        value = float(self.query_points(np.asarray(point, dtype=np.float64)[None])[0])
        if np.isnan(value):
            raise OutOfBounds(f"point {tuple(point)} is outside the map")
        return value

    def query_cells(self, depth, index):
        """Scale coefficients (mean log-odds) of cells at ``depth``."""
        if not 0 <= depth <= self.config.tree_height:
            raise ValueError(f"depth {depth} outside [0, {self.config.tree_height}]")
        return self._descend(depth, index)[0]

    def query_coarse(self, partition: NodePartition):
        if not 0 <= partition.depth <= self.config.tree_height:
            raise ValueError(f"depth {partition.depth} outside [0, {self.config.tree_height}]")
        n = 2**partition.depth
        if any(not 0 <= i < n for i in partition.index):
            raise OutOfBounds(f"partition {partition.index} outside depth {partition.depth}")
        return float(self.query_cells(partition.depth, [partition.index])[0])

    def cell_range(self, depth, index):
        """Min and max reconstructed finest value inside each cell."""
        scale, node = self._descend(depth, index)
        has = node >= 0
        lo = scale.copy()
        hi = scale.copy()
        lo[has] += self._relmin[node[has]]
        hi[has] += self._relmax[node[has]]
        return lo, hi

    def to_dense(self, depth=None):
        """Materialize all cells at ``depth`` (default finest) as a 3D array."""
        depth = self.config.tree_height if depth is None else depth
        n = 2**depth
        if n**3 > 2**27:
            raise MemoryError(f"dense grid of {n}^3 cells is too large")
        grid = np.full((1, 1, 1), float(self.root_scale))
        nodes = np.full((1, 1, 1), self._root, dtype=np.int64)
        for _ in range(depth):
            m = grid.shape[0]
            finer = np.repeat(np.repeat(np.repeat(grid, 2, 0), 2, 1), 2, 2)
            finer_nodes = np.full(finer.shape, -1, dtype=np.int64)
            has = nodes >= 0
            if np.any(has):
                ii, jj, kk = np.nonzero(has)
                nid = nodes[has]
                kids = lift_backward_3d(grid[has], self._details[nid].astype(np.float64))
                for o in range(8):
                    ox, oy, oz = OCTANT_OFFSETS[o]
                    finer[2 * ii + ox, 2 * jj + oy, 2 * kk + oz] = kids[:, o]
                    finer_nodes[2 * ii + ox, 2 * jj + oy, 2 * kk + oz] = self._children[nid, o]
            grid, nodes = finer, finer_nodes
            assert grid.shape[0] == 2 * m
        return grid

    # --------------------------------------------------------------- updates
    def apply_update_block(self, update: UpdateTree, partition: NodePartition | None = None):
        """Add a wavelet-space update and clamp the affected finest cells.

        ``partition`` is accepted for symmetry with cell-local updates;
        ``update`` is always expressed from the root cell down.
        """
        if update.tree_height != self.config.tree_height:
            raise ValueError("update tree height does not match the map")
        lo, hi = self.config.clamp_lo, self.config.clamp_hi
        h = self.config.tree_height

        # top-down: reconstruct old scales, distribute increments, decide where to descend
        keys = np.zeros(1, dtype=np.int64)
        node = np.array([self._root], dtype=np.int64)
        old = np.array([float(self.root_scale)])
        inc = np.array([update.scale])
        records = []
        for d in range(h + 1):
            upd_row = update._details_at(d, keys) if d < h else np.full(keys.shape, -1, dtype=np.int64)
            has_upd = upd_row >= 0
            has_node = node >= 0
            rel_lo = np.where(has_node, self._relmin[np.maximum(node, 0)], 0.0)
            rel_hi = np.where(has_node, self._relmax[np.maximum(node, 0)], 0.0)
            new = old + inc
            in_bounds = (new + rel_lo >= lo) & (new + rel_hi <= hi)
            descend = has_upd | (~in_bounds & has_node)
            final = np.where(in_bounds | has_node, new, np.clip(new, lo, hi))
            final[descend] = np.nan
            records.append((keys, node, final, descend))
            if not np.any(descend) or d == h:
                break
            dk, dn, dold, dinc, drow = keys[descend], node[descend], old[descend], inc[descend], upd_row[descend]
            m = dk.size
            child_keys = (dk[:, None] << 3 | np.arange(8)[None, :]).reshape(-1)
            dn_ok = dn >= 0
            child_nodes = np.full((m, 8), -1, dtype=np.int64)
            child_old = np.repeat(dold[:, None], 8, axis=1)
            if np.any(dn_ok):
                child_nodes[dn_ok] = self._children[dn[dn_ok]]
                child_old[dn_ok] += child_offsets(self._details[dn[dn_ok]])
            child_inc = np.repeat(dinc[:, None], 8, axis=1)
            with_det = drow >= 0
            if np.any(with_det):
                child_inc[with_det] = lift_backward_3d(dinc[with_det], update.levels[d][1][drow[with_det]])
            keys, node, old, inc = child_keys, child_nodes.reshape(-1), child_old.reshape(-1), child_inc.reshape(-1)

        # bottom-up: re-lift clamped children, allocate nodes where detail appears
        child_final = None
        child_node = None
        for d in range(len(records) - 1, -1, -1):
            keys, node, final, descend = records[d]
            node = node.copy()
            if np.any(descend):
                cf = child_final.reshape(-1, 8)
                cn = child_node.reshape(-1, 8)
                parent_scale, details = lift_forward_3d(cf)
                det32 = details.astype(np.float32)
                rows = np.nonzero(descend)[0]
                ids = node[rows]
                need = (ids < 0) & (np.any(det32 != 0, axis=1) | np.any(cn >= 0, axis=1))
                if np.any(need):
                    ids[need] = self._allocate(np.full(int(need.sum()), d), keys[rows[need]])
                live = ids >= 0
                lid = ids[live]
                self._details[lid] = det32[live]
                self._children[lid] = cn[live]
                offs = child_offsets(det32[live])
                cn_live = cn[live]
                crel_lo = np.where(cn_live >= 0, self._relmin[np.maximum(cn_live, 0)], 0.0)
                crel_hi = np.where(cn_live >= 0, self._relmax[np.maximum(cn_live, 0)], 0.0)
                self._relmin[lid] = (offs + crel_lo).min(axis=1)
                self._relmax[lid] = (offs + crel_hi).max(axis=1)
                node[rows] = ids
                final = final.copy()
                final[rows] = parent_scale
            child_final, child_node = final, node
        self.root_scale = np.float32(child_final[0])
        self._root = int(child_node[0])

    def apply_cells(self, depths, index, values):
        """Add constant values over non-overlapping cells, then clamp."""
        self.apply_update_block(UpdateTree.from_cells(self.config.tree_height, depths, index, values))

    def set_leaf(self, partition: NodePartition, value):
        """Overwrite one finest-resolution cell (clamped)."""
        if partition.depth != self.config.tree_height:
            raise ValueError("set_leaf expects a finest-resolution partition")
        current = self.query_coarse(partition)
        self.apply_cells([partition.depth], [partition.index], [float(value) - current])

    # ---------------------------------------------------------------- pruning
    def _recompute_caches(self):
        if self._size == 0:
            return
        order = np.argsort(-self._depth[: self._size], kind="stable")
        for d in np.unique(self._depth[: self._size])[::-1]:
            ids = order[self._depth[order] == d]
            cn = self._children[ids]
            offs = child_offsets(self._details[ids])
            crel_lo = np.where(cn >= 0, self._relmin[np.maximum(cn, 0)], 0.0)
            crel_hi = np.where(cn >= 0, self._relmax[np.maximum(cn, 0)], 0.0)
            self._relmin[ids] = (offs + crel_lo).min(axis=1)
            self._relmax[ids] = (offs + crel_hi).max(axis=1)

    def prune(self, lossy=False):
        """Drop childless nodes whose details are all zero; returns the count removed.

        With ``lossy=True`` each node first zeroes its smallest details for as
        long as their summed magnitude stays below ``config.prune_threshold``,
        so no level moves a finest value by more than the threshold.  Lossy
        pruning may leave values up to ``threshold * tree_height`` outside the
        clamp bounds.
        """
        if self._size == 0:
            return 0
        n = self._size
        if lossy and self.config.prune_threshold > 0:
            mag = np.abs(self._details[:n]).astype(np.float64)
            order = np.argsort(mag, axis=1)
            running = np.cumsum(np.take_along_axis(mag, order, axis=1), axis=1)
            small = np.zeros_like(mag, dtype=bool)
            np.put_along_axis(small, order, running < self.config.prune_threshold, axis=1)
            self._details[:n][small] = 0.0
        keep = np.ones(n, dtype=bool)
        depth = self._depth[:n]
        for d in range(int(depth.max()), -1, -1):
            ids = np.nonzero(depth == d)[0]
            kids = self._children[ids]
            # drop pointers to removed children
            dead = (kids >= 0) & ~keep[np.maximum(kids, 0)]
            kids[dead] = -1
            self._children[ids] = kids
            removable = np.all(self._details[ids] == 0, axis=1) & np.all(kids < 0, axis=1)
            keep[ids[removable]] = False
        removed = int((~keep).sum())
        if self._root >= 0 and not keep[self._root]:
            self._root = -1
        self._compact(keep)
        if lossy:
            self._recompute_caches()
        return removed

    def _preorder(self, ids):
        """Sort node ids into depth-first pre-order (octant order among siblings)."""
        h = self.config.tree_height
        depth = self._depth[ids].astype(np.int64)
        span = self._key[ids] << (3 * (h - depth))
        return ids[np.lexsort((depth, span))]

    def _compact(self, keep):
        ids = self._preorder(np.nonzero(keep)[0])
        remap = np.full(self._size, -1, dtype=np.int64)
        remap[ids] = np.arange(ids.size)
        cap = max(64, ids.size)
        details, children = self._details[ids], self._children[ids]
        relmin, relmax, depth, key = self._relmin[ids], self._relmax[ids], self._depth[ids], self._key[ids]
        self._alloc_arrays(cap)
        m = ids.size
        self._details[:m] = details
        self._children[:m] = np.where(children >= 0, remap[np.maximum(children, 0)], -1)
        self._relmin[:m], self._relmax[:m] = relmin, relmax
        self._depth[:m], self._key[:m] = depth, key
        self._root = int(remap[self._root]) if self._root >= 0 else -1
        self._size = m

    # ------------------------------------------------------------ inspection
    def stats(self):
        h = self.config.tree_height
        hist = np.bincount(self._depth[: self._size].astype(np.int64), minlength=h)[:h]
        coefficients = 1 + 7 * int(self._size)
        return {
            "allocated_nodes": int(self._size),
            "coefficient_count": coefficients,
            "coefficient_bytes": 4 * coefficients,
            "dense_voxel_count": int(8**h),
            "dense_bytes": 4 * int(8**h),
            "compression_ratio": 4 * int(8**h) / (4 * coefficients),
            "depth_histogram": [int(x) for x in hist],
        }

    def iter_nodes(self):
        """Yield ``(depth, index, details, child_mask)`` in depth-first pre-order."""
        for nid in self._preorder(np.arange(self._size)):
            d = int(self._depth[nid])
            mask = int(np.sum(_MASK_BITS[self._children[nid] >= 0]))
            yield d, tuple(morton_decode(self._key[nid], d)), self._details[nid].copy(), mask

    def check_consistency(self):
        """Max |scale(cell) - mean(scale(children))| over allocated nodes."""
        worst = 0.0
        h = self.config.tree_height
        for d in range(h):
            ids = np.nonzero(self._depth[: self._size] == d)[0]
            if ids.size == 0:
                continue
            idx = morton_decode(self._key[ids], d)
            parent = self.query_cells(d, idx)
            kids = (idx[:, None, :] * 2 + OCTANT_OFFSETS[None]).reshape(-1, 3)
            child_vals = self.query_cells(d + 1, kids).reshape(-1, 8)
            worst = max(worst, float(np.abs(child_vals.mean(axis=1) - parent).max()))
        return worst

    # --------------------------------------------------------- serialization
    def to_bytes(self):
        c = self.config
        buf = io.BytesIO()
        buf.write(
            _HEADER.pack(
                MAGIC,
                FORMAT_VERSION,
                c.min_cell_width,
                *c.origin,
                c.tree_height,
                np.float32(c.clamp_lo),
                np.float32(c.clamp_hi),
                np.float32(self.root_scale),
            )
        )
        if self._root >= 0:
            order = self._preorder(np.arange(self._size))
            records = np.empty(order.size, dtype=_NODE_DTYPE)
            records["mask"] = ((self._children[order] >= 0) * _MASK_BITS[None, :]).sum(axis=1).astype(np.uint8)
            records["details"] = self._details[order]
            buf.write(records.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data, prune_threshold=0.0):
        data = bytes(data)
        if len(data) < _HEADER.size:
            raise DecodeError(f"truncated header: need {_HEADER.size} bytes, got {len(data)}", len(data))
        magic, version, width, ox, oy, oz, height, clo, chi, root_scale = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise DecodeError(f"bad magic {magic!r}", 0)
        if version != FORMAT_VERSION:
            raise DecodeError(f"unsupported format version {version}", 4)
        try:
            config = MapConfig(width, height, (ox, oy, oz), clo, chi, prune_threshold)
        except ValueError as exc:
            raise DecodeError(f"invalid map config: {exc}", 6) from exc
        if not np.isfinite(root_scale):
            raise DecodeError("non-finite root scale", _HEADER.size - 4)
        tree = cls(config)
        tree.root_scale = np.float32(root_scale)
        body = data[_HEADER.size:]
        if not body:
            return tree
        rec = _NODE_DTYPE.itemsize
        count = len(body) // rec
        records = np.frombuffer(body[: count * rec], dtype=_NODE_DTYPE)
        masks = records["mask"]
        n_children = np.unpackbits(masks[:, None], axis=1).sum(axis=1)
        parent_of = np.full(count, -1, dtype=np.int64)
        octant_of = np.zeros(count, dtype=np.int64)
        depth_of = np.zeros(count, dtype=np.int64)
        # stack of [node, remaining child octants]
        stack = []
        i = 0
        mask_list = masks.tolist()
        while True:
            if i >= count:
                raise DecodeError("truncated node stream", _HEADER.size + i * rec)
            if stack:
                pid, pending = stack[-1]
                parent_of[i] = pid
                octant_of[i] = pending.pop(0)
                depth_of[i] = depth_of[pid] + 1
                if not pending:
                    stack.pop()
            if depth_of[i] >= height:
                raise DecodeError("node below the finest level", _HEADER.size + i * rec)
            m = mask_list[i]
            if m:
                if depth_of[i] == height - 1:
                    raise DecodeError("finest-level node with children", _HEADER.size + i * rec)
                stack.append((i, [o for o in range(8) if m >> o & 1]))
            i += 1
            if not stack:
                break
        if i * rec != len(body):
            raise DecodeError("trailing bytes after node stream", _HEADER.size + i * rec)
        details = records["details"].astype(np.float32)
        if not np.all(np.isfinite(details)):
            raise DecodeError("non-finite detail coefficient", _HEADER.size)
        keys = np.zeros(count, dtype=np.int64)
        for j in range(1, count):
            keys[j] = keys[parent_of[j]] << 3 | octant_of[j]
        tree._grow(count)
        tree._size = count
        tree._details[:count] = details
        tree._depth[:count] = depth_of
        tree._key[:count] = keys
        tree._children[:count] = -1
        has_parent = parent_of >= 0
        tree._children[parent_of[has_parent], octant_of[has_parent]] = np.nonzero(has_parent)[0]
        tree._root = 0
        assert np.all(n_children == (tree._children[:count] >= 0).sum(axis=1))
        tree._recompute_caches()
        return tree

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def coefficients_equal(self, other) -> bool:
        """Bit-exact comparison of configuration and stored coefficients."""
        return self.to_bytes() == other.to_bytes()
