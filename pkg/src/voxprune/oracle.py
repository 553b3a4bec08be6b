"""Brute-force reference implementations.

Nothing here reuses the sparse machinery it is meant to check: convolutions run
on dense zero-padded grids, receptive fields are traced with dense boolean
masks, and targets are computed with plain Python loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_DIM = 32
_OFF3 = [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


class OracleGuardError(ValueError):
    """Dense grid exceeds the desk-scale guard."""


@dataclass(frozen=True)
class DenseGrid:
    origin: tuple[int, int, int]
    values: np.ndarray  # (C, X, Y, Z)

    def __post_init__(self):
        if any(d > MAX_DIM for d in self.values.shape[1:]):
            raise OracleGuardError(f"dense grid {self.values.shape[1:]} exceeds {MAX_DIM}^3")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[1:])

    def at(self, coords) -> np.ndarray:
        """Rows of values at integer coordinates, ``(n, C)``."""
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 3) - np.asarray(self.origin)
        return self.values[:, c[:, 0], c[:, 1], c[:, 2]].T


def to_dense(coords, features, origin=None, dims=None) -> DenseGrid:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64)
    if origin is None:
        origin = coords.min(axis=0)
    if dims is None:
        dims = coords.max(axis=0) - np.asarray(origin) + 1
    vals = np.zeros((features.shape[1], *[int(d) for d in dims]))
    for c, f in zip(coords - np.asarray(origin), features):
        vals[:, c[0], c[1], c[2]] = f
    return DenseGrid(tuple(int(v) for v in origin), vals)


def dense_conv_oracle(grid: DenseGrid, weights, bias=None, kernel: int = 3, stride: int = 1,
                      transposed: bool = False) -> DenseGrid:
    """Textbook dense 3D convolution with zero padding.

    * ``stride 1``: ``out[v] = sum_o W[o]^T x[v + o]``, same grid.
    * ``stride 2, kernel 1``: ``out[u] = sum_{d in {0,1}^3} W^T x[2u + d]``.
    * ``stride 2, kernel 3, transposed``: ``out[2c + o] += W[o]^T x[c]``.
    """
    w = np.asarray(weights, dtype=np.float64)
    x = grid.values
    cout = w.shape[2]
    ox, oy, oz = grid.origin
    if stride == 1 and not transposed:
        offs = _OFF3 if kernel == 3 else [(0, 0, 0)]
        X, Y, Z = grid.dims
        pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
        out = np.zeros((cout, X, Y, Z))
        for k, (dx, dy, dz) in enumerate(offs):
            shifted = pad[:, 1 + dx:1 + dx + X, 1 + dy:1 + dy + Y, 1 + dz:1 + dz + Z]
            out += np.einsum("cxyz,cd->dxyz", shifted, w[k])
        origin = grid.origin
    elif stride == 2 and kernel == 1 and not transposed:
        lo = np.floor_divide(np.asarray(grid.origin), 2)
        hi = np.floor_divide(np.asarray(grid.origin) + np.asarray(grid.dims) - 1, 2)
        dims = hi - lo + 1
        out = np.zeros((cout, *dims))
        for u in np.ndindex(*dims):
            base = 2 * (lo + np.asarray(u)) - np.asarray(grid.origin)
            acc = np.zeros(x.shape[0])
            for d in np.ndindex(2, 2, 2):
                p = base + np.asarray(d)
                if np.all(p >= 0) and np.all(p < np.asarray(grid.dims)):
                    acc += x[:, p[0], p[1], p[2]]
            out[(slice(None), *u)] = acc @ w[0]
        origin = tuple(int(v) for v in lo)
    elif stride == 2 and kernel == 3 and transposed:
        X, Y, Z = grid.dims
        out = np.zeros((cout, 2 * X + 1, 2 * Y + 1, 2 * Z + 1))
        for k, (dx, dy, dz) in enumerate(_OFF3):
            contrib = np.einsum("cxyz,cd->dxyz", x, w[k])
            out[:, 1 + dx:1 + dx + 2 * X:2, 1 + dy:1 + dy + 2 * Y:2,
                1 + dz:1 + dz + 2 * Z:2] += contrib
        origin = (2 * ox - 1, 2 * oy - 1, 2 * oz - 1)
    else:
        raise ValueError(f"unsupported oracle variant kernel={kernel} stride={stride} "
                         f"transposed={transposed}")
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(-1, 1, 1, 1)
    if any(d > MAX_DIM for d in out.shape[1:]):
        # transposed output of a full-size grid may exceed the guard; keep it usable
        return _UnguardedGrid(origin, out)
    return DenseGrid(origin, out)


class _UnguardedGrid(DenseGrid):
    def __post_init__(self):
        pass


def relative_error(a, b) -> float:
    """``max|a - b| / max(max|b|, 1e-300)``; 0 for empty inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


# -- receptive field ----------------------------------------------------------

def nearest_proposals(center, voxel_size: float) -> list[tuple[int, int, int]]:
    """The 27 voxels nearest a world point: the 3x3x3 block around its voxel.

    Per axis the three nearest voxel centers to ``x`` are always
    ``floor(x/S) - 1 .. floor(x/S) + 1``.
    """
    base = [math.floor(c / voxel_size) for c in center]
    return [(base[0] + dx, base[1] + dy, base[2] + dz) for dx, dy, dz in _OFF3]


def _dilate(mask: np.ndarray) -> np.ndarray:
    pad = np.pad(mask, 1)
    out = np.zeros_like(mask)
    X, Y, Z = mask.shape
    for dx, dy, dz in _OFF3:
        out |= pad[1 + dx:1 + dx + X, 1 + dy:1 + dy + Y, 1 + dz:1 + dz + Z]
    return out


def receptive_field_oracle(parent_coords, proposals):
    """Trace which pruned level-``i`` voxels can influence given level-``i-1`` proposals.

    Decoder tail (dense reasoning over the actual sparse coordinates)::

        U = deconv3x3_s2(parents)   coords: all children 2c + o
        M = B (+) U                 coords of U
        P = conv3x3(M)              submanifold
        H = conv3x3(P) -> k1        submanifold, pointwise branches

    Returns ``(influence, footprint)``: the set of parent coordinates whose
    features (or presence) can change a proposal's output, and the set of
    level-``i-1`` voxels of ``U`` the proposals read.
    """
    parents = np.asarray(parent_coords, dtype=np.int64).reshape(-1, 3)
    props = np.asarray(proposals, dtype=np.int64).reshape(-1, 3)
    if parents.shape[0] == 0 or props.shape[0] == 0:
        return set(), set()
    lo = np.minimum(2 * parents.min(axis=0) - 1, props.min(axis=0)) - 3
    hi = np.maximum(2 * parents.max(axis=0) + 1, props.max(axis=0)) + 3
    shape = tuple(int(v) for v in hi - lo + 1)
    par = np.zeros(shape, dtype=bool)
    for c in parents:
        par[tuple(2 * c - lo)] = True  # parent c lives at fine index 2c
    up = _dilate(par)  # children 2c + o
    sel = np.zeros(shape, dtype=bool)
    for p in props:
        q = p - lo
        if np.all(q >= 0) and np.all(q < np.asarray(shape)):
            sel[tuple(q)] = True
    sel &= up
    head_in = _dilate(sel) & up  # neighbours read by the head conv
    prop_in = _dilate(head_in) & up  # neighbours read by the proposal conv
    touched = _dilate(prop_in) & par  # parents whose children land on prop_in
    influence = {tuple(int(v) for v in (np.asarray(i) + lo) // 2)
                 for i in zip(*np.nonzero(touched))}
    footprint = {tuple(int(v) for v in np.asarray(i) + lo) for i in zip(*np.nonzero(prop_in))}
    return influence, footprint


def rf_cube_contains(influence, footprint, center_voxel, half: int = 4) -> bool:
    """Whether the traced field fits the ``(2*half+1)^3`` cube around ``center_voxel``
    (in level-``i-1`` units): every footprint voxel and the fine position ``2c``
    of every influencing parent ``c`` lie inside it."""
    v = np.asarray(center_voxel)
    pts = [np.asarray(f) for f in footprint] + [2 * np.asarray(c) for c in influence]
    return all(np.all(np.abs(p - v) <= half) for p in pts)


# -- targets ------------------------------------------------------------------

def brute_force_targets(coords_by_level, boxes, n_vol: float = 27.0, r: float = 13.0,
                        base_voxel: float = 0.01, k: int = 6) -> dict:
    """Naive level assignment, keep masks and positive ownership.

    ``boxes`` is a list of ``(center, size, class_id)`` tuples or objects with
    ``center``/``size``/``class_id`` attributes.
    """
    def size_of(level):
        return base_voxel * 2.0 ** (level + 1)

    def unpack_box(b):
        if isinstance(b, tuple):
            return b[0], b[1], b[2]
        return b.center, b.size, b.class_id

    thresholds = [0.0] + [n_vol * size_of(i) ** 3 for i in (2, 3, 4)] + [math.inf]
    levels = []
    for b in boxes:
        _, size, _ = unpack_box(b)
        vol = size[0] * size[1] * size[2]
        for i in range(1, 5):
            if thresholds[i - 1] <= vol < thresholds[i]:
                levels.append(i)
                break

    masks = {}
    for i in (2, 3, 4):
        if i not in coords_by_level:
            continue
        s_i = size_of(i)
        flags = []
        for c in coords_by_level[i]:
            ctr = [(int(c[a]) + 0.5) * s_i for a in range(3)]
            on = 0
            for b, j in zip(boxes, levels):
                if j >= i:
                    continue
                bc, _, _ = unpack_box(b)
                m = max(abs(ctr[0] - bc[0]), abs(ctr[1] - bc[1]), abs(ctr[2] - bc[2]))
                if 2.0 * m < r * size_of(j):
                    on = 1
                    break
            flags.append(on)
        masks[i] = flags

    owners = {}
    for i, coords in coords_by_level.items():
        s_i = size_of(i)
        centers = [[(int(c[a]) + 0.5) * s_i for a in range(3)] for c in coords]
        owner = [-1] * len(centers)
        best = [math.inf] * len(centers)
        for bi, (b, j) in enumerate(zip(boxes, levels)):
            if j != i:
                continue
            bc, _, _ = unpack_box(b)
            dist = []
            for row, ctr in enumerate(centers):
                dx, dy, dz = ctr[0] - bc[0], ctr[1] - bc[1], ctr[2] - bc[2]
                dist.append((dx * dx + dy * dy + dz * dz, row))
            dist.sort()
            for d, row in dist[:k]:
                if d < best[row]:
                    best[row] = d
                    owner[row] = bi
        owners[i] = owner
    return {"levels": levels, "keep_masks": masks, "owners": owners}
