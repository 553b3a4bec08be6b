"""Sparse voxel tensors: coordinate packing, quantization and set algebra.

Coordinates are stored as an ``(n, 3)`` int64 array with columns ``(x, y, z)``
and are always kept in canonical order, i.e. sorted lexicographically by
``(z, y, x)``.  Each coordinate is packed into a single 64-bit key (21 bits per
axis) whose integer order coincides with the canonical order, so the sorted key
array doubles as the coordinate index (binary search instead of a hash table).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

COORD_BITS = 21
COORD_LIMIT = 1 << (COORD_BITS - 1)  # |c| < 2**20
_MASK = (1 << COORD_BITS) - 1

BASE_LEVEL_SIZE = 0.02  # voxel size of level 0 in meters


def level_voxel_size(level: int, base_voxel: float = 0.01) -> float:
    """Voxel size in meters of pyramid ``level``.

    ``base_voxel`` is the input quantization (level -1); every level doubles it,
    so with the default 1 cm input level ``i`` has size ``2**i * 2cm``.
    """
    return base_voxel * 2.0 ** (level + 1)


def pack(coords: np.ndarray) -> np.ndarray:
    """Pack ``(n, 3)`` integer coordinates into sortable int64 keys."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if c.size and (np.abs(c).max() >= COORD_LIMIT):
        raise ValueError(f"voxel coordinate out of range (|c| must be < {COORD_LIMIT})")
    c = c + COORD_LIMIT
    return (c[:, 2] << (2 * COORD_BITS)) | (c[:, 1] << COORD_BITS) | c[:, 0]


def unpack(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    x = k & _MASK
    y = (k >> COORD_BITS) & _MASK
    z = (k >> (2 * COORD_BITS)) & _MASK
    return np.stack([x, y, z], axis=1) - COORD_LIMIT


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Immutable set of occupied voxels with one feature row per voxel."""

    level: int
    voxel_size: float
    coords: np.ndarray  # (n, 3) int64, canonical order
    features: np.ndarray  # (n, C) float64
    keys: np.ndarray  # (n,) int64, sorted

    @classmethod
    def from_coords(cls, coords, features, level: int, voxel_size: float,
                    assume_sorted: bool = False) -> "SparseTensor":
        """Build a tensor, sorting into canonical order unless told otherwise.

        Duplicate coordinates are rejected.
        """
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ValueError("features must be (n, C) with one row per coordinate")
        keys = pack(coords)
        if not assume_sorted:
            order = np.argsort(keys, kind="stable")
            keys, coords, features = keys[order], coords[order], features[order]
        if keys.size > 1 and not np.all(keys[1:] > keys[:-1]):
            raise ValueError("duplicate or unsorted coordinates")
        return cls(level, float(voxel_size),
                   _frozen(np.ascontiguousarray(coords)),
                   _frozen(np.ascontiguousarray(features)),
                   _frozen(np.ascontiguousarray(keys)))

    @classmethod
    def empty(cls, level: int, voxel_size: float, channels: int = 1) -> "SparseTensor":
        return cls.from_coords(np.zeros((0, 3), np.int64), np.zeros((0, channels)),
                               level, voxel_size, assume_sorted=True)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def find(self, query: np.ndarray) -> np.ndarray:
        """Row index of each query coordinate, or -1 where unoccupied."""
        q = np.asarray(query, dtype=np.int64).reshape(-1, 3)
        out = np.full(q.shape[0], -1, dtype=np.int64)
        if len(self) == 0 or q.shape[0] == 0:
            return out
        inside = np.all(np.abs(q) < COORD_LIMIT, axis=1)
        qk = pack(q[inside])
        pos = np.searchsorted(self.keys, qk)
        pos_c = np.minimum(pos, len(self) - 1)
        hit = self.keys[pos_c] == qk
        out[np.flatnonzero(inside)[hit]] = pos_c[hit]
        return out

    @property
    def index(self) -> dict[tuple[int, int, int], int]:
        """Coordinate -> row mapping (built on demand, for inspection)."""
        return {tuple(int(v) for v in c): i for i, c in enumerate(self.coords)}

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != len(self):
            raise ValueError("feature row count must equal coordinate count")
        return SparseTensor(self.level, self.voxel_size, self.coords,
                            _frozen(np.ascontiguousarray(features)), self.keys)

    def select(self, rows: np.ndarray) -> "SparseTensor":
        """Subset by row mask or sorted row indices; canonical order is kept."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return SparseTensor(self.level, self.voxel_size,
                            _frozen(self.coords[rows]), _frozen(self.features[rows]),
                            _frozen(self.keys[rows]))

    def tobytes(self) -> bytes:
        head = np.array([self.level, len(self), self.channels], dtype="<i8").tobytes()
        return (head + np.float64(self.voxel_size).astype("<f8").tobytes()
                + self.coords.astype("<i8").tobytes()
                + self.features.astype("<f8").tobytes())

    def coord_set(self) -> set[tuple[int, int, int]]:
        return {tuple(int(v) for v in c) for c in self.coords}


def quantize(points, voxel_size: float, level: int = -1) -> SparseTensor:
    """Voxelize world points (meters) with floor quantization.

    Every occupied voxel gets the single feature 1.0.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite point coordinate")
    if pts.shape[0] == 0:
        return SparseTensor.empty(level, voxel_size)
    idx = np.floor(pts / voxel_size).astype(np.int64)
    keys = np.unique(pack(idx))
    coords = unpack(keys)
    return SparseTensor.from_coords(coords, np.ones((keys.size, 1)), level, voxel_size,
                                    assume_sorted=True)


def voxel_center(coord, voxel_size: float) -> np.ndarray:
    """World position of a voxel center: ``(index + 0.5) * voxel_size``."""
    return (np.asarray(coord, dtype=np.float64) + 0.5) * voxel_size


def coord_set_ops(a: SparseTensor, b: SparseTensor):
    """Split ``coords(a) | coords(b)`` into (shared, a-only, b-only), canonical order."""
    if a.level != b.level:
        raise ValueError(f"level mismatch: {a.level} != {b.level}")
    shared = np.intersect1d(a.keys, b.keys, assume_unique=True)
    a_only = np.setdiff1d(a.keys, b.keys, assume_unique=True)
    b_only = np.setdiff1d(b.keys, a.keys, assume_unique=True)
    return unpack(shared), unpack(a_only), unpack(b_only)


def read_points(path) -> np.ndarray:
    """Read an ``x y z`` text file; blank lines and ``#`` comments are skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
        try:
            xyz = [float(p) for p in parts]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in xyz):
            raise ValueError(f"{path}:{lineno}: non-finite coordinate")
        rows.append(xyz)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def write_points(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("# x y z (meters)\n")
        for x, y, z in pts.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")
