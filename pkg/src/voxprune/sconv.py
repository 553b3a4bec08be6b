"""Sparse convolution engine.

Three variants cover the whole network:

* ``conv_s1``: stride-1 submanifold convolution (kernel 3, or kernel 1 for
  pointwise layers); output coordinates equal input coordinates.
* ``conv_down``: stride-2 kernel-1 downsampling; each output voxel sums its
  (up to 8) children.
* ``generative_deconv``: stride-2 kernel-3 transposed convolution that emits
  every child in the kernel footprint of every input voxel.

All variants share one gather kernel.  For every output row it walks a fixed
list of taps and accumulates ``feat[nbr] @ W[tap]`` element by element, so the
value of a row depends only on that row's neighbours and never on how many
rows are processed together.  BLAS is deliberately avoided: its results depend
on the position of a row inside the matrix, which would break bitwise
reproducibility between pruned and unpruned runs.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .voxgrid import SparseTensor, pack, unpack

BLOCK_ROWS = 1024

# (dz, dy, dx) lexicographic over {-1, 0, 1}; stored as (dx, dy, dz) vectors
OFFSETS_3 = np.array([(dx, dy, dz)
                      for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)],
                     dtype=np.int64)
OFFSETS_1 = np.zeros((1, 3), dtype=np.int64)
# children of a coarse voxel u are 2u + d, d in {0, 1}^3, same (dz, dy, dx) order
CHILD_OFFSETS = np.array([(dx, dy, dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)],
                         dtype=np.int64)


def kernel_offsets(kernel_size: int) -> np.ndarray:
    if kernel_size == 3:
        return OFFSETS_3
    if kernel_size == 1:
        return OFFSETS_1
    raise ValueError(f"unsupported kernel size {kernel_size}")


@dataclass(frozen=True)
class ConvParams:
    weights: np.ndarray  # (kernel_size**3, in_channels, out_channels)
    bias: np.ndarray | None = None
    kernel_size: int = 3
    stride: int = 1
    transposed: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[0] != self.kernel_size ** 3:
            raise ValueError(f"weights must have shape ({self.kernel_size ** 3}, Cin, Cout), "
                             f"got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite convolution weight")
        object.__setattr__(self, "weights", np.ascontiguousarray(w))
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if b.shape[0] != w.shape[2]:
                raise ValueError("bias length must equal out_channels")
            object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class AffineParams:
    scale: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if s.shape != b.shape:
            raise ValueError("scale and bias must have equal length")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite affine parameter")
        if np.any(s == 0):
            raise ValueError("affine scale entries must be nonzero")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "bias", b)


@numba.njit(nogil=True, cache=True)
def _gather_accumulate(feat, nbr, widx, weights, out, start, stop):
    cin = weights.shape[1]
    cout = weights.shape[2]
    for r in range(start, stop):
        for t in range(nbr.shape[0]):
            j = nbr[t, r]
            if j < 0:
                continue
            w = widx[t]
            for c in range(cin):
                x = feat[j, c]
                for o in range(cout):
                    out[r, o] += x * weights[w, c, o]


def worker_count() -> int:
    """Worker threads for convolution, from ``DSP_THREADS`` (default: all CPUs)."""
    env = os.environ.get("DSP_THREADS", "").strip()
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("DSP_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def gather_matmul(feat: np.ndarray, nbr: np.ndarray, widx: np.ndarray,
                  weights: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """``out[r] = sum_t feat[nbr[t, r]] @ weights[widx[t]] (+ bias)``; missing taps are -1.

    Rows are split into fixed ``BLOCK_ROWS`` blocks and farmed out to a thread
    pool; the split never depends on the worker count.
    """
    n = nbr.shape[1]
    out = np.zeros((n, weights.shape[2]), dtype=np.float64)
    feat = np.ascontiguousarray(feat, dtype=np.float64)
    nbr = np.ascontiguousarray(nbr, dtype=np.int64)
    widx = np.ascontiguousarray(widx, dtype=np.int64)
    if n:
        bounds = [(s, min(s + BLOCK_ROWS, n)) for s in range(0, n, BLOCK_ROWS)]
        workers = min(worker_count(), len(bounds))
        if workers == 1:
            for s, e in bounds:
                _gather_accumulate(feat, nbr, widx, weights, out, s, e)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(lambda se: _gather_accumulate(feat, nbr, widx, weights, out, *se),
                              bounds))
    if bias is not None:
        out += bias
    return out


def _check_channels(x: SparseTensor, p: ConvParams) -> None:
    if x.channels != p.in_channels:
        raise ValueError(f"channel mismatch: tensor has {x.channels}, "
                         f"layer expects {p.in_channels}")


def conv_s1(x: SparseTensor, p: ConvParams) -> SparseTensor:
    """Submanifold stride-1 convolution (kernel 3 or 1)."""
    if p.stride != 1 or p.transposed:
        raise ValueError("conv_s1 needs a stride-1, non-transposed layer")
    _check_channels(x, p)
    offs = kernel_offsets(p.kernel_size)
    n = len(x)
    nbr = np.empty((offs.shape[0], n), dtype=np.int64)
    for t, o in enumerate(offs):
        nbr[t] = x.find(x.coords + o) if n else 0
    feats = gather_matmul(x.features, nbr, np.arange(offs.shape[0]), p.weights, p.bias)
    return SparseTensor(x.level, x.voxel_size, x.coords, _ro(feats), x.keys)


def conv_down(x: SparseTensor, p: ConvParams) -> SparseTensor:
    """Stride-2 kernel-1 downsampling; children are summed in canonical order."""
    if p.kernel_size != 1 or p.stride != 2 or p.transposed:
        raise ValueError("conv_down needs a kernel-1 stride-2 layer")
    _check_channels(x, p)
    keys = np.unique(pack(np.floor_divide(x.coords, 2)))
    coords = unpack(keys)
    nbr = np.empty((CHILD_OFFSETS.shape[0], keys.size), dtype=np.int64)
    for t, d in enumerate(CHILD_OFFSETS):
        nbr[t] = x.find(2 * coords + d)
    feats = gather_matmul(x.features, nbr, np.zeros(CHILD_OFFSETS.shape[0], np.int64),
                          p.weights, p.bias)
    return SparseTensor.from_coords(coords, feats, x.level + 1, x.voxel_size * 2,
                                    assume_sorted=True)


def upsample_coords(coords: np.ndarray) -> np.ndarray:
    """Union of the 27 children ``2c + o`` of every coordinate, canonical order."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if c.shape[0] == 0:
        return np.zeros((0, 3), np.int64)
    children = (2 * c)[:, None, :] + OFFSETS_3[None, :, :]
    return unpack(np.unique(pack(children.reshape(-1, 3))))


def generative_deconv(x: SparseTensor, p: ConvParams) -> SparseTensor:
    """Stride-2 kernel-3 transposed convolution that generates child voxels.

    Output voxel ``v`` receives ``W[o]^T feat(c)`` from every input ``c`` with
    ``2c + o == v``; contributions are summed in canonical order of ``c``.
    """
    if p.kernel_size != 3 or p.stride != 2 or not p.transposed:
        raise ValueError("generative_deconv needs a kernel-3 stride-2 transposed layer")
    if x.level < 1:
        raise ValueError("cannot upsample below level 0")
    _check_channels(x, p)
    coords = upsample_coords(x.coords)
    # reverse offset order visits contributing inputs in ascending canonical order
    taps = np.arange(OFFSETS_3.shape[0] - 1, -1, -1)
    nbr = np.full((taps.size, coords.shape[0]), -1, dtype=np.int64)
    for t, w in enumerate(taps):
        src = coords - OFFSETS_3[w]
        even = np.all(src % 2 == 0, axis=1)
        nbr[t, even] = x.find(src[even] // 2)
    feats = gather_matmul(x.features, nbr, taps, p.weights, p.bias)
    return SparseTensor.from_coords(coords, feats, x.level - 1, x.voxel_size / 2,
                                    assume_sorted=True)


def affine_relu(x: SparseTensor, a: AffineParams, relu: bool = True) -> SparseTensor:
    """Per-channel ``scale * x + bias``, optionally followed by ReLU."""
    if a.scale.shape[0] != x.channels:
        raise ValueError(f"channel mismatch: tensor has {x.channels}, "
                         f"affine has {a.scale.shape[0]}")
    y = x.features * a.scale + a.bias
    if relu:
        y = np.maximum(y, 0.0)
    return x.with_features(y)


def _ro(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def conv_from(params: dict, prefix: str, kernel_size: int, stride: int = 1,
              transposed: bool = False) -> ConvParams:
    """Layer from a flat parameter dict (``<prefix>.weight`` / ``<prefix>.bias``)."""
    return ConvParams(params[f"{prefix}.weight"], params.get(f"{prefix}.bias"),
                      kernel_size=kernel_size, stride=stride, transposed=transposed)


def affine_from(params: dict, prefix: str) -> AffineParams:
    return AffineParams(params[f"{prefix}.scale"], params[f"{prefix}.bias"])
