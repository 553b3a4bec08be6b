"""Training targets: volume-based level assignment, keep masks and box targets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sconv import upsample_coords
from .voxgrid import level_voxel_size, pack, unpack

K_POSITIVES = 6


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    class_id: int = 0

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("center and size need three components")
        if not all(math.isfinite(v) for v in c + s):
            raise ValueError("non-finite box parameter")
        if not all(v >= 0 for v in s):
            raise ValueError(f"box sizes must be non-negative, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "class_id", int(self.class_id))

    @property
    def volume(self) -> float:
        w, l, h = self.size
        return w * l * h

    def to_json(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "class": self.class_id}


def load_boxes(path) -> list[Box3D]:
    """Read ``{"boxes": [{"center": [...], "size": [...], "class": int}, ...]}``."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or not isinstance(data.get("boxes"), list):
        raise ValueError(f"{path}: expected an object with a 'boxes' list")
    boxes = []
    for i, b in enumerate(data["boxes"]):
        try:
            boxes.append(Box3D(b["center"], b["size"], b["class"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: box {i} is malformed ({exc})") from None
    return boxes


def save_boxes(path, boxes: list[Box3D]) -> None:
    Path(path).write_text(json.dumps({"boxes": [b.to_json() for b in boxes]}, indent=1))


@dataclass(frozen=True)
class LevelThresholds:
    """Minimum box volume per level; ``v[1] = 0`` and ``v[5] = inf``."""
    v: tuple[float, float, float, float, float]

    @classmethod
    def from_config(cls, n_vol: float = 27.0, base_voxel: float = 0.01) -> "LevelThresholds":
        mids = [n_vol * level_voxel_size(i, base_voxel) ** 3 for i in (2, 3, 4)]
        return cls((0.0, *mids, math.inf))

    def __getitem__(self, level: int) -> float:
        return self.v[level - 1]


def assign_level(box: Box3D, thresholds: LevelThresholds) -> int:
    """The level ``i`` with ``V_i <= volume < V_{i+1}``."""
    vol = box.volume
    for i in (4, 3, 2):
        if vol >= thresholds[i]:
            return i
    return 1


@dataclass(frozen=True)
class KeepMaskGT:
    level: int
    coords: np.ndarray
    mask: np.ndarray  # bool, one per coordinate


def gen_keep_mask(coords: np.ndarray, level: int, boxes: list[Box3D], box_levels: list[int],
                  r: float = 13.0, base_voxel: float = 0.01) -> KeepMaskGT:
    """Mark level-``level`` voxels inside the receptive-field cube of every
    lower-level object.

    A voxel is kept when ``2 * max_axis |center - object center| < r * S_j`` with
    ``S_j`` the voxel size of the object's level ``j < level``; distances are
    measured between voxel centers and box centers in meters.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    mask = np.zeros(coords.shape[0], dtype=bool)
    s_i = level_voxel_size(level, base_voxel)
    centers = (coords + 0.5) * s_i
    for box, j in zip(boxes, box_levels):
        if j >= level:
            continue
        d = np.abs(centers - np.asarray(box.center)).max(axis=1)
        mask |= 2.0 * d < r * level_voxel_size(j, base_voxel)
    return KeepMaskGT(level, coords, mask)


@dataclass(frozen=True)
class BoxTargets:
    """Per-voxel targets of one level; ``labels == -1`` marks background."""
    level: int
    labels: np.ndarray  # (n,) int
    box_index: np.ndarray  # (n,) int, -1 for background
    regression: np.ndarray  # (n, 6), zeros on background

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)


def encode_box(box: Box3D, voxel_center: np.ndarray, voxel_size: float) -> np.ndarray:
    """Regression target: center offset in voxel units, then log sizes (meters)."""
    if min(box.size) <= 0:
        raise ValueError("cannot encode a box with a zero size")
    delta = (np.asarray(box.center) - voxel_center) / voxel_size
    return np.concatenate([delta, np.log(np.asarray(box.size))])


def assign_box_targets(coords_by_level: dict[int, np.ndarray], boxes: list[Box3D],
                       box_levels: list[int], base_voxel: float = 0.01,
                       k: int = K_POSITIVES) -> dict[int, BoxTargets]:
    """Each box claims the ``k`` voxels of its level nearest to its center.

    Ties in distance go to the canonically first voxel.  A voxel claimed by
    several boxes belongs to the one with the nearer center (lower box index on
    a tie); the other box does not get a replacement voxel.
    """
    out = {}
    for level, coords in coords_by_level.items():
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        n = coords.shape[0]
        s = level_voxel_size(level, base_voxel)
        centers = (coords + 0.5) * s
        owner = np.full(n, -1, dtype=np.int64)
        best = np.full(n, np.inf)
        for b, (box, lvl) in enumerate(zip(boxes, box_levels)):
            if lvl != level or n == 0:
                continue
            d = _sqdist(centers, box.center)
            nearest = np.lexsort((np.arange(n), d))[:k]
            better = d[nearest] < best[nearest]
            owner[nearest[better]] = b
            best[nearest[better]] = d[nearest[better]]
        labels = np.full(n, -1, dtype=np.int64)
        reg = np.zeros((n, 6))
        for row in np.flatnonzero(owner >= 0):
            box = boxes[owner[row]]
            labels[row] = box.class_id
            reg[row] = encode_box(box, centers[row], s)
        out[level] = BoxTargets(level, labels, owner, reg)
    return out


def _sqdist(centers: np.ndarray, c) -> np.ndarray:
    dx = centers[:, 0] - c[0]
    dy = centers[:, 1] - c[1]
    dz = centers[:, 2] - c[2]
    return dx * dx + dy * dy + dz * dz


def training_coords(scene_coords: np.ndarray, base_level: int = -1) -> dict[int, np.ndarray]:
    """Coordinates of the merged maps of levels 1..4 in an unpruned pass.

    Backbone levels halve the input coordinates; in training mode the decoder
    never applies learnable pruning, so level ``i - 1`` holds every child of
    level ``i`` (weak pruning at ``n_max`` is ignored here).
    """
    c = np.asarray(scene_coords, dtype=np.int64).reshape(-1, 3)
    for _ in range(4 - base_level):
        c = unpack(np.unique(pack(np.floor_divide(c, 2)))) if len(c) else c
    out = {4: c}
    for i in (3, 2, 1):
        out[i] = upsample_coords(out[i + 1])
    return out
