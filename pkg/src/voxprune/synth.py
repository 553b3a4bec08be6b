"""Seeded synthetic rooms: a floor plane plus box-shaped point clusters."""

from __future__ import annotations

import numpy as np

from .targets import Box3D, LevelThresholds

FLOOR_TOP = 0.02
# fraction of each level's volume band the sampler draws from
_BAND = {1: (0.15, 0.8), 2: (1.1, 0.9), 3: (1.1, 0.9), 4: (1.1, 1.6)}


def _volume_range(level: int, th: LevelThresholds) -> tuple[float, float]:
    if level == 1:
        return _BAND[1][0] * th[2], _BAND[1][1] * th[2]
    if level == 4:
        return _BAND[4][0] * th[4], _BAND[4][1] * th[4]
    return _BAND[level][0] * th[level], _BAND[level][1] * th[level + 1]


def _surface(center, size, spacing: float) -> np.ndarray:
    """Points on the faces of an axis-aligned box, on a regular grid."""
    lo = np.asarray(center) - np.asarray(size) / 2
    hi = lo + np.asarray(size)
    axes = [np.linspace(lo[a], hi[a], max(2, int(np.ceil(size[a] / spacing)) + 1))
            for a in range(3)]
    pts = []
    for a in range(3):
        u, v = [axes[b] for b in range(3) if b != a]
        uu, vv = np.meshgrid(u, v, indexing="ij")
        for side in (lo[a], hi[a]):
            face = np.empty((uu.size, 3))
            face[:, a] = side
            face[:, [b for b in range(3) if b != a]] = np.stack([uu.ravel(), vv.ravel()], 1)
            pts.append(face)
    return np.concatenate(pts)


def make_scene(n_objects: int, extent: float = 4.0, seed: int = 0, spacing: float = 0.02,
               levels=None, n_vol: float = 27.0, base_voxel: float = 0.01):
    """Return ``(points, boxes)`` for a square room of side ``extent`` meters.

    Object ``k`` targets level ``levels[k]`` (default: 1, 2, 3, 4 round-robin)
    and gets class id ``level - 1``; its volume is drawn inside that level's
    assignment band and its aspect ratio at random.  Boxes rest on the floor
    and are placed without footprint overlap when possible.
    """
    rng = np.random.default_rng(seed)
    th = LevelThresholds.from_config(n_vol, base_voxel)
    if levels is None:
        levels = [1 + k % 4 for k in range(n_objects)]
    grid = np.arange(0.0, extent, spacing) + spacing / 2
    gx, gy = np.meshgrid(grid, grid, indexing="ij")
    floor = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, FLOOR_TOP / 2)], 1)
    boxes, clouds = [], [floor]
    for k in range(n_objects):
        lvl = levels[k % len(levels)]
        v_lo, v_hi = _volume_range(lvl, th)
        vol = rng.uniform(v_lo, v_hi)
        aspect = rng.uniform(0.6, 1.6, size=3)
        size = aspect * (vol / np.prod(aspect)) ** (1.0 / 3.0)
        size = np.minimum(size, extent * 0.9)
        size[2] = vol / (size[0] * size[1])
        center = None
        for _ in range(100):
            xy = rng.uniform(size[:2] / 2, extent - size[:2] / 2)
            cand = np.array([xy[0], xy[1], FLOOR_TOP + size[2] / 2])
            if all(np.any(np.abs(cand[:2] - np.asarray(b.center[:2]))
                          >= (size[:2] + np.asarray(b.size[:2])) / 2) for b in boxes):
                center = cand
                break
        if center is None:
            center = cand
        box = Box3D(center, size, lvl - 1)
        boxes.append(box)
        clouds.append(_surface(box.center, box.size, spacing))
    return np.concatenate(clouds), boxes
