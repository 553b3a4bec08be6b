"""Box decoding, axis-aligned IoU, class-wise 3D NMS and level fusion."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoder import RawPrediction
from .targets import Box3D
from .util import sigmoid

# decoded log-sizes are clamped so untrained outputs still give finite, positive boxes
LOG_SIZE_RANGE = (-10.0, 10.0)
# candidates per level entering NMS
PRE_NMS_TOP = 1000


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    class_id: int
    level: int

    def sort_key(self):
        """Canonical order: class, center, size, level."""
        return (self.class_id, *self.box.center, *self.box.size, self.level)

    def to_json(self) -> dict:
        return {"class": self.class_id, "score": self.score, "center": list(self.box.center),
                "size": list(self.box.size), "level": self.level}


def decode(pred: RawPrediction, score_threshold: float = 0.01,
           top_k: int | None = None) -> list[Detection]:
    """Turn raw per-voxel outputs into detections with score >= threshold.

    With ``top_k`` only the best ``top_k`` survive (score descending, ties in
    canonical voxel order); output stays in canonical voxel order.

    Class is the argmax logit (lowest index on ties), score its sigmoid.
    Log-sizes are clamped to ``LOG_SIZE_RANGE`` before exponentiation.
    """
    if len(pred) == 0:
        return []
    cls = np.argmax(pred.class_logits, axis=1)
    score = sigmoid(pred.class_logits[np.arange(len(pred)), cls])
    s = pred.voxel_size
    centers = (pred.coords + 0.5) * s + pred.regression[:, :3] * s
    sizes = np.exp(np.clip(pred.regression[:, 3:], *LOG_SIZE_RANGE))
    keep = np.flatnonzero(score >= score_threshold)
    if top_k is not None and keep.size > top_k:
        best = np.lexsort((keep, -score[keep]))[:top_k]
        keep = np.sort(keep[best])
    return [Detection(Box3D(centers[k], sizes[k], int(cls[k])), float(score[k]), int(cls[k]),
                      pred.level) for k in keep]


def iou_aabb(a: Box3D, b: Box3D) -> float:
    return float(_iou_many(np.asarray(a.center), np.asarray(a.size),
                           np.asarray([b.center]), np.asarray([b.size]))[0])


def _iou_many(c, s, cs, ss) -> np.ndarray:
    lo = np.maximum(c - s / 2, cs - ss / 2)
    hi = np.minimum(c + s / 2, cs + ss / 2)
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=1)
    union = np.prod(s) + np.prod(ss, axis=1) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(dets: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy class-wise NMS.

    Candidates are visited by descending score (ties in canonical box order); a
    detection survives iff its IoU with every kept detection of the same class
    is below the threshold.  Output keeps the visiting order.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, dets[k].sort_key()))
    cls = np.array([d.class_id for d in dets])
    cen = np.array([d.box.center for d in dets])
    siz = np.array([d.box.size for d in dets])
    suppressed = np.zeros(len(dets), dtype=bool)
    rank = np.empty(len(dets), dtype=np.int64)
    rank[order] = np.arange(len(dets))
    kept = []
    for k in order:
        if suppressed[k]:
            continue
        kept.append(dets[k])
        rivals = np.flatnonzero((cls == cls[k]) & ~suppressed & (rank > rank[k]))
        if rivals.size:
            iou = _iou_many(cen[k], siz[k], cen[rivals], siz[rivals])
            suppressed[rivals[iou >= iou_threshold]] = True
    return kept


def fuse_levels(preds, score_threshold: float = 0.01, iou_threshold: float = 0.5,
                top_k: int | None = PRE_NMS_TOP) -> list[Detection]:
    """Decode every level (at most ``top_k`` candidates each), concatenate and
    run one NMS over the union."""
    items = preds.values() if isinstance(preds, dict) else preds
    dets = []
    for pred in sorted(items, key=lambda p: -p.level):
        dets.extend(decode(pred, score_threshold, top_k))
    return nms(dets, iou_threshold)


def detections_to_json(dets: list[Detection]) -> dict:
    return {"detections": [d.to_json() for d in dets]}


def save_detections(path, dets: list[Detection]) -> None:
    Path(path).write_text(json.dumps(detections_to_json(dets), indent=1))
