"""Loss evaluation (forward only): focal, DIoU and the combined multi-level loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import KeepScores, RawPrediction
from .targets import Box3D, BoxTargets, KeepMaskGT
from .postproc import LOG_SIZE_RANGE
from .util import sigmoid

EPS = 1e-7
ALPHA = 0.25
GAMMA = 2.0


def focal_terms(p, y, alpha: float = ALPHA, gamma: float = GAMMA) -> np.ndarray:
    """Elementwise ``-a_t (1 - p_t)^gamma log(p_t)`` with ``p`` clamped to ``[eps, 1-eps]``."""
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(y).astype(bool)
    p_t = np.where(y, p, 1.0 - p)
    a_t = np.where(y, alpha, 1.0 - alpha)
    return -a_t * (1.0 - p_t) ** gamma * np.log(p_t)


def focal_loss(p, y, alpha: float = ALPHA, gamma: float = GAMMA) -> float:
    """Mean focal loss; 0 for empty input."""
    t = focal_terms(p, y, alpha, gamma)
    return float(t.mean()) if t.size else 0.0


def _corners(centers, sizes):
    half = sizes / 2.0
    return centers - half, centers + half


def diou_terms(pc, ps, gc, gs) -> np.ndarray:
    """Vectorized DIoU loss for ``(n, 3)`` center/size arrays."""
    pc, ps, gc, gs = (np.asarray(a, dtype=np.float64).reshape(-1, 3) for a in (pc, ps, gc, gs))
    if np.any(ps <= 0) or np.any(gs <= 0):
        raise ValueError("DIoU needs boxes with positive sizes")
    plo, phi = _corners(pc, ps)
    glo, ghi = _corners(gc, gs)
    inter = np.prod(np.clip(np.minimum(phi, ghi) - np.maximum(plo, glo), 0.0, None), axis=1)
    union = np.prod(ps, axis=1) + np.prod(gs, axis=1) - inter
    iou = inter / union
    diag = np.sum((np.maximum(phi, ghi) - np.minimum(plo, glo)) ** 2, axis=1)
    dist = np.sum((pc - gc) ** 2, axis=1)
    return 1.0 - iou + dist / diag


def diou_loss(pred: Box3D, gt: Box3D) -> float:
    return float(diou_terms(pred.center, pred.size, gt.center, gt.size)[0])


@dataclass(frozen=True)
class LossBreakdown:
    box: dict[int, float]
    keep: dict[int, float]
    lam: float
    total: float

    def to_json(self) -> dict:
        return {"box": {str(k): v for k, v in sorted(self.box.items())},
                "keep": {str(k): v for k, v in sorted(self.keep.items())},
                "lambda": self.lam, "total": self.total}


def box_loss(pred: RawPrediction, target: BoxTargets) -> float:
    """Mean per-voxel classification focal loss (summed over classes) plus mean
    DIoU over positive voxels.  Predicted log-sizes are clamped as in decoding."""
    n, num_classes = pred.class_logits.shape
    if target.labels.shape[0] != n:
        raise ValueError(f"level {pred.level}: {n} predictions vs "
                         f"{target.labels.shape[0]} targets")
    if n == 0:
        return 0.0
    if np.any(target.labels >= num_classes):
        raise ValueError("class id exceeds the number of classes")
    onehot = np.zeros((n, num_classes), dtype=bool)
    pos = target.positives
    onehot[pos, target.labels[pos]] = True
    cls = float(focal_terms(sigmoid(pred.class_logits), onehot).sum(axis=1).mean())
    if pos.size == 0:
        return cls
    reg, tgt = pred.regression[pos], target.regression[pos]
    s = pred.voxel_size
    centers = (pred.coords[pos] + 0.5) * s
    terms = diou_terms(centers + reg[:, :3] * s, np.exp(np.clip(reg[:, 3:], *LOG_SIZE_RANGE)),
                       centers + tgt[:, :3] * s, np.exp(tgt[:, 3:]))
    return cls + float(terms.mean())


def keep_loss(scores: KeepScores, mask: KeepMaskGT) -> float:
    if not np.array_equal(np.asarray(scores.coords), np.asarray(mask.coords)):
        raise ValueError(f"level {scores.level}: keep scores and mask are misaligned")
    return focal_loss(scores.scores, mask.mask)


def total_loss(preds: dict[int, RawPrediction], box_targets: dict[int, BoxTargets],
               keep_scores: dict[int, KeepScores], keep_masks: dict[int, KeepMaskGT],
               lam: float = 0.01) -> LossBreakdown:
    """``sum_i L_box(i) + lam * sum_i L_keep(i)`` over levels 1..4 and 2..4."""
    box = {i: box_loss(preds[i], box_targets[i]) for i in sorted(preds)}
    keep = {i: keep_loss(keep_scores[i], keep_masks[i]) for i in sorted(keep_scores)}
    total = sum(box[i] for i in sorted(box)) + lam * sum(keep[i] for i in sorted(keep))
    return LossBreakdown(box, keep, lam, float(total))
