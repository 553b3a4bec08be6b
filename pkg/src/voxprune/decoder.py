"""Multi-level decoder with dynamic spatial pruning.

Each level ``i`` (from 4 down to 1) runs one block:

1. merge:     ``M_i = partial_add(B_i, U_i)`` (``M_4 = B_4``)
2. proposals: ``P_i = relu(norm(conv3(M_i)))`` and the shared detection head on ``P_i``
3. keep:      ``K_i = sigmoid(MLP_i(M_i))`` (levels 4, 3, 2)
4. prune:     drop voxels of ``P_i`` with ``K_i < tau`` (levels 4, 3, 2)
5. upsample:  ``U_{i-1} = relu(norm(deconv(pruned P_i)))`` (levels 4, 3, 2)

In training mode step 4 is skipped and a weak top-``n_max`` prune is applied to
``M_{i-1}`` instead, ranked by the parent keep scores.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .modelio import KEEP_LEVELS, PipelineConfig
from .sconv import (AffineParams, ConvParams, affine_from, affine_relu, conv_from, conv_s1,
                    generative_deconv)
from .util import sigmoid
from .voxgrid import SparseTensor, pack


_OPEN_LO = np.nextafter(0.0, 1.0)
_OPEN_HI = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class KeepScores:
    level: int
    coords: np.ndarray
    scores: np.ndarray
    keys: np.ndarray

    @classmethod
    def on(cls, t: SparseTensor, scores) -> "KeepScores":
        s = np.asarray(scores, dtype=np.float64).reshape(-1)
        if s.shape[0] != len(t):
            raise ValueError("one keep score per voxel required")
        if not (np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))):
            raise ValueError("keep scores must be finite probabilities")
        return cls(t.level, t.coords, s, t.keys)

    def __len__(self):
        return self.scores.shape[0]

    def lookup(self, coords: np.ndarray, default: float = 0.0) -> np.ndarray:
        out = np.full(len(coords), default, dtype=np.float64)
        if len(self) == 0 or len(coords) == 0:
            return out
        qk = pack(coords)
        pos = np.minimum(np.searchsorted(self.keys, qk), len(self) - 1)
        hit = self.keys[pos] == qk
        out[hit] = self.scores[pos[hit]]
        return out


@dataclass(frozen=True)
class PruneHead:
    fc1: ConvParams
    fc2: ConvParams


@dataclass(frozen=True)
class HeadParams:
    conv: ConvParams
    norm: AffineParams
    cls: ConvParams
    reg: ConvParams


@dataclass(frozen=True)
class RawPrediction:
    level: int
    voxel_size: float
    coords: np.ndarray
    class_logits: np.ndarray  # (n, num_classes)
    regression: np.ndarray  # (n, 6): dx, dy, dz (units of voxel size), log w, log l, log h

    def __len__(self):
        return self.coords.shape[0]


@dataclass(frozen=True)
class DecoderParams:
    proposal: dict[int, tuple[ConvParams, AffineParams]]
    keep: dict[int, PruneHead]
    up: dict[int, tuple[ConvParams, AffineParams]]
    head: HeadParams

    @classmethod
    def from_dict(cls, params: dict) -> "DecoderParams":
        proposal, keep, up = {}, {}, {}
        for i in (4, 3, 2, 1):
            p = f"decoder.level{i}"
            proposal[i] = (conv_from(params, f"{p}.proposal.conv", 3),
                           affine_from(params, f"{p}.proposal.norm"))
            if i > 1:
                keep[i] = PruneHead(conv_from(params, f"{p}.keep.fc1", 1),
                                    conv_from(params, f"{p}.keep.fc2", 1))
                up[i] = (conv_from(params, f"{p}.up.conv", 3, stride=2, transposed=True),
                         affine_from(params, f"{p}.up.norm"))
        head = HeadParams(conv_from(params, "head.conv", 3), affine_from(params, "head.norm"),
                          conv_from(params, "head.cls", 1), conv_from(params, "head.reg", 1))
        return cls(proposal, keep, up, head)


@dataclass
class LevelStats:
    """Per-level voxel counts and timing of one decoder pass.

    ``voxels_before``/``voxels_after`` bracket the pruning step of the level
    (learnable pruning at inference, weak pruning in training mode).
    """
    level: int
    merged: int = 0
    upsampled: int = 0
    voxels_before: int = 0
    voxels_after: int = 0
    time_ms: float = 0.0

    @property
    def prune_ratio(self) -> float:
        if self.voxels_before == 0:
            return 0.0
        return 1.0 - self.voxels_after / self.voxels_before


@dataclass
class DecoderOutput:
    predictions: dict[int, RawPrediction]
    keep_scores: dict[int, KeepScores]
    merged: dict[int, SparseTensor]
    stats: dict[int, LevelStats] = field(default_factory=dict)
    kept: dict[int, np.ndarray] = field(default_factory=dict)  # proposal coords fed to upsampling


def partial_add(backbone: SparseTensor, upsampled: SparseTensor) -> SparseTensor:
    """Add backbone features onto the voxels of ``upsampled``; the result keeps
    exactly the coordinates of ``upsampled``."""
    if backbone.level != upsampled.level:
        raise ValueError(f"level mismatch: {backbone.level} != {upsampled.level}")
    if backbone.channels != upsampled.channels:
        raise ValueError(f"channel mismatch: {backbone.channels} != {upsampled.channels}")
    idx = backbone.find(upsampled.coords)
    shared = idx >= 0
    feats = upsampled.features.copy()
    feats[shared] = backbone.features[idx[shared]] + upsampled.features[shared]
    return upsampled.with_features(feats)


def predict_keep(merged: SparseTensor, head: PruneHead | None) -> KeepScores:
    """Keep probability for every voxel of a merged feature map."""
    if head is None:
        raise ValueError(f"no keep head for level {merged.level}")
    if merged.level not in KEEP_LEVELS:
        raise ValueError(f"keep scores are only predicted at levels {KEEP_LEVELS}")
    h = conv_s1(merged, head.fc1)
    h = h.with_features(np.maximum(h.features, 0.0))
    logits = conv_s1(h, head.fc2).features[:, 0]
    # a sigmoid never reaches 0 or 1; keep that true after float rounding so that
    # tau = 0 keeps and tau = 1 drops every voxel
    return KeepScores.on(merged, np.clip(sigmoid(logits), _OPEN_LO, _OPEN_HI))


def prune(proposals: SparseTensor, scores: KeepScores, tau: float) -> SparseTensor:
    """Remove voxels whose keep score is strictly below ``tau``."""
    if not np.array_equal(proposals.keys, scores.keys):
        raise ValueError("keep scores do not cover the proposal coordinates")
    return proposals.select(scores.scores >= tau)


def weak_prune(merged: SparseTensor, parent_scores: KeepScores, n_max: int) -> SparseTensor:
    """Keep the ``n_max`` voxels with the highest nearest-neighbour parent score.

    Each voxel inherits the score of ``floor(c / 2)``; voxels without a scored
    parent get 0.  Ties go to the canonically first voxel.
    """
    if len(merged) <= n_max:
        return merged
    s = parent_scores.lookup(np.floor_divide(merged.coords, 2))
    order = np.lexsort((np.arange(len(merged)), -s))
    return merged.select(np.sort(order[:n_max]))


def detection_head(proposals: SparseTensor, head: HeadParams) -> RawPrediction:
    h = affine_relu(conv_s1(proposals, head.conv), head.norm)
    logits = conv_s1(h, head.cls).features
    reg = conv_s1(h, head.reg).features
    return RawPrediction(proposals.level, proposals.voxel_size, proposals.coords, logits, reg)


def proposals_of(merged: SparseTensor, params: DecoderParams) -> SparseTensor:
    conv, norm = params.proposal[merged.level]
    return affine_relu(conv_s1(merged, conv), norm)


def upsample_merge(kept: SparseTensor, backbone_below: SparseTensor,
                   params: DecoderParams) -> tuple[SparseTensor, SparseTensor]:
    """Generative upsampling of pruned proposals, then partial addition.

    Returns ``(upsampled, merged)`` at level ``kept.level - 1``.
    """
    conv, norm = params.up[kept.level]
    up = affine_relu(generative_deconv(kept, conv), norm)
    return up, partial_add(backbone_below, up)


def dsp_tail(kept: SparseTensor, backbone_below: SparseTensor,
             params: DecoderParams) -> RawPrediction:
    """Predictions of level ``i - 1`` as a function of the pruned level-``i`` proposals."""
    _, merged = upsample_merge(kept, backbone_below, params)
    return detection_head(proposals_of(merged, params), params.head)


KeepFn = Callable[[int, SparseTensor], np.ndarray]


def decoder_forward(backbone_feats: list[SparseTensor], params: DecoderParams,
                    config: PipelineConfig, *, tau: float | None = None,
                    mode: str | None = None, pruning: bool = True,
                    keep_fn: KeepFn | None = None) -> DecoderOutput:
    """Run the four decoder blocks from level 4 down to level 1.

    ``keep_fn(level, merged)`` replaces the learned keep scores (used to drive
    pruning with ground-truth masks).  ``pruning=False`` keeps every voxel.
    """
    tau = config.tau if tau is None else tau
    mode = config.mode if mode is None else mode
    if len(backbone_feats) != 4:
        raise ValueError("expected backbone features for levels 1..4")
    out = DecoderOutput({}, {}, {})
    merged = backbone_feats[3]
    upsampled_count = 0
    weak_counts = None  # (before, after) of the weak prune that produced `merged`
    for i in (4, 3, 2, 1):
        t0 = time.perf_counter()
        st = LevelStats(i, merged=len(merged), upsampled=upsampled_count)
        out.merged[i] = merged
        proposals = proposals_of(merged, params)
        out.predictions[i] = detection_head(proposals, params.head)
        st.voxels_before = st.voxels_after = len(proposals)
        if weak_counts is not None:
            st.voxels_before, st.voxels_after = weak_counts
        if i > 1:
            if keep_fn is not None:
                scores = KeepScores.on(merged, keep_fn(i, merged))
            else:
                scores = predict_keep(merged, params.keep.get(i))
            out.keep_scores[i] = scores
            kept = proposals
            if mode == "inference" and pruning:
                kept = prune(proposals, scores, tau)
                st.voxels_after = len(kept)
            out.kept[i] = kept.coords
            up, merged = upsample_merge(kept, backbone_feats[i - 2], params)
            upsampled_count = len(up)
            if mode == "training":
                before = len(merged)
                merged = weak_prune(merged, scores, config.n_max)
                weak_counts = (before, len(merged))
        st.time_ms = (time.perf_counter() - t0) * 1e3
        out.stats[i] = st
    return out
