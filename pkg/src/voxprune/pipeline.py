"""End-to-end wiring: scene -> backbone -> pruned decoder -> fused detections,
plus the per-level pruning report and the threshold sweep used by the bench."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneParams, backbone_forward
from .decoder import DecoderOutput, DecoderParams, LevelStats, decoder_forward
from .modelio import PipelineConfig
from .postproc import Detection, fuse_levels
from .targets import Box3D, LevelThresholds, assign_level, gen_keep_mask
from .voxgrid import SparseTensor, quantize

CSV_COLUMNS = ("tau", "level", "voxels_before", "voxels_after", "prune_ratio", "time_ms")


@dataclass(frozen=True)
class Model:
    config: PipelineConfig
    backbone: BackboneParams
    decoder: DecoderParams

    @classmethod
    def from_params(cls, params: dict, config: PipelineConfig) -> "Model":
        return cls(config, BackboneParams.from_dict(params, config), DecoderParams.from_dict(params))


@dataclass
class RunResult:
    decoder: DecoderOutput
    detections: list[Detection]
    tau: float


def scene_tensor(points, config: PipelineConfig) -> SparseTensor:
    """Quantize world points at the base voxel size (level -1)."""
    return quantize(points, config.base_voxel, level=-1)


def gt_keep_fn(boxes: list[Box3D], config: PipelineConfig):
    """Keep scores taken from ground-truth masks: 1 inside a mask, 0 outside."""
    thresholds = LevelThresholds.from_config(config.n_vol, config.base_voxel)
    levels = [assign_level(b, thresholds) for b in boxes]

    def keep(level: int, merged: SparseTensor) -> np.ndarray:
        m = gen_keep_mask(merged.coords, level, boxes, levels, config.r, config.base_voxel)
        return m.mask.astype(np.float64)
    return keep


def run(model: Model, scene: SparseTensor, *, tau: float | None = None, pruning: bool = True,
        keep_fn=None, mode: str | None = None) -> RunResult:
    cfg = model.config
    tau = cfg.tau if tau is None else tau
    feats = backbone_forward(scene, model.backbone)
    out = decoder_forward(feats, model.decoder, cfg, tau=tau, mode=mode, pruning=pruning,
                          keep_fn=keep_fn)
    dets = fuse_levels(out.predictions, cfg.score_threshold, cfg.nms_iou)
    return RunResult(out, dets, tau)


def stats_report(stats: dict[int, LevelStats], tau: float) -> dict:
    """Per-level voxel counts around pruning, with totals."""
    levels = {}
    for i in sorted(stats, reverse=True):
        st = stats[i]
        levels[str(i)] = {"voxels_before_prune": st.voxels_before,
                          "voxels_after_prune": st.voxels_after,
                          "prune_ratio": st.prune_ratio,
                          "merged_voxels": st.merged,
                          "upsampled_voxels": st.upsampled,
                          "wall_time_ms": st.time_ms}
    before = sum(st.voxels_before for st in stats.values())
    after = sum(st.voxels_after for st in stats.values())
    totals = {"voxels_before_prune": before, "voxels_after_prune": after,
              "prune_ratio": 1.0 - after / before if before else 0.0,
              "wall_time_ms": sum(st.time_ms for st in stats.values())}
    return {"tau": tau, "levels": levels, "totals": totals}


def sweep(model: Model, scene: SparseTensor, taus, keep_fn=None) -> list[dict]:
    """One inference run per threshold; one row per (tau, level).

    With ``keep_fn`` an extra run driven by ground-truth masks is appended with
    ``tau`` reported as ``"gt"``.
    """
    rows = []
    runs = [(float(t), float(t), None) for t in taus]
    if keep_fn is not None:
        runs.append(("gt", 0.5, keep_fn))
    for label, tau, fn in runs:
        res = run(model, scene, tau=tau, keep_fn=fn, mode="inference")
        for i in (4, 3, 2, 1):
            st = res.decoder.stats[i]
            rows.append({"tau": label, "level": i, "voxels_before": st.voxels_before,
                         "voxels_after": st.voxels_after, "prune_ratio": st.prune_ratio,
                         "time_ms": st.time_ms, "upsampled": st.upsampled})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r["tau"], r["level"], r["voxels_before"], r["voxels_after"],
                    repr(float(r["prune_ratio"])), f"{r['time_ms']:.3f}"])
    return buf.getvalue()
