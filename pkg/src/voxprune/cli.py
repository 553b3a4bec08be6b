"""Command-line front end.

Subcommands: infer, targets, loss-eval, bench, synth, init-weights and
oracle-check.  Exit status is 0 on success, 1 on runtime or validation
failures and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checks, pipeline
from .decoder import decoder_forward
from .losses import total_loss
from .backbone import backbone_forward
from .modelio import PipelineConfig, init_weights, load_config, load_weights, save_weights
from .postproc import save_detections
from .synth import make_scene
from .targets import (LevelThresholds, assign_box_targets, assign_level, gen_keep_mask,
                      load_boxes, save_boxes, training_coords)
from .voxgrid import read_points, write_points


def _config(path) -> PipelineConfig:
    return load_config(path) if path else PipelineConfig()


def _model(args, config: PipelineConfig) -> pipeline.Model:
    return pipeline.Model.from_params(load_weights(args.weights, config), config)


def _dump(obj, path=None) -> None:
    text = json.dumps(obj, indent=1)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def stats_path(out) -> Path:
    p = Path(out)
    return p.with_name(p.stem + ".stats.json")


def cmd_infer(args) -> int:
    config = _config(args.config)
    if args.tau is not None:
        config = config.replace(tau=args.tau)
    model = _model(args, config)
    scene = pipeline.scene_tensor(read_points(args.points), config)
    res = pipeline.run(model, scene, pruning=not args.no_prune, mode="inference")
    save_detections(args.out, res.detections)
    report = pipeline.stats_report(res.decoder.stats, res.tau)
    report["pruning"] = not args.no_prune
    _dump(report, stats_path(args.out))
    return 0


def targets_json(points, boxes, config: PipelineConfig) -> dict:
    th = LevelThresholds.from_config(config.n_vol, config.base_voxel)
    levels = [assign_level(b, th) for b in boxes]
    scene = pipeline.scene_tensor(points, config)
    coords = training_coords(scene.coords)
    tg = assign_box_targets(coords, boxes, levels, config.base_voxel)
    out = {"config": {"n_vol": config.n_vol, "r": config.r, "base_voxel": config.base_voxel},
           "thresholds": {str(i): th[i] for i in (2, 3, 4)},
           "boxes": [dict(b.to_json(), level=lvl) for b, lvl in zip(boxes, levels)],
           "levels": {}}
    for i in (4, 3, 2, 1):
        entry = {"coords": coords[i].tolist()}
        if i > 1:
            m = gen_keep_mask(coords[i], i, boxes, levels, config.r, config.base_voxel)
            entry["keep"] = m.mask.astype(int).tolist()
        t = tg[i]
        entry["positives"] = [{"coord": coords[i][k].tolist(), "box": int(t.box_index[k]),
                               "class": int(t.labels[k]), "regression": t.regression[k].tolist()}
                              for k in t.positives]
        out["levels"][str(i)] = entry
    return out


def cmd_targets(args) -> int:
    config = _config(args.config)
    _dump(targets_json(read_points(args.points), load_boxes(args.boxes), config), args.out)
    return 0


def loss_breakdown(model: pipeline.Model, points, boxes):
    """Training-mode forward pass and the combined loss against generated targets."""
    config = model.config
    th = LevelThresholds.from_config(config.n_vol, config.base_voxel)
    levels = [assign_level(b, th) for b in boxes]
    scene = pipeline.scene_tensor(points, config)
    out = decoder_forward(backbone_forward(scene, model.backbone), model.decoder, config,
                          mode="training")
    coords = {i: p.coords for i, p in out.predictions.items()}
    box_targets = assign_box_targets(coords, boxes, levels, config.base_voxel)
    masks = {i: gen_keep_mask(s.coords, i, boxes, levels, config.r, config.base_voxel)
             for i, s in out.keep_scores.items()}
    return total_loss(out.predictions, box_targets, out.keep_scores, masks, config.lam)


def cmd_loss_eval(args) -> int:
    config = _config(args.config).replace(mode="training")
    model = _model(args, config)
    _dump(loss_breakdown(model, read_points(args.points), load_boxes(args.boxes)).to_json())
    return 0


def _taus(text: str) -> list[float]:
    try:
        taus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None
    if not taus or any(not 0.0 <= t <= 1.0 for t in taus):
        raise argparse.ArgumentTypeError("thresholds must be a non-empty list in [0, 1]")
    return taus


def cmd_bench(args) -> int:
    config = _config(args.config)
    model = _model(args, config)
    scene = pipeline.scene_tensor(read_points(args.points), config)
    keep_fn = pipeline.gt_keep_fn(load_boxes(args.boxes), config) if args.boxes else None
    rows = pipeline.sweep(model, scene, args.taus, keep_fn)
    Path(args.csv).write_text(pipeline.rows_to_csv(rows))
    return 0


def cmd_synth(args) -> int:
    if args.objects < 0 or not args.extent > 0:
        raise ValueError("need --objects >= 0 and --extent > 0")
    points, boxes = make_scene(args.objects, args.extent, args.seed)
    out = Path(args.out)
    write_points(out, points)
    save_boxes(out.with_name(out.stem + ".boxes.json"), boxes)
    return 0


def cmd_init_weights(args) -> int:
    config = _config(args.config)
    save_weights(args.out, init_weights(config, args.seed), config)
    return 0


def cmd_oracle_check(args) -> int:
    names = sorted(checks.SUITES) if args.suite == "all" else [args.suite]
    results = [checks.SUITES[n](seed=args.seed) for n in names]
    _dump({"results": [r.to_json() for r in results]})
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voxprune", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="detect objects in a point file")
    p.add_argument("--points", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, help="override the configured pruning threshold")
    p.add_argument("--no-prune", action="store_true", help="disable spatial pruning")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("targets", help="write keep masks, level assignment and positives")
    p.add_argument("--points", required=True)
    p.add_argument("--boxes", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_targets)

    p = sub.add_parser("loss-eval", help="print the training loss breakdown")
    p.add_argument("--points", required=True)
    p.add_argument("--boxes", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_loss_eval)

    p = sub.add_parser("bench", help="sweep pruning thresholds and write a CSV")
    p.add_argument("--points", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--config")
    p.add_argument("--taus", type=_taus, default=[0.0, 0.3, 0.5])
    p.add_argument("--csv", required=True)
    p.add_argument("--boxes", help="add a run driven by ground-truth keep masks")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic scene and its boxes")
    p.add_argument("--objects", type=int, required=True)
    p.add_argument("--extent", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init-weights", help="write seeded initial weights")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("oracle-check", help="run oracle equality suites")
    p.add_argument("--suite", required=True, choices=[*sorted(checks.SUITES), "all"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"voxprune {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
