#!/usr/bin/env python3
"""
Write a synthetic scene and weights, then run the CLI pipeline end to end.

Everything lands in a temporary directory that is printed at the end.
Usage: python3 demos/detect_scene.py
"""

import json
import tempfile
from pathlib import Path

from voxprune.cli import main as cli


def main():
    work = Path(tempfile.mkdtemp(prefix="voxprune_demo_"))
    cfg = work / "config.json"
    cfg.write_text(json.dumps({"channels": [8, 16], "units": [1, 1, 1, 1], "num_classes": 4}))

    cli(["synth", "--objects", "4", "--extent", "2.0", "--seed", "3",
         "--out", str(work / "scene.txt")])
    cli(["init-weights", "--config", str(cfg), "--seed", "0", "--out", str(work / "w.bin")])
    for tau in ("0", "0.5"):
        out = work / f"det_tau{tau}.json"
        cli(["infer", "--points", str(work / "scene.txt"), "--weights", str(work / "w.bin"),
             "--config", str(cfg), "--tau", tau, "--out", str(out)])
        stats = json.loads(out.with_suffix(".stats.json").read_text())
        n = len(json.loads(out.read_text())["detections"])
        kept = {lvl: s["voxels_after_prune"] for lvl, s in stats["levels"].items()}
        print(f"tau={tau}: {n} detections, kept voxels per level {kept}")

    cli(["targets", "--points", str(work / "scene.txt"), "--boxes",
         str(work / "scene.boxes.json"), "--config", str(cfg), "--out", str(work / "targets.json")])
    print(f"outputs in {work}")


if __name__ == "__main__":
    main()
