import csv
import json

import numpy as np
import pytest

from voxprune.cli import main, targets_json
from voxprune.modelio import PipelineConfig
from voxprune.synth import make_scene
from voxprune.targets import LevelThresholds, assign_level, load_boxes
from voxprune.voxgrid import read_points, write_points

SMALL = {"channels": [4, 8], "units": [1, 1, 1, 1], "num_classes": 4}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(SMALL))
    assert main(["synth", "--objects", "3", "--extent", "1.2", "--seed", "4",
                 "--out", str(d / "scene.txt")]) == 0
    assert main(["init-weights", "--config", str(d / "cfg.json"), "--seed", "1",
                 "--out", str(d / "w.bin")]) == 0
    return d


def common(d):
    return ["--weights", str(d / "w.bin"), "--config", str(d / "cfg.json")]


class TestSynth:
    def test_files(self, work):
        assert read_points(work / "scene.txt").shape[0] > 0
        assert len(load_boxes(work / "scene.boxes.json")) == 3

    def test_floor_only(self):
        pts, boxes = make_scene(0, 1.0, seed=0)
        assert boxes == [] and np.all(pts[:, 2] < 0.02)

    def test_reproducible(self):
        a, b = make_scene(5, 2.0, seed=9), make_scene(5, 2.0, seed=9)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]

    def test_levels_covered(self):
        _, boxes = make_scene(8, 4.0, seed=3)
        th = LevelThresholds.from_config()
        assert {assign_level(b, th) for b in boxes} == {1, 2, 3, 4}
        assert all(b.class_id == assign_level(b, th) - 1 for b in boxes)


class TestInfer:
    def test_tau_zero_matches_no_prune(self, work):
        args = ["infer", "--points", str(work / "scene.txt"), *common(work)]
        assert main(args + ["--tau", "0", "--out", str(work / "a.json")]) == 0
        assert main(args + ["--no-prune", "--out", str(work / "b.json")]) == 0
        assert (work / "a.json").read_bytes() == (work / "b.json").read_bytes()
        stats = json.loads((work / "a.stats.json").read_text())
        assert set(stats["levels"]) == {"1", "2", "3", "4"}

    def test_pruning_never_adds(self, work):
        args = ["infer", "--points", str(work / "scene.txt"), *common(work)]
        main(args + ["--tau", "0", "--out", str(work / "t0.json")])
        main(args + ["--tau", "0.3", "--out", str(work / "t3.json")])
        s0 = json.loads((work / "t0.stats.json").read_text())["levels"]
        s3 = json.loads((work / "t3.stats.json").read_text())["levels"]
        for lvl in s0:
            assert s3[lvl]["voxels_after_prune"] <= s0[lvl]["voxels_after_prune"]

    def test_empty_points(self, work):
        write_points(work / "empty.txt", np.zeros((0, 3)))
        assert main(["infer", "--points", str(work / "empty.txt"), *common(work),
                     "--out", str(work / "e.json")]) == 0
        assert json.loads((work / "e.json").read_text()) == {"detections": []}

    def test_missing_file(self, work, capsys):
        assert main(["infer", "--points", str(work / "nope.txt"), *common(work),
                     "--out", str(work / "x.json")]) == 1
        assert "error" in capsys.readouterr().err

    def test_weights_config_mismatch(self, work):
        (work / "big.json").write_text(json.dumps(dict(SMALL, channels=[4, 16])))
        assert main(["infer", "--points", str(work / "scene.txt"), "--weights",
                     str(work / "w.bin"), "--config", str(work / "big.json"),
                     "--out", str(work / "x.json")]) == 1


class TestTargets:
    def test_output(self, work):
        assert main(["targets", "--points", str(work / "scene.txt"), "--boxes",
                     str(work / "scene.boxes.json"), "--config", str(work / "cfg.json"),
                     "--out", str(work / "t.json")]) == 0
        t = json.loads((work / "t.json").read_text())
        assert t["config"]["n_vol"] == 27 and t["config"]["r"] == 13
        assert set(t["levels"]) == {"1", "2", "3", "4"}
        assert len(t["levels"]["2"]["keep"]) == len(t["levels"]["2"]["coords"])
        assert "keep" not in t["levels"]["1"]

    def test_no_boxes(self, work):
        out = targets_json(read_points(work / "scene.txt"), [], PipelineConfig())
        for i in ("2", "3", "4"):
            assert not any(out["levels"][i]["keep"])
            assert out["levels"][i]["positives"] == []


class TestLossEval:
    def _run(self, work, capsys, cfg):
        (work / "loss.json").write_text(json.dumps(cfg))
        assert main(["loss-eval", "--points", str(work / "scene.txt"), "--boxes",
                     str(work / "scene.boxes.json"), "--weights", str(work / "w.bin"),
                     "--config", str(work / "loss.json")]) == 0
        return json.loads(capsys.readouterr().out)

    def test_breakdown(self, work, capsys):
        out = self._run(work, capsys, SMALL)
        box, keep = sum(out["box"].values()), sum(out["keep"].values())
        assert out["total"] == pytest.approx(box + 0.01 * keep, abs=1e-9)
        assert out == self._run(work, capsys, SMALL)

    def test_lambda_zero(self, work, capsys):
        out = self._run(work, capsys, dict(SMALL, **{"lambda": 0.0}))
        assert out["total"] == pytest.approx(sum(out["box"].values()), abs=1e-12)


class TestBench:
    def _bench(self, work, name):
        assert main(["bench", "--points", str(work / "scene.txt"), *common(work),
                     "--taus", "0,0.3,0.5,1.0", "--csv", str(work / name)]) == 0
        with open(work / name) as fh:
            return list(csv.DictReader(fh))

    def test_sweep(self, work):
        rows = self._bench(work, "b1.csv")
        assert list(rows[0]) == ["tau", "level", "voxels_before", "voxels_after",
                                 "prune_ratio", "time_ms"]
        after = {(float(r["tau"]), int(r["level"])): int(r["voxels_after"]) for r in rows}
        for lvl in (1, 2, 3, 4):
            seq = [after[(t, lvl)] for t in (0.0, 0.3, 0.5, 1.0)]
            assert seq == sorted(seq, reverse=True)
        assert all(after[(1.0, lvl)] == 0 for lvl in (2, 3, 4))

    def test_rerun_identical(self, work):
        a, b = self._bench(work, "b2.csv"), self._bench(work, "b3.csv")
        strip = lambda rows: [{k: v for k, v in r.items() if k != "time_ms"} for r in rows]
        assert strip(a) == strip(b)

    def test_gt_row(self, work):
        assert main(["bench", "--points", str(work / "scene.txt"), *common(work),
                     "--taus", "0", "--boxes", str(work / "scene.boxes.json"),
                     "--csv", str(work / "gt.csv")]) == 0
        with open(work / "gt.csv") as fh:
            assert {r["tau"] for r in csv.DictReader(fh)} == {"0.0", "gt"}

    def test_bad_taus(self, work):
        with pytest.raises(SystemExit) as exc:
            main(["bench", "--points", "p", "--weights", "w", "--taus", "0,2", "--csv", "c"])
        assert exc.value.code == 2


class TestOracleCheck:
    def test_conv_suite(self, capsys):
        assert main(["oracle-check", "--suite", "nms"]) == 0
        assert json.loads(capsys.readouterr().out)["results"][0]["passed"]

    def test_unknown_suite(self):
        with pytest.raises(SystemExit) as exc:
            main(["oracle-check", "--suite", "bogus"])
        assert exc.value.code == 2

    def test_init_round_trip(self, work):
        from voxprune.modelio import load_config, load_weights
        load_weights(work / "w.bin", load_config(work / "cfg.json"))
