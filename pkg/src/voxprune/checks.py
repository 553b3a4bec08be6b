"""Randomized equality suites between the library and its brute-force oracles.

Each ``check_*`` function returns a :class:`SuiteResult`; ``oracle-check`` on
the command line runs them and fails when any suite fails.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import oracle
from .decoder import DecoderParams, dsp_tail
from .modelio import PipelineConfig, init_weights
from .postproc import Detection, _iou_many, nms
from .sconv import ConvParams, conv_down, conv_s1, generative_deconv, upsample_coords
from .targets import (Box3D, LevelThresholds, assign_box_targets, assign_level,
                      gen_keep_mask)
from .voxgrid import SparseTensor

CONV_TOL = 1e-5


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    seconds: float
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"suite": self.name, "passed": self.passed, "cases": self.cases,
                "seconds": self.seconds, "details": self.details}


def random_tensor(rng, level: int, max_dim: int = 16, channels: int | None = None,
                  voxel_size: float = 0.02) -> SparseTensor:
    dims = rng.integers(1, max_dim + 1, size=3)
    density = rng.uniform(0.05, 0.7)
    occ = np.argwhere(rng.random(tuple(dims)) < density)
    if occ.shape[0] == 0:
        occ = np.zeros((1, 3), dtype=np.int64)
    coords = occ + rng.integers(-20, 21, size=3)
    c = channels if channels is not None else int(rng.integers(1, 5))
    feats = rng.normal(size=(coords.shape[0], c))
    return SparseTensor.from_coords(coords, feats, level, voxel_size)


def _conv_case(rng, variant: str) -> float:
    if variant == "conv_s1":
        x = random_tensor(rng, 0)
        k = 3 if rng.random() < 0.8 else 1
    elif variant == "conv_down":
        x = random_tensor(rng, 0)
        k = 1
    else:
        x = random_tensor(rng, 1, max_dim=15)
        k = 3
    cout = int(rng.integers(1, 5))
    w = rng.normal(size=(k ** 3, x.channels, cout))
    b = rng.normal(size=cout)
    if variant == "conv_s1":
        got = conv_s1(x, ConvParams(w, b, kernel_size=k))
        ref = oracle.dense_conv_oracle(oracle.to_dense(x.coords, x.features), w, b, kernel=k)
    elif variant == "conv_down":
        got = conv_down(x, ConvParams(w, b, kernel_size=1, stride=2))
        ref = oracle.dense_conv_oracle(oracle.to_dense(x.coords, x.features), w, b,
                                       kernel=1, stride=2)
    else:
        got = generative_deconv(x, ConvParams(w, b, kernel_size=3, stride=2, transposed=True))
        ref = oracle.dense_conv_oracle(oracle.to_dense(x.coords, x.features), w, b,
                                       kernel=3, stride=2, transposed=True)
    return oracle.relative_error(got.features, ref.at(got.coords))


def check_conv(n: int = 200, seed: int = 0) -> SuiteResult:
    """Sparse convolutions against the dense oracle, ``n`` cases per variant."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = {}
    for variant in ("conv_s1", "conv_down", "generative_deconv"):
        worst[variant] = max(_conv_case(rng, variant) for _ in range(n))
    ok = all(e < CONV_TOL for e in worst.values())
    return SuiteResult("conv", ok, 3 * n, time.perf_counter() - t0,
                       {"max_rel_error": worst, "tolerance": CONV_TOL})


# -- targets ------------------------------------------------------------------

def random_target_instance(rng, max_boxes: int = 20, max_voxels: int = 1000,
                           extent: float = 2.0, base_voxel: float = 0.01):
    boxes = []
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        vol = np.exp(rng.uniform(np.log(1e-3), np.log(2.0)))
        aspect = rng.uniform(0.5, 2.0, size=3)
        size = aspect * (vol / np.prod(aspect)) ** (1 / 3)
        boxes.append(Box3D(rng.uniform(0, extent, size=3), size, int(rng.integers(0, 4))))
    coords = {}
    budget = int(rng.integers(4, max_voxels + 1))
    for i in (1, 2, 3, 4):
        s = base_voxel * 2.0 ** (i + 1)
        cells = max(1, int(np.ceil(extent / s)))
        n = min(budget // 4, cells ** 3)
        flat = rng.choice(cells ** 3, size=n, replace=False)
        c = np.stack(np.unravel_index(np.sort(flat), (cells,) * 3), 1)
        coords[i] = SparseTensor.from_coords(c, np.zeros((n, 1)), i, s).coords
    return coords, boxes


def compare_targets(coords, boxes, n_vol: float = 27.0, r: float = 13.0,
                    base_voxel: float = 0.01) -> list[str]:
    """Differences between the targets module and the brute-force oracle."""
    ref = oracle.brute_force_targets(coords, boxes, n_vol, r, base_voxel)
    th = LevelThresholds.from_config(n_vol, base_voxel)
    levels = [assign_level(b, th) for b in boxes]
    problems = []
    if levels != ref["levels"]:
        problems.append("level assignment")
    for i in (2, 3, 4):
        m = gen_keep_mask(coords[i], i, boxes, levels, r, base_voxel).mask
        if m.astype(int).tolist() != ref["keep_masks"][i]:
            problems.append(f"keep mask level {i}")
    tg = assign_box_targets(coords, boxes, levels, base_voxel)
    for i in coords:
        if tg[i].box_index.tolist() != ref["owners"][i]:
            problems.append(f"positives level {i}")
    return problems


def check_targets(n: int = 100, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = []
    for case in range(n):
        coords, boxes = random_target_instance(rng)
        for p in compare_targets(coords, boxes):
            failures.append(f"case {case}: {p}")
    return SuiteResult("targets", not failures, n, time.perf_counter() - t0,
                       {"failures": failures[:20]})


# -- receptive field ----------------------------------------------------------

def jittered_params(config: PipelineConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded initial weights with biases drawn from ``[0, 0.5)`` instead of 0,
    so that few ReLU units sit at exactly zero."""
    params = init_weights(config, seed)
    rng = np.random.default_rng(seed + 1)
    for name in sorted(params):
        if name.endswith(".bias"):
            params[name] = rng.uniform(0.0, 0.5, size=params[name].shape).astype(np.float32)
    return params


def tail_params(channels: int = 4, seed: int = 0, num_classes: int = 3) -> DecoderParams:
    cfg = PipelineConfig(channels=(channels, channels), units=(1, 1, 1, 1),
                         num_classes=num_classes)
    return DecoderParams.from_dict(jittered_params(cfg, seed))


def _perturbation_case(rng, params: DecoderParams, channels: int) -> list[str]:
    level = int(rng.integers(2, 5))
    kept = random_tensor(rng, level, max_dim=6, channels=channels)
    child = upsample_coords(kept.coords)
    below_mask = rng.random(child.shape[0]) < 0.6
    below = SparseTensor.from_coords(child[below_mask],
                                     rng.normal(size=(int(below_mask.sum()), channels)),
                                     level - 1, kept.voxel_size / 2)
    base = dsp_tail(kept, below, params)
    v = base.coords[int(rng.integers(0, len(base)))]
    row = int(np.flatnonzero(np.all(base.coords == v, axis=1))[0])
    influence, footprint = oracle.receptive_field_oracle(kept.coords, [v])
    problems = []
    if not oracle.rf_cube_contains(influence, footprint, v, half=4):
        problems.append("influence set leaves the 9x9x9 cube")
    outside = [k for k, c in enumerate(map(tuple, kept.coords.tolist())) if c not in influence]
    for k in rng.permutation(outside)[:4]:
        feats = kept.features.copy()
        feats[k] = 0.0
        for variant in (kept.with_features(feats), kept.select(np.arange(len(kept)) != k)):
            pred = dsp_tail(variant, below, params)
            hit = np.flatnonzero(np.all(pred.coords == v, axis=1))
            if hit.size != 1 or not (
                    np.array_equal(pred.class_logits[hit[0]], base.class_logits[row])
                    and np.array_equal(pred.regression[hit[0]], base.regression[row])):
                problems.append(f"voxel {tuple(kept.coords[k])} outside the influence set "
                                f"changed the output at {tuple(v)}")
    return problems


def dense_block_footprint() -> int:
    """Side, in level-``i-1`` units, of the cube spanned by the parents that
    influence the 27 proposals around a voxel when the parent grid is dense."""
    parents = np.argwhere(np.ones((9, 9, 9), dtype=bool)) - 4
    props = np.argwhere(np.ones((3, 3, 3), dtype=bool)) - 1
    influence, _ = oracle.receptive_field_oracle(parents, props)
    f = 2 * np.asarray(sorted(influence))
    return int((f.max(axis=0) - f.min(axis=0) + 1).max())


def check_receptive(n: int = 30, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    channels = 4
    params = tail_params(channels, seed)
    failures = []
    side = dense_block_footprint()
    if side != 9:
        failures.append(f"dense footprint side {side} != 9")
    single, _ = oracle.receptive_field_oracle([(3, -2, 5)], [(6, -4, 10)])
    if single != {(3, -2, 5)}:
        failures.append("single-parent influence set")
    for case in range(n):
        failures += [f"case {case}: {p}" for p in _perturbation_case(rng, params, channels)]
    return SuiteResult("receptive", not failures, n, time.perf_counter() - t0,
                       {"dense_footprint_side": side, "failures": failures[:20]})


# -- NMS ----------------------------------------------------------------------

def random_detections(rng, max_boxes: int = 200) -> list[Detection]:
    dets = []
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        cls = int(rng.integers(0, 4))
        box = Box3D(rng.uniform(0, 2, size=3), rng.uniform(0.1, 1.0, size=3), cls)
        score = float(rng.choice([0.5, rng.random()]))  # exercise score ties
        dets.append(Detection(box, score, cls, int(rng.integers(1, 5))))
    return dets


def nms_problems(dets: list[Detection], iou_threshold: float = 0.5) -> list[str]:
    kept = nms(dets, iou_threshold)
    problems = []
    if nms(kept, iou_threshold) != kept:
        problems.append("not idempotent")
    for a in range(len(kept)):
        for b in range(a + 1, len(kept)):
            if kept[a].class_id == kept[b].class_id:
                iou = _iou_many(np.asarray(kept[a].box.center), np.asarray(kept[a].box.size),
                                np.asarray([kept[b].box.center]),
                                np.asarray([kept[b].box.size]))[0]
                if iou >= iou_threshold:
                    problems.append("kept pair overlaps above the threshold")
    kept_ids = {id(d) for d in kept}
    for d in dets:
        if id(d) in kept_ids:
            continue
        rivals = [k for k in kept if k.class_id == d.class_id
                  and (-k.score, k.sort_key()) <= (-d.score, d.sort_key())]
        if not any(_iou_many(np.asarray(k.box.center), np.asarray(k.box.size),
                             np.asarray([d.box.center]), np.asarray([d.box.size]))[0]
                   >= iou_threshold for k in rivals):
            problems.append("dropped detection has no suppressor")
    return problems


def check_nms(n: int = 100, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = []
    for case in range(n):
        failures += [f"case {case}: {p}" for p in nms_problems(random_detections(rng))]
    return SuiteResult("nms", not failures, n, time.perf_counter() - t0,
                       {"failures": failures[:20]})


SUITES = {"conv": check_conv, "targets": check_targets, "receptive": check_receptive,
          "nms": check_nms}
