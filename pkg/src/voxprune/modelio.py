"""Pipeline configuration, parameter naming, seeded init and the weight file.

Weight file layout (all integers little-endian)::

    b"DSPW"            magic
    0x01               version byte
    uint32             header length in bytes
    header             UTF-8 JSON list [{"name", "shape", "offset"}, ...]
    payload            float32 values, concatenated in manifest order

``offset`` is counted in bytes from the start of the payload.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DSPW"
VERSION = 1
KEEP_LEVELS = (2, 3, 4)
LEVELS = (1, 2, 3, 4)
REG_DIM = 6


class WeightFormatError(ValueError):
    """Malformed or mismatching weight file."""


@dataclass(frozen=True)
class PipelineConfig:
    tau: float = 0.3
    r: float = 13.0
    n_vol: float = 27.0
    lam: float = 0.01
    n_max: int = 100000
    base_voxel: float = 0.01
    channels: tuple[int, int] = (64, 128)
    num_classes: int = 22
    units: tuple[int, int, int, int] = (3, 4, 6, 3)
    nms_iou: float = 0.5
    score_threshold: float = 0.01
    mode: str = "inference"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.mode not in ("inference", "training"):
            raise ValueError(f"mode must be 'inference' or 'training', got {self.mode!r}")
        if len(self.channels) != 2 or len(self.units) != 4:
            raise ValueError("channels needs 2 entries and units needs 4")
        for name in ("r", "n_vol", "n_max", "base_voxel", "num_classes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if any(c <= 0 for c in self.channels) or any(u <= 0 for u in self.units):
            raise ValueError("channel widths and unit counts must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    @property
    def keep_hidden(self) -> int:
        return max(1, self.channels[1] // 2)

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        d["channels"] = list(self.channels)
        d["units"] = list(self.units)
        return d


_JSON_TYPES = {
    "tau": float, "r": float, "n_vol": float, "lambda": float, "n_max": int,
    "base_voxel": float, "channels": list, "num_classes": int, "units": list,
    "nms_iou": float, "score_threshold": float, "mode": str,
}


def config_from_dict(d: dict) -> PipelineConfig:
    if not isinstance(d, dict):
        raise ValueError("config must be a JSON object")
    unknown = sorted(set(d) - set(_JSON_TYPES))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    kw = {}
    for key, value in d.items():
        want = _JSON_TYPES[key]
        if want is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif want is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        else:
            ok = isinstance(value, want)
        if not ok:
            raise ValueError(f"config key {key!r}: expected {want.__name__}, "
                             f"got {type(value).__name__}")
        if want is list:
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ValueError(f"config key {key!r}: expected a list of integers")
            value = tuple(value)
        elif want is float:
            value = float(value)
        kw["lam" if key == "lambda" else key] = value
    return PipelineConfig(**kw)


def load_config(path) -> PipelineConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


# -- parameter layout ---------------------------------------------------------

def _conv(prefix, k, cin, cout):
    return [(f"{prefix}.weight", (k ** 3, cin, cout), k ** 3 * cin),
            (f"{prefix}.bias", (cout,), None)]


def _norm(prefix, c):
    return [(f"{prefix}.scale", (c,), "one"), (f"{prefix}.bias", (c,), None)]


def parameter_spec(config: PipelineConfig) -> list[tuple[str, tuple, object]]:
    """Ordered ``(name, shape, init)`` list defining every model parameter.

    ``init`` is the fan-in for weights, ``None`` for zero-initialized biases and
    ``"one"`` for affine scales.  This order is the generation order used by
    :func:`init_weights` and the manifest order of the weight file.
    """
    c0, c = config.channels
    spec = []
    spec += _conv("backbone.pre.conv", 1, 1, c0) + _norm("backbone.pre.norm", c0)
    for s in range(1, 5):
        cin = c0 if s == 1 else c
        spec += _conv(f"backbone.stage{s}.down.conv", 1, cin, c)
        spec += _norm(f"backbone.stage{s}.down.norm", c)
        for u in range(1, config.units[s - 1] + 1):
            p = f"backbone.stage{s}.unit{u}"
            spec += _conv(f"{p}.conv1", 3, c, c) + _norm(f"{p}.norm1", c)
            spec += _conv(f"{p}.conv2", 3, c, c) + _norm(f"{p}.norm2", c)
    for i in (4, 3, 2, 1):
        spec += _conv(f"decoder.level{i}.proposal.conv", 3, c, c)
        spec += _norm(f"decoder.level{i}.proposal.norm", c)
        if i > 1:
            h = config.keep_hidden
            spec += _conv(f"decoder.level{i}.keep.fc1", 1, c, h)
            spec += _conv(f"decoder.level{i}.keep.fc2", 1, h, 1)
            spec += _conv(f"decoder.level{i}.up.conv", 3, c, c)
            spec += _norm(f"decoder.level{i}.up.norm", c)
    spec += _conv("head.conv", 3, c, c) + _norm("head.norm", c)
    spec += _conv("head.cls", 1, c, config.num_classes)
    spec += _conv("head.reg", 1, c, REG_DIM)
    return spec


def init_weights(config: PipelineConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded fan-in uniform init; a pure function of ``(config, seed)``.

    Weights are uniform in ``[-b, b]`` with ``b = sqrt(6 / fan_in)`` and
    ``fan_in = kernel_size**3 * in_channels``; biases are 0 and affine scales 1.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, init in parameter_spec(config):
        if init is None:
            params[name] = np.zeros(shape, np.float32)
        elif init == "one":
            params[name] = np.ones(shape, np.float32)
        else:
            b = np.sqrt(6.0 / init)
            # largest float32 not above b, so rounding cannot breach the bound
            b32 = np.float32(b)
            if b32 > b:
                b32 = np.nextafter(b32, np.float32(0))
            w = rng.uniform(-b, b, size=shape).astype(np.float32)
            params[name] = np.clip(w, -b32, b32)
    return params


def save_weights(path, params: dict[str, np.ndarray], config: PipelineConfig | None = None):
    """Write parameters; with ``config`` the manifest follows its parameter order."""
    names = ([n for n, _, _ in parameter_spec(config)] if config is not None
             else list(params))
    if config is not None:
        _check_names(set(params), set(names))
    manifest, chunks, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(manifest, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]) + struct.pack("<I", len(header)) + header)
        for chunk in chunks:
            fh.write(chunk)


def _check_names(have: set, want: set) -> None:
    unknown = sorted(have - want)
    missing = sorted(want - have)
    if unknown:
        raise WeightFormatError(f"unknown parameter names: {', '.join(unknown)}")
    if missing:
        raise WeightFormatError(f"missing parameter names: {', '.join(missing)}")


def load_weights(path, config: PipelineConfig | None = None) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 9 or data[:4] != MAGIC:
        raise WeightFormatError("bad magic: not a DSPW weight file")
    if data[4] != VERSION:
        raise WeightFormatError(f"unsupported weight file version {data[4]}")
    (hlen,) = struct.unpack("<I", data[5:9])
    if 9 + hlen > len(data):
        raise WeightFormatError("truncated header")
    try:
        manifest = json.loads(data[9:9 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"unreadable manifest: {exc}") from None
    payload = data[9 + hlen:]
    params, expected = {}, 0
    for entry in manifest:
        try:
            name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError) as exc:
            raise WeightFormatError(f"bad manifest entry {entry!r}") from exc
        if name in params:
            raise WeightFormatError(f"duplicate parameter {name!r}")
        if offset != expected:
            raise WeightFormatError(f"parameter {name!r}: offset {offset} overlaps or "
                                    f"leaves a gap (expected {expected})")
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(payload):
            raise WeightFormatError(f"parameter {name!r}: payload truncated")
        params[name] = np.frombuffer(payload, dtype="<f4", count=count,
                                     offset=offset).reshape(shape).astype(np.float32)
        expected = end
    if expected != len(payload):
        raise WeightFormatError(f"payload has {len(payload)} bytes, manifest "
                                f"describes {expected}")
    if config is not None:
        spec = parameter_spec(config)
        _check_names(set(params), {n for n, _, _ in spec})
        for name, shape, _ in spec:
            if params[name].shape != tuple(shape):
                raise WeightFormatError(f"parameter {name!r}: shape {params[name].shape} "
                                        f"!= expected {tuple(shape)}")
    return params
