import json
import struct

import numpy as np
import pytest

from voxprune.modelio import (MAGIC, PipelineConfig, WeightFormatError, config_from_dict,
                              init_weights, load_config, load_weights, parameter_spec,
                              save_weights)

CFG = PipelineConfig(channels=(4, 8), units=(1, 1, 2, 1), num_classes=5)


class TestConfig:
    def test_defaults(self):
        c = config_from_dict({})
        assert (c.tau, c.r, c.n_vol, c.lam, c.n_max) == (0.3, 13.0, 27.0, 0.01, 100000)
        assert c.channels == (64, 128) and c.mode == "inference"

    def test_override(self):
        c = config_from_dict({"tau": 0.5})
        assert c.tau == 0.5 and c.r == 13.0

    def test_tau_range(self):
        with pytest.raises(ValueError):
            config_from_dict({"tau": 2.0})

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            config_from_dict({"taux": 0.1})

    def test_wrong_type(self):
        with pytest.raises(ValueError):
            config_from_dict({"n_max": 1.5})

    def test_file_round_trip(self, tmp_path):
        c = CFG.replace(tau=0.7, lam=0.5)
        (tmp_path / "c.json").write_text(json.dumps(c.to_json()))
        assert load_config(tmp_path / "c.json") == c


class TestInit:
    def test_deterministic(self, tmp_path):
        save_weights(tmp_path / "a.bin", init_weights(CFG, 7), CFG)
        save_weights(tmp_path / "b.bin", init_weights(CFG, 7), CFG)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_seeds_differ(self):
        a, b = init_weights(CFG, 1), init_weights(CFG, 2)
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_bound(self):
        params = init_weights(CFG, 3)
        for name, shape, fan_in in parameter_spec(CFG):
            w = params[name]
            assert w.shape == shape and w.dtype == np.float32
            if isinstance(fan_in, int):
                assert np.abs(w).max() <= np.sqrt(6.0 / fan_in)
            elif fan_in == "one":
                assert np.all(w == 1)
            else:
                assert not w.any()


class TestWeightFile:
    def test_round_trip(self, tmp_path, rng):
        params = {k: rng.normal(size=v.shape).astype(np.float32)
                  for k, v in init_weights(CFG, 0).items()}
        save_weights(tmp_path / "w.bin", params, CFG)
        back = load_weights(tmp_path / "w.bin", CFG)
        assert back.keys() == params.keys()
        for k in params:
            assert back[k].tobytes() == params[k].tobytes()

    def test_layout(self, tmp_path):
        save_weights(tmp_path / "w.bin", {"a": np.ones((2, 3), np.float32)})
        data = (tmp_path / "w.bin").read_bytes()
        assert data[:4] == MAGIC and data[4] == 1
        (hlen,) = struct.unpack("<I", data[5:9])
        assert json.loads(data[9:9 + hlen]) == [{"name": "a", "shape": [2, 3], "offset": 0}]
        assert len(data) == 9 + hlen + 24

    def _corrupt(self, tmp_path, fn):
        save_weights(tmp_path / "w.bin", init_weights(CFG, 0), CFG)
        data = bytearray((tmp_path / "w.bin").read_bytes())
        (tmp_path / "w.bin").write_bytes(bytes(fn(data)))
        with pytest.raises(WeightFormatError):
            load_weights(tmp_path / "w.bin", CFG)

    def test_bad_magic(self, tmp_path):
        self._corrupt(tmp_path, lambda d: b"XXXX" + d[4:])

    def test_bad_version(self, tmp_path):
        self._corrupt(tmp_path, lambda d: d[:4] + b"\x02" + d[5:])

    def test_truncated_payload(self, tmp_path):
        self._corrupt(tmp_path, lambda d: d[:-4])

    def test_extra_payload(self, tmp_path):
        self._corrupt(tmp_path, lambda d: d + b"\0\0\0\0")

    def test_shape_mismatch(self, tmp_path):
        save_weights(tmp_path / "w.bin", init_weights(CFG, 0), CFG)
        with pytest.raises(WeightFormatError):
            load_weights(tmp_path / "w.bin", CFG.replace(channels=(4, 16)))

    def test_missing_parameter(self, tmp_path):
        params = init_weights(CFG, 0)
        params.pop("head.cls.bias")
        save_weights(tmp_path / "w.bin", params)
        with pytest.raises(WeightFormatError):
            load_weights(tmp_path / "w.bin", CFG)
