import numpy as np
import pytest

from voxprune.backbone import BackboneParams, backbone_forward, residual_unit
from voxprune.checks import jittered_params, random_tensor
from voxprune.modelio import PipelineConfig, init_weights
from voxprune.sconv import affine_relu, conv_s1
from voxprune.voxgrid import SparseTensor, quantize


@pytest.fixture(scope="module")
def cfg():
    return PipelineConfig(channels=(4, 8), units=(1, 2, 1, 1), num_classes=3)


@pytest.fixture(scope="module")
def params(cfg):
    return BackboneParams.from_dict(jittered_params(cfg, 3), cfg)


class TestBackbone:
    def test_single_voxel_lineage(self, params):
        scene = quantize([(0.355, 0.123, 0.071)], 0.01)
        feats = backbone_forward(scene, params)
        c = scene.coords[0]
        for i, f in enumerate(feats, start=1):
            assert len(f) == 1 and f.level == i
            np.testing.assert_array_equal(f.coords[0], np.floor_divide(c, 2 ** (i + 1)))

    def test_dense_block_counts(self, params):
        # a dense 16^3 block at level 0 comes from a dense 32^3 block at 1 cm
        c = np.argwhere(np.ones((32, 32, 32), bool))
        scene = SparseTensor.from_coords(c, np.ones((len(c), 1)), -1, 0.01)
        assert [len(f) for f in backbone_forward(scene, params)] == [512, 64, 8, 1]

    def test_zero_weights(self, cfg):
        zero = {k: (v if k.endswith(".scale") else np.zeros_like(v))
                for k, v in init_weights(cfg, 0).items()}
        p = BackboneParams.from_dict(zero, cfg)
        feats = backbone_forward(quantize([(0, 0, 0), (0.5, 0.5, 0.5)], 0.01), p)
        assert all(not f.features.any() for f in feats)
        assert [len(f) for f in feats] == [2, 2, 2, 2]

    def test_voxel_sizes(self, params):
        feats = backbone_forward(quantize([(0.1, 0.2, 0.3)], 0.01), params)
        assert [f.voxel_size for f in feats] == pytest.approx([0.04, 0.08, 0.16, 0.32])

    def test_empty_scene(self, params):
        feats = backbone_forward(SparseTensor.empty(-1, 0.01), params)
        assert [len(f) for f in feats] == [0, 0, 0, 0]

    def test_channel_check(self, params):
        with pytest.raises(ValueError):
            backbone_forward(SparseTensor.empty(-1, 0.01, channels=2), params)


class TestResidualUnit:
    def test_zero_convs_pass_relu(self, params, rng):
        unit = params.stages[0].units[0]
        from dataclasses import replace
        from voxprune.sconv import AffineParams, ConvParams
        z = ConvParams(np.zeros_like(unit.conv2.weights))
        zero_unit = replace(unit, conv2=z, norm2=AffineParams(unit.norm2.scale,
                                                              np.zeros_like(unit.norm2.bias)))
        x = random_tensor(rng, 1, channels=8)
        y = residual_unit(x, zero_unit)
        np.testing.assert_array_equal(y.features, np.maximum(x.features, 0))
        np.testing.assert_array_equal(y.coords, x.coords)

    def test_empty(self, params):
        y = residual_unit(SparseTensor.empty(1, 0.04, 8), params.stages[0].units[0])
        assert len(y) == 0

    def test_composition(self, params, rng):
        unit = params.stages[1].units[1]
        x = random_tensor(rng, 2, channels=8)
        h = affine_relu(conv_s1(x, unit.conv1), unit.norm1)
        h = affine_relu(conv_s1(h, unit.conv2), unit.norm2, relu=False)
        np.testing.assert_array_equal(residual_unit(x, unit).features,
                                      np.maximum(x.features + h.features, 0))
