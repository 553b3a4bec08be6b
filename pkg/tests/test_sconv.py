import numpy as np
import pytest

from voxprune import oracle
from voxprune.checks import random_tensor
from voxprune.sconv import (BLOCK_ROWS, OFFSETS_3, AffineParams, ConvParams, affine_relu,
                            conv_down, conv_s1, generative_deconv, kernel_offsets)
from voxprune.voxgrid import SparseTensor


def tensor(coords, feats, level=0):
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    f = np.asarray(feats, dtype=np.float64).reshape(len(c), -1)
    return SparseTensor.from_coords(c, f, level, 0.02 * 2.0 ** level)


class TestParams:
    def test_offset_order(self):
        assert OFFSETS_3[0].tolist() == [-1, -1, -1]
        assert OFFSETS_3[1].tolist() == [0, -1, -1]  # x varies fastest
        assert OFFSETS_3[13].tolist() == [0, 0, 0]
        assert kernel_offsets(1).tolist() == [[0, 0, 0]]

    def test_weight_shape_checked(self):
        with pytest.raises(ValueError):
            ConvParams(np.zeros((26, 2, 2)))

    def test_non_finite_rejected(self):
        w = np.zeros((27, 1, 1))
        w[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            ConvParams(w)

    def test_zero_scale_rejected(self):
        with pytest.raises(ValueError):
            AffineParams([0.0], [0.0])


class TestConvS1:
    def test_identity_kernel(self, rng):
        x = tensor([[0, 0, 0]], rng.normal(size=(1, 3)))
        w = np.zeros((27, 3, 3))
        w[13] = np.eye(3)
        y = conv_s1(x, ConvParams(w))
        np.testing.assert_array_equal(y.features, x.features)
        np.testing.assert_array_equal(y.coords, x.coords)

    def test_zero_weights(self, rng):
        x = random_tensor(rng, 0, channels=2)
        y = conv_s1(x, ConvParams(np.zeros((27, 2, 5))))
        assert y.features.shape == (len(x), 5) and not y.features.any()

    def test_matches_dense_oracle_on_full_block(self, rng):
        c = np.argwhere(np.ones((8, 8, 8), bool))
        x = tensor(c, rng.normal(size=(512, 3)))
        w, b = rng.normal(size=(27, 3, 2)), rng.normal(size=2)
        y = conv_s1(x, ConvParams(w, b))
        ref = oracle.dense_conv_oracle(oracle.to_dense(x.coords, x.features), w, b)
        assert oracle.relative_error(y.features, ref.at(y.coords)) < 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv_s1(tensor([[0, 0, 0]], [[1.0]]), ConvParams(np.zeros((27, 2, 1))))

    def test_empty(self):
        y = conv_s1(SparseTensor.empty(0, 0.02, 2), ConvParams(np.ones((27, 2, 3))))
        assert len(y) == 0 and y.channels == 3


class TestConvDown:
    def test_children_summed(self):
        x = tensor([[0, 0, 0], [1, 1, 1]], [[1.0], [2.0]])
        y = conv_down(x, ConvParams(np.full((1, 1, 1), 3.0), kernel_size=1, stride=2))
        np.testing.assert_array_equal(y.coords, [[0, 0, 0]])
        np.testing.assert_array_equal(y.features, [[9.0]])
        assert y.level == 1 and y.voxel_size == pytest.approx(0.04)

    def test_floor_division(self):
        y = conv_down(tensor([[2, 3, 5]], [[1.0]]),
                      ConvParams(np.ones((1, 1, 1)), kernel_size=1, stride=2))
        np.testing.assert_array_equal(y.coords, [[1, 1, 2]])

    def test_negative_coordinates(self):
        y = conv_down(tensor([[-1, -2, -3]], [[1.0]]),
                      ConvParams(np.ones((1, 1, 1)), kernel_size=1, stride=2))
        np.testing.assert_array_equal(y.coords, [[-1, -1, -2]])


class TestGenerativeDeconv:
    def test_single_voxel_footprint(self):
        y = generative_deconv(tensor([[0, 0, 0]], [[1.0]], level=1),
                              ConvParams(np.ones((27, 1, 1)), kernel_size=3, stride=2,
                                         transposed=True))
        assert {tuple(c) for c in y.coords.tolist()} == {tuple(o) for o in OFFSETS_3.tolist()}
        assert y.level == 0

    def test_zero_weights_give_bias(self):
        y = generative_deconv(tensor([[0, 0, 0]], [[5.0]], level=2),
                              ConvParams(np.zeros((27, 1, 2)), [0.5, -1.0], kernel_size=3,
                                         stride=2, transposed=True))
        assert len(y) == 27
        np.testing.assert_array_equal(y.features, np.tile([0.5, -1.0], (27, 1)))

    def test_two_inputs_union(self):
        y = generative_deconv(tensor([[0, 0, 0], [1, 0, 0]], [[1.0], [1.0]], level=1),
                              ConvParams(np.ones((27, 1, 1)), kernel_size=3, stride=2,
                                         transposed=True))
        assert len(y) == 45
        # the shared plane x = 1 receives both inputs
        row = y.find(np.array([[1, 0, 0]]))[0]
        assert y.features[row, 0] == 2.0

    def test_level_zero_rejected(self):
        with pytest.raises(ValueError):
            generative_deconv(tensor([[0, 0, 0]], [[1.0]], level=0),
                              ConvParams(np.ones((27, 1, 1)), kernel_size=3, stride=2,
                                         transposed=True))


class TestAffineRelu:
    def test_relu_on(self):
        y = affine_relu(tensor([[0, 0, 0]], [[-1.0, 2.0]]), AffineParams([1, 1], [0, 0]))
        np.testing.assert_array_equal(y.features, [[0.0, 2.0]])

    def test_relu_off(self):
        y = affine_relu(tensor([[0, 0, 0]], [[3.0]]), AffineParams([2.0], [1.0]), relu=False)
        np.testing.assert_array_equal(y.features, [[7.0]])

    def test_empty(self):
        y = affine_relu(SparseTensor.empty(0, 0.02, 1), AffineParams([1.0], [0.0]))
        assert len(y) == 0


class TestDeterminism:
    def test_rows_independent_of_batch(self, rng):
        # a voxel's output is the same whether computed in a big or small tensor
        c = np.argwhere(np.ones((12, 12, 12), bool))
        x = tensor(c, rng.normal(size=(len(c), 4)))
        assert len(x) > BLOCK_ROWS
        p = ConvParams(rng.normal(size=(27, 4, 4)), rng.normal(size=4))
        full = conv_s1(x, p)
        keep = np.zeros(len(x), bool)
        keep[rng.choice(len(x), 300, replace=False)] = True
        center = np.all((x.coords >= 5) & (x.coords <= 6), axis=1)
        sub = conv_s1(x.select(keep | np.any(np.abs(x.coords[:, None] - x.coords[center][None])
                                             .max(axis=2) <= 1, axis=1)), p)
        rows = sub.find(x.coords[center])
        np.testing.assert_array_equal(sub.features[rows], full.features[center])

    def test_thread_count_invariance(self, rng, monkeypatch):
        c = np.argwhere(rng.random((16, 16, 16)) < 0.5)
        x = tensor(c, rng.normal(size=(len(c), 4)))
        p = ConvParams(rng.normal(size=(27, 4, 4)))
        outs = []
        for n in ("1", "4"):
            monkeypatch.setenv("DSP_THREADS", n)
            outs.append(conv_s1(x, p).features.tobytes())
        assert outs[0] == outs[1]

    def test_bad_thread_env(self, monkeypatch):
        monkeypatch.setenv("DSP_THREADS", "0")
        with pytest.raises(ValueError):
            conv_s1(tensor([[0, 0, 0]], [[1.0]]), ConvParams(np.ones((27, 1, 1))))
