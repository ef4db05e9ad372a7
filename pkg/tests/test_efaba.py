import numpy as np
import pytest

import oracles
from lba_sodkit import efaba
from lba_sodkit.layers import Initializer, ParamStore
from lba_sodkit.tensor import ShapeError, Tensor

CHANNELS = (8, 16, 40)


def sig(x):
    return 1 / (1 + np.exp(-x))


def conv_np(x, P, name):
    return oracles.conv2d_loop(x, P[f"{name}.weight"].data, P[f"{name}.bias"].data)


def cbr_np(x, P, name):
    y = conv_np(x, P, f"{name}.conv")
    y = oracles.batchnorm_two_pass(y, P[f"{name}.bn.gamma"].data, P[f"{name}.bn.beta"].data)
    return np.maximum(y, 0)


def perturb(P, rng, scale=0.3):
    for _, t in P.items():
        t.data = t.data + scale * rng.standard_normal(t.shape)
    return P


@pytest.fixture
def params(rng):
    P = ParamStore()
    efaba.init_efaba(Initializer(P, rng), CHANNELS)
    return perturb(P, rng)


@pytest.fixture
def pyramid(rng):
    return tuple(Tensor(rng.standard_normal((2, c, s, s))) for c, s in zip(CHANNELS, (16, 8, 4)))


class TestEdgeGate:
    def test_constant_feature_halved(self):
        f = np.full((1, 2, 4, 4), 1.7)
        np.testing.assert_array_equal(efaba.edge_gate(Tensor(f)).data, 0.5 * f)

    def test_zero_feature(self):
        assert not np.any(efaba.edge_gate(Tensor(np.zeros((1, 2, 4, 4)))).data)

    def test_composition(self, rng):
        f = rng.standard_normal((2, 3, 5, 5))
        want = sig(oracles.sobel_loop(f)) * f
        np.testing.assert_allclose(efaba.edge_gate(Tensor(f)).data, want, rtol=0, atol=1e-12)


class TestEdgeFuse:
    def test_single_channel_output(self, params, rng):
        e = Tensor(rng.standard_normal((2, 8, 6, 6)))
        assert efaba.edge_fuse(e, e, params, "efaba.ecd1").shape == (2, 1, 6, 6)

    def test_zero_params_give_zero(self, params, rng):
        for _, t in params.items():
            t.data = np.zeros_like(t.data)
        e = Tensor(rng.standard_normal((1, 8, 4, 4)))
        assert not np.any(efaba.edge_fuse(e, e, params, "efaba.ecd1").data)

    def test_composition(self, params, rng):
        e, f = rng.standard_normal((2, 8, 4, 4)), rng.standard_normal((2, 8, 4, 4))
        want = cbr_np(conv_np(e, params, "efaba.ecd1.refine") + f, params, "efaba.ecd1.fuse")
        got = efaba.edge_fuse(Tensor(e), Tensor(f), params, "efaba.ecd1").data
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


class TestEdgeAttention:
    def test_range_and_shape(self, params, rng):
        a = efaba.edge_attention(Tensor(rng.standard_normal((2, 1, 8, 8))),
                                 Tensor(rng.standard_normal((2, 1, 4, 4))), params)
        assert a.shape == (2, 1, 8, 8)
        assert np.all((a.data > 0) & (a.data < 1))

    def test_zero_inputs_give_half(self, params):
        params["efaba.att.out.bias"].data[:] = 0
        for name in ("branch1", "branch2"):
            params[f"efaba.att.{name}.bn.beta"].data[:] = 0
            params[f"efaba.att.{name}.conv.bias"].data[:] = 0
        a = efaba.edge_attention(Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 4, 4))), params)
        np.testing.assert_array_equal(a.data, 0.5)

    def test_composition(self, params, rng):
        e1, e2 = rng.standard_normal((2, 1, 8, 8)), rng.standard_normal((2, 1, 4, 4))
        b1 = cbr_np(e1, params, "efaba.att.branch1")
        b2 = cbr_np(oracles.bilinear_loop(e2, 8, 8), params, "efaba.att.branch2")
        want = sig(conv_np(np.concatenate([b1, b2], 1), params, "efaba.att.out"))
        got = efaba.edge_attention(Tensor(e1), Tensor(e2), params).data
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)

    def test_extent_ratio_checked(self, params, rng):
        with pytest.raises(ShapeError):
            efaba.edge_attention(Tensor(rng.random((1, 1, 8, 8))), Tensor(rng.random((1, 1, 3, 3))), params)


class TestSpatialAttention:
    def test_zero_feature_gives_sigmoid_bias(self, params, rng):
        att = Tensor(rng.random((1, 1, 8, 8)))
        sat = efaba.spatial_attention(att, Tensor(np.zeros((1, 16, 4, 4))), params, "efaba.faba2")
        np.testing.assert_allclose(sat.data, sig(params["efaba.faba2.sa.bias"].data[0]), rtol=0, atol=1e-15)

    def test_composition_with_resize(self, params, rng):
        att, f = rng.random((2, 1, 16, 16)), rng.standard_normal((2, 16, 8, 8))
        x = oracles.bilinear_loop(att, 8, 8) * f
        want = sig(conv_np(oracles.channel_max_loop(x), params, "efaba.faba2.sa"))
        got = efaba.spatial_attention(Tensor(att), Tensor(f), params, "efaba.faba2").data
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
        assert got.shape == (2, 1, 8, 8)


class TestBalance:
    def test_gate_off_reduces_to_products(self, params, rng):
        sat, f = rng.random((1, 1, 4, 4)), rng.standard_normal((1, 40, 4, 4))
        got = efaba.faba_balance(Tensor(sat), Tensor(f), params, "efaba.faba3", force_gate_ones=True).data
        np.testing.assert_allclose(got, f * ((sat + 1) * f), rtol=0, atol=1e-15)

    def test_zero_feature(self, params, rng):
        got = efaba.faba_balance(Tensor(rng.random((1, 1, 4, 4))), Tensor(np.zeros((1, 40, 4, 4))),
                                 params, "efaba.faba3")
        assert not np.any(got.data)

    def test_composition(self, params, rng):
        sat, f = rng.random((2, 1, 4, 4)), rng.standard_normal((2, 40, 4, 4))
        x = (sat + 1) * f
        z = x.mean(axis=(2, 3))
        p = {k: params[f"efaba.faba3.ct.{k}"].data for k in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias")}
        gate = sig(np.maximum(z @ p["fc1.weight"].T + p["fc1.bias"], 0) @ p["fc2.weight"].T + p["fc2.bias"])
        want = f * (x * gate[:, :, None, None])
        got = efaba.faba_balance(Tensor(sat), Tensor(f), params, "efaba.faba3").data
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


class TestForward:
    def test_shapes_preserved(self, params, pyramid):
        out = efaba.efaba_forward(*pyramid, params)
        assert [t.shape for t in out.features] == [t.shape for t in pyramid]
        assert out.edge.shape == (2, 1, 16, 16)
        assert np.all((out.edge.data > 0) & (out.edge.data < 1))

    def test_zero_input_zero_output(self, params):
        zeros = [Tensor(np.zeros((1, c, s, s))) for c, s in zip(CHANNELS, (16, 8, 4))]
        assert all(not np.any(t.data) for t in efaba.efaba_forward(*zeros, params).features)

    def test_zero_wherever_feature_is_zero(self, params, pyramid, rng):
        masked = []
        for t in pyramid:
            d = t.data.copy()
            d[rng.random(d.shape) < 0.3] = 0
            masked.append(Tensor(d))
        for f, F in zip(masked, efaba.efaba_forward(*masked, params).features):
            assert not np.any(F.data[f.data == 0])

    def test_without_edge_detector(self, rng):
        P = ParamStore()
        efaba.init_efaba(Initializer(P, rng), CHANNELS, use_ecd=False)
        assert not any(".ecd" in n or ".att." in n for n in P)
        feats = tuple(Tensor(rng.standard_normal((1, c, s, s))) for c, s in zip(CHANNELS, (16, 8, 4)))
        out = efaba.efaba_forward(*feats, P, use_ecd=False)
        assert out.edge is None

    def test_pyramid_violation(self, params, pyramid):
        with pytest.raises(ShapeError):
            efaba.efaba_forward(pyramid[0], pyramid[0], pyramid[2], params)
