import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from ccra.errors import KernelTooLarge, ShapeMismatch
from ccra.lwca import (
    LwcaParams,
    default_sigma,
    layer_descriptors,
    layer_weights,
    lwca_forward,
    semantic_aggregate,
    smooth_layer_weights,
)
from ccra.numerics import Tensor, layer_norm, softmax, total
from ccra.stage import init_key_norm

from gradutil import max_rel_error


def tv(p):
    return float(np.abs(np.diff(p)).sum())


def lwca_params(d, dh, seed, affine=True):
    rng = np.random.default_rng(seed)
    p = init_key_norm(LwcaParams, d, dh, rng)
    if not affine:
        return p
    return LwcaParams(p.w_k, Tensor(1 + 0.2 * rng.standard_normal(d)), Tensor(0.2 * rng.standard_normal(d)))


class TestDescriptors:
    def test_identical_patches(self):
        p = np.array([0.5, -1.0, 2.0])
        out = layer_descriptors(Tensor(np.tile(p, (2, 4, 1)))).data
        np.testing.assert_allclose(out, [p, p], atol=1e-15)

    def test_two_patches(self):
        np.testing.assert_array_equal(layer_descriptors(Tensor([[[1.0, 0.0], [0.0, 1.0]]])).data, [[0.5, 0.5]])

    def test_single_patch(self):
        x = np.random.default_rng(0).standard_normal((3, 1, 4))
        np.testing.assert_array_equal(layer_descriptors(Tensor(x)).data, x[:, 0])

    def test_needs_three_axes(self):
        with pytest.raises(ShapeMismatch):
            layer_descriptors(Tensor(np.ones((2, 3))))


class TestLayerWeights:
    def test_zero_queries(self):
        p = lwca_params(3, 4, 0)
        out = layer_weights(Tensor(np.zeros((2, 4))), Tensor(np.ones((5, 3))), Tensor([0.5, 0.5]), p)
        np.testing.assert_array_equal(out.data, np.zeros(5))

    def test_identical_descriptors(self):
        rng = np.random.default_rng(1)
        ld = np.tile(rng.standard_normal(3), (4, 1))
        out = layer_weights(Tensor(rng.standard_normal((2, 4))), Tensor(ld), Tensor([0.3, 0.7]), lwca_params(3, 4, 1))
        np.testing.assert_allclose(out.data, np.full(4, out.data[0]), atol=1e-15)

    def test_against_double_loop(self):
        rng = np.random.default_rng(2)
        T, L, d, dh = 2, 3, 4, 5
        q, ld, alpha = rng.standard_normal((T, dh)), rng.standard_normal((L, d)), rng.dirichlet(np.ones(T))
        p = lwca_params(d, dh, 2)
        K = ld @ p.w_k.data
        expected = [sum(alpha[t] * sum(q[t, h] * K[l, h] for h in range(dh)) / np.sqrt(dh) for t in range(T))
                    for l in range(L)]
        np.testing.assert_allclose(layer_weights(Tensor(q), Tensor(ld), Tensor(alpha), p).data, expected, atol=1e-12)


class TestSmoothing:
    def test_constant_logits_uniform(self):
        out = smooth_layer_weights(Tensor(np.full(6, 2.5)), 5).data
        np.testing.assert_allclose(out, np.full(6, 1 / 6), atol=1e-15)

    def test_unit_kernel_is_softmax(self):
        w = Tensor(np.random.default_rng(3).standard_normal(5))
        np.testing.assert_array_equal(smooth_layer_weights(w, 1).data, softmax(w).data)

    @pytest.mark.parametrize("peak", [0, 2, 4])
    def test_single_large_logit(self, peak):
        w = np.zeros(5)
        w[peak] = 8.0
        out = smooth_layer_weights(Tensor(w), 3, 1.0).data
        expected = oracle.smooth(oracle.softmax(w.tolist()), [0.274069, 0.451863, 0.274069])
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_kernel_too_large(self):
        with pytest.raises(KernelTooLarge):
            smooth_layer_weights(Tensor([0.0, 1.0]), 5)

    def test_default_sigma(self):
        assert default_sigma(5) == pytest.approx(5 / 3)

    @pytest.mark.parametrize("order", ["softmax_first", "logits_first"])
    @settings(max_examples=100, deadline=None)
    @given(L=st.integers(1, 12), half=st.integers(0, 5), seed=st.integers(0, 2**32 - 1),
           scale=st.floats(0.01, 20.0))
    def test_probability_vector(self, order, L, half, seed, scale):
        k = 2 * min(half, L - 1) + 1
        w = scale * np.random.default_rng(seed).standard_normal(L)
        out = smooth_layer_weights(Tensor(w), k, order=order).data
        assert out.min() >= 0 and abs(out.sum() - 1) < 1e-10

    @settings(max_examples=200, deadline=None)
    @given(L=st.integers(1, 12), half=st.integers(0, 5), seed=st.integers(0, 2**32 - 1),
           scale=st.floats(0.01, 20.0), sigma=st.floats(0.1, 5.0))
    def test_total_variation_never_increases(self, L, half, seed, scale, sigma):
        k = 2 * min(half, L - 1) + 1
        w = Tensor(scale * np.random.default_rng(seed).standard_normal(L))
        assert tv(smooth_layer_weights(w, k, sigma).data) <= tv(softmax(w).data) + 1e-12

    def test_not_invariant_to_layer_order(self):
        w = np.array([3.0, 0.0, 0.0, 2.5, 0.0, 1.0])
        perm = np.array([3, 0, 5, 1, 4, 2])
        direct = smooth_layer_weights(Tensor(w), 3).data
        permuted = smooth_layer_weights(Tensor(w[perm]), 3).data
        unpermuted = np.empty(6)
        unpermuted[perm] = permuted
        assert np.abs(unpermuted - direct).max() > 1e-3

    def test_unknown_order(self):
        with pytest.raises(ValueError):
            smooth_layer_weights(Tensor([0.0, 1.0]), 1, order="sideways")


class TestSemanticAggregate:
    def test_single_layer(self):
        x = np.random.default_rng(4).standard_normal((1, 3, 4))
        p = lwca_params(4, 2, 4)
        expected = layer_norm(Tensor(x[0] + x[0].mean(axis=0)), p.gamma, p.beta).data
        np.testing.assert_allclose(semantic_aggregate(Tensor(x), Tensor([1.0]), p).data, expected, atol=1e-15)

    def test_zeros(self):
        p = lwca_params(3, 2, 0, affine=False)
        out = semantic_aggregate(Tensor(np.zeros((2, 4, 3))), Tensor([0.5, 0.5]), p).data
        np.testing.assert_array_equal(out, np.zeros((4, 3)))

    def test_against_loop(self):
        rng = np.random.default_rng(5)
        L, N, d = 3, 2, 2
        f, w = rng.standard_normal((L, N, d)), rng.dirichlet(np.ones(L))
        p = lwca_params(d, 3, 5)
        f_hat = [[sum(w[l] * f[l, i, j] for l in range(L)) for j in range(d)] for i in range(N)]
        m = [sum(f_hat[i][j] for i in range(N)) / N for j in range(d)]
        g, b = p.gamma.data.tolist(), p.beta.data.tolist()
        expected = [oracle.layer_norm([f_hat[i][j] + m[j] for j in range(d)], g, b, 1e-5) for i in range(N)]
        np.testing.assert_allclose(semantic_aggregate(Tensor(f), Tensor(w), p).data, expected, atol=1e-12)

    def test_weight_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            semantic_aggregate(Tensor(np.ones((2, 2, 2))), Tensor([1.0]), lwca_params(2, 2, 0))


class TestForward:
    def test_returns_layer_weights(self):
        rng = np.random.default_rng(6)
        f = Tensor(rng.standard_normal((4, 3, 2)))
        _, lw = lwca_forward(Tensor(rng.standard_normal((2, 3))), f, Tensor([0.4, 0.6]), lwca_params(2, 3, 6), 3)
        assert lw.k == 3 and lw.sigma == 1.0
        assert lw.raw.shape == lw.smoothed.shape == (4,)

    def test_gradient(self):
        rng = np.random.default_rng(7)
        q, f, alpha = rng.standard_normal((2, 3)), rng.standard_normal((4, 3, 2)), rng.dirichlet(np.ones(2))
        p = lwca_params(2, 3, 7)
        target = rng.standard_normal((3, 2))

        def loss(q, f, alpha, wk, gamma, beta):
            out, _ = lwca_forward(q, f, alpha, LwcaParams(wk, gamma, beta), 3)
            return total(out * target)

        assert max_rel_error(loss, [q, f, alpha, p.w_k, p.gamma, p.beta]) < 1e-4
