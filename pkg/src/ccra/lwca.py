"""Layer-wise cross attention with Gaussian smoothing across depth."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import KernelTooLarge, ShapeMismatch
from .numerics import (
    Tensor,
    avg_pool_rows,
    conv1d_reflect,
    gaussian_kernel,
    layer_norm,
    matmul,
    reshape,
    softmax,
)
from .stage import KeyNormParams, aggregate_tokens, cross_scores

SMOOTH_ORDERS = ("softmax_first", "logits_first")


class LwcaParams(KeyNormParams):
    pass


@dataclass(frozen=True)
class LayerWeights:
    raw: Tensor
    smoothed: Tensor
    k: int
    sigma: float


def default_sigma(k: int) -> float:
    return k / 3.0


def layer_descriptors(f_lp: Tensor) -> Tensor:
    """Spatial mean of every layer: (L, N, d) -> (L, d)."""
    if f_lp.ndim != 3:
        raise ShapeMismatch(f"expected (L, N, d) features, got {f_lp.shape}")
    return avg_pool_rows(f_lp)


def layer_weights(q: Tensor, ld: Tensor, alpha: Tensor, params: LwcaParams) -> Tensor:
    """Raw per-layer logits alpha^T (q K(ld)^T / sqrt(d_hidden))."""
    return aggregate_tokens(alpha, cross_scores(q, ld, params.w_k))


def smooth_layer_weights(w: Tensor, k: int, sigma: float | None = None,
                         order: str = "softmax_first") -> Tensor:
    """Probability vector over layers, smoothed along depth.

    ``softmax_first`` convolves softmax(w); ``logits_first`` convolves the
    logits and applies softmax afterwards.
    """
    if order not in SMOOTH_ORDERS:
        raise ValueError(f"unknown smoothing order {order!r}")
    L = w.shape[0]
    if k > 2 * L - 1:
        raise KernelTooLarge(f"kernel size {k} too large for {L} layers")
    g = gaussian_kernel(k, default_sigma(k) if sigma is None else sigma)
    if order == "softmax_first":
        return conv1d_reflect(softmax(w), g)
    return softmax(conv1d_reflect(w, g))


def semantic_aggregate(f_lp: Tensor, w_hat: Tensor, params: LwcaParams, eps: float = 1e-5) -> Tensor:
    """LN(F_hat + mean_patches(F_hat)) with F_hat = sum_l w_hat[l] * f_lp[l]."""
    L, N, d = f_lp.shape
    if w_hat.shape != (L,):
        raise ShapeMismatch(f"layer weights {w_hat.shape} do not match {L} layers")
    f_hat = reshape(matmul(w_hat, reshape(f_lp, (L, N * d))), (N, d))
    pooled = avg_pool_rows(f_hat)
    return layer_norm(f_hat + pooled, params.gamma, params.beta, eps)


def lwca_forward(q: Tensor, f_lp: Tensor, alpha: Tensor, params: LwcaParams,
                 k: int, sigma: float | None = None, eps: float = 1e-5,
                 order: str = "softmax_first"):
    """Return (F_semantic, LayerWeights)."""
    sigma = default_sigma(k) if sigma is None else sigma
    raw = layer_weights(q, layer_descriptors(f_lp), alpha, params)
    smoothed = smooth_layer_weights(raw, k, sigma, order)
    return semantic_aggregate(f_lp, smoothed, params, eps), LayerWeights(raw, smoothed, k, sigma)
