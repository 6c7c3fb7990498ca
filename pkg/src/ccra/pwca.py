"""Patch-wise cross attention: a (1 + w_p) gate per patch."""

from __future__ import annotations

from .errors import ShapeMismatch
from .numerics import Tensor, layer_norm, reshape
from .stage import KeyNormParams, aggregate_tokens, cross_scores


class PwcaParams(KeyNormParams):
    pass


def patch_weights(q: Tensor, f_sem: Tensor, alpha: Tensor, params: PwcaParams) -> Tensor:
    return aggregate_tokens(alpha, cross_scores(q, f_sem, params.w_k))


def regional_modulate(f_sem: Tensor, wp: Tensor, params: PwcaParams, eps: float = 1e-5) -> Tensor:
    """Row i -> LN(f_sem[i] * (1 + wp[i])). No additive residual."""
    N = f_sem.shape[0]
    if wp.shape != (N,):
        raise ShapeMismatch(f"patch weights {wp.shape} do not match {N} patches")
    gate = reshape(wp + 1.0, (N, 1))
    return layer_norm(f_sem * gate, params.gamma, params.beta, eps)


def pwca_forward(q: Tensor, f_sem: Tensor, alpha: Tensor, params: PwcaParams, eps: float = 1e-5):
    """Return (F_regional, w_p)."""
    wp = patch_weights(q, f_sem, alpha, params)
    return regional_modulate(f_sem, wp, params, eps), wp
