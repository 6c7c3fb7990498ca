"""Pieces shared by the three cross-attention stages."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .numerics import Tensor, matmul


@dataclass(frozen=True)
class KeyNormParams:
    """Key projection (d, d_hidden) plus the stage's layer-norm affine."""

    w_k: Tensor
    gamma: Tensor
    beta: Tensor


def init_key_norm(cls, d, d_hidden, rng: np.random.Generator, norm=None):
    bound = 1.0 / math.sqrt(d)
    w_k = Tensor(rng.uniform(-bound, bound, size=(d, d_hidden)), requires_grad=True)
    if norm is None:
        gamma = Tensor(np.ones(d), requires_grad=True)
        beta = Tensor(np.zeros(d), requires_grad=True)
    else:
        gamma, beta = norm
    return cls(w_k, gamma, beta)


def cross_scores(q: Tensor, feats: Tensor, w_k: Tensor) -> Tensor:
    """(1/sqrt(d_hidden)) q (feats w_k)^T, shape (T, rows of feats)."""
    if feats.ndim != 2 or w_k.shape[0] != feats.shape[1]:
        raise ShapeMismatch(f"key projection {w_k.shape} cannot project features {feats.shape}")
    if q.ndim != 2 or q.shape[1] != w_k.shape[1]:
        raise ShapeMismatch(f"queries {q.shape} do not match key width {w_k.shape[1]}")
    keys = matmul(feats, w_k)
    return matmul(q, keys.T) * (1.0 / math.sqrt(w_k.shape[1]))


def aggregate_tokens(alpha: Tensor, scores: Tensor) -> Tensor:
    """alpha^T scores: importance-weighted sum of per-token score rows."""
    if alpha.ndim != 1 or scores.ndim != 2 or alpha.shape[0] != scores.shape[0]:
        raise ShapeMismatch(f"weights {alpha.shape} cannot aggregate scores {scores.shape}")
    return matmul(alpha, scores)
