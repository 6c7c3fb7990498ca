"""Token importance weights and per-stage text queries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, ShapeMismatch
from .numerics import Tensor, as_tensor, matmul, softmax


@dataclass(frozen=True)
class TextEmbeddings:
    """Query token embeddings, shape (T, d)."""

    tokens: Tensor

    def __post_init__(self):
        t = as_tensor(self.tokens)
        if t.ndim != 2:
            raise ShapeMismatch(f"text embeddings must be (T, d), got {t.shape}")
        if t.shape[0] < 1:
            raise EmptyInput("text needs at least one token")
        object.__setattr__(self, "tokens", t)

    @property
    def T(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class ConditioningParams:
    w_q_sa: Tensor
    w_k_sa: Tensor
    w_v_sa: Tensor
    w_s: Tensor
    w_q_lp: Tensor
    w_q_l: Tensor
    w_q_p: Tensor

    @property
    def d_hidden(self) -> int:
        return self.w_s.shape[0]


def project_queries(text: TextEmbeddings, W: Tensor) -> Tensor:
    """Q = F_t @ W, shape (T, d_hidden)."""
    if W.ndim != 2 or W.shape[0] != text.d:
        raise ShapeMismatch(f"query projection {W.shape} does not accept width {text.d}")
    return matmul(text.tokens, W)


def token_importance(text: TextEmbeddings, params: ConditioningParams) -> Tensor:
    """Softmax distribution over tokens from one head of self-attention.

    The contextualized tokens C = softmax(Q K^T / sqrt(d_hidden)) V are
    reduced to one logit each by the score head ``w_s``.
    """
    F = text.tokens
    for name in ("w_q_sa", "w_k_sa", "w_v_sa"):
        W = getattr(params, name)
        if W.ndim != 2 or W.shape[0] != text.d or W.shape[1] != params.d_hidden:
            raise ShapeMismatch(f"{name} has shape {W.shape}, expected ({text.d}, {params.d_hidden})")
    q = matmul(F, params.w_q_sa)
    k = matmul(F, params.w_k_sa)
    v = matmul(F, params.w_v_sa)
    attn = softmax(matmul(q, k.T) * (1.0 / math.sqrt(params.d_hidden)))
    context = matmul(attn, v)
    return softmax(matmul(context, params.w_s))


def init_conditioning(d: int, d_hidden: int, rng: np.random.Generator,
                      tie_queries: bool = False, zero_score_head: bool = True) -> ConditioningParams:
    bound = 1.0 / math.sqrt(d)

    def proj():
        return Tensor(rng.uniform(-bound, bound, size=(d, d_hidden)), requires_grad=True)

    w_q_sa, w_k_sa, w_v_sa = proj(), proj(), proj()
    if zero_score_head:
        w_s = Tensor(np.zeros(d_hidden), requires_grad=True)
    else:
        w_s = Tensor(rng.uniform(-bound, bound, size=d_hidden), requires_grad=True)
    w_q_lp = proj()
    if tie_queries:
        w_q_l = w_q_p = w_q_lp
    else:
        w_q_l, w_q_p = proj(), proj()
    return ConditioningParams(w_q_sa, w_k_sa, w_v_sa, w_s, w_q_lp, w_q_l, w_q_p)
