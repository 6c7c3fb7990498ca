"""Layer-patch-wise cross attention: one text-conditioned gate per (layer, patch)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import ConditioningParams, TextEmbeddings, project_queries, token_importance
from .errors import EmptyInput, InconsistentLayerShapes, ShapeMismatch
from .numerics import Tensor, as_tensor, layer_norm, reshape, softmax
from .stage import KeyNormParams, aggregate_tokens, cross_scores

GATES = ("raw", "softmax")


@dataclass(frozen=True)
class VisualStack:
    """Per-layer patch embeddings held as one (L, N, d) tensor."""

    layers: Tensor

    def __post_init__(self):
        t = as_tensor(self.layers)
        if t.ndim != 3:
            raise InconsistentLayerShapes(f"visual stack must be (L, N, d), got {t.shape}")
        object.__setattr__(self, "layers", t)

    @classmethod
    def from_layers(cls, layers) -> "VisualStack":
        arrs = [np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in layers]
        if not arrs:
            raise EmptyInput("visual stack needs at least one layer")
        shapes = {a.shape for a in arrs}
        if len(shapes) != 1 or arrs[0].ndim != 2:
            raise InconsistentLayerShapes(f"layers must share one (N, d) shape, got {sorted(shapes)}")
        return cls(Tensor(np.stack(arrs)))

    @property
    def L(self) -> int:
        return self.layers.shape[0]

    @property
    def N(self) -> int:
        return self.layers.shape[1]

    @property
    def d(self) -> int:
        return self.layers.shape[2]

    @property
    def last(self) -> Tensor:
        return self.layers[self.L - 1]


@dataclass(frozen=True)
class StackedFeatures:
    """Layer-major token sequence: row l*N + i is patch i of layer l."""

    tokens: Tensor
    L: int
    N: int


class LpwcaParams(KeyNormParams):
    pass


def stack_layers(vs: VisualStack) -> StackedFeatures:
    return StackedFeatures(reshape(vs.layers, (vs.L * vs.N, vs.d)), vs.L, vs.N)


def unstack_layers(fs: StackedFeatures) -> VisualStack:
    return VisualStack(reshape(fs.tokens, (fs.L, fs.N, fs.tokens.shape[1])))


def lpwca_scores(q: Tensor, fs: StackedFeatures, params: LpwcaParams) -> Tensor:
    """Scaled dot-product scores of every text query against every patch-layer token."""
    return cross_scores(q, fs.tokens, params.w_k)


def aggregate_map(alpha: Tensor, scores: Tensor, L: int, N: int) -> Tensor:
    """Collapse the token axis with ``alpha`` and fold to an (L, N) map."""
    if scores.shape[1] != L * N:
        raise ShapeMismatch(f"scores {scores.shape} do not cover {L}x{N} tokens")
    return reshape(aggregate_tokens(alpha, scores), (L, N))


def lpwca_forward(text: TextEmbeddings, vs: VisualStack, cond: ConditioningParams,
                  params: LpwcaParams, alpha: Tensor | None = None,
                  eps: float = 1e-5, gate: str = "raw"):
    """Return (F_lp of shape (L, N, d), W_lp of shape (L, N)).

    Each token f becomes LN(f * W_lp[l, i] + f). ``gate="softmax"`` first
    normalizes the map over all L*N positions; the default applies it raw.
    """
    if gate not in GATES:
        raise ValueError(f"unknown gate {gate!r}; expected one of {GATES}")
    if vs.d != text.d:
        raise ShapeMismatch(f"visual width {vs.d} != text width {text.d}")
    if alpha is None:
        alpha = token_importance(text, cond)
    fs = stack_layers(vs)
    q = project_queries(text, cond.w_q_lp)
    w_lp = aggregate_map(alpha, lpwca_scores(q, fs, params), vs.L, vs.N)
    gate_map = w_lp
    if gate == "softmax":
        gate_map = reshape(softmax(reshape(w_lp, (vs.L * vs.N,))), (vs.L, vs.N))
    g = reshape(gate_map, (vs.L * vs.N, 1))
    f = fs.tokens
    out = layer_norm(f * g + f, params.gamma, params.beta, eps)
    return reshape(out, (vs.L, vs.N, vs.d)), w_lp
