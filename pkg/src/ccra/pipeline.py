"""Progressive attention integration and everything wrapped around it.

The forward path is alpha -> LPWCA -> LWCA -> PWCA -> fuse -> project ->
toy decoder. The two alternative orderings (``decoupled``, ``shuffled``)
reuse the same stage functions.
"""

from __future__ import annotations

import contextlib
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .conditioning import ConditioningParams, TextEmbeddings, init_conditioning, project_queries, token_importance
from .errors import CcraError, ConfigError, EmptyInput, NonFiniteLoss, ShapeMismatch, StageError, UnknownVariant
from .lpwca import GATES, LpwcaParams, VisualStack, lpwca_forward
from .lwca import SMOOTH_ORDERS, LwcaParams, default_sigma, lwca_forward
from .numerics import (
    Tensor,
    backward,
    concat,
    cross_entropy,
    finite_difference,
    layer_norm,
    matmul,
    mean,
    no_grad,
    reshape,
)
from .pwca import PwcaParams, patch_weights, pwca_forward, regional_modulate
from .stage import aggregate_tokens, cross_scores, init_key_norm

VARIANTS = ("pai", "decoupled", "shuffled")
GROUPS = ("conditioning", "lpwca", "lwca", "pwca", "projection")


@dataclass(frozen=True)
class CcraConfig:
    L: int = 6
    N: int = 9
    d: int = 8
    T: int = 4
    d_hidden: int = 128
    d_llm: int = 8
    V: int = 10
    k: int = 5
    sigma: float | None = None  # None -> k / 3
    seed: int = 0
    variant: str = "pai"
    ln_eps: float = 1e-5
    lp_gate: str = "raw"
    smooth_order: str = "softmax_first"
    tie_queries: bool = False
    tie_norms: bool = False

    def __post_init__(self):
        for name in ("L", "N", "d", "T", "d_hidden", "d_llm", "V", "k"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.k % 2 == 0:
            raise ConfigError(f"k must be odd, got {self.k}")
        if self.k > 2 * self.L - 1:
            raise ConfigError(f"k={self.k} exceeds 2L-1={2 * self.L - 1}")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must fit an unsigned 64-bit integer, got {self.seed}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.ln_eps > 0:
            raise ConfigError("ln_eps must be positive")
        if self.lp_gate not in GATES:
            raise ConfigError(f"lp_gate must be one of {GATES}")
        if self.smooth_order not in SMOOTH_ORDERS:
            raise ConfigError(f"smooth_order must be one of {SMOOTH_ORDERS}")

    @property
    def kernel_sigma(self) -> float:
        return default_sigma(self.k) if self.sigma is None else float(self.sigma)

    def replace(self, **changes) -> "CcraConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class CcraParams:
    conditioning: ConditioningParams
    lpwca: LpwcaParams
    lwca: LwcaParams
    pwca: PwcaParams
    w_proj: Tensor
    b_proj: Tensor
    w_dec: Tensor
    text_proj: Tensor | None = None

    def grouped(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Trainable tensors per group in a stable order; tied tensors appear once."""
        seen: set[int] = set()
        out: dict[str, list[tuple[str, Tensor]]] = {}
        for group in GROUPS:
            if group == "projection":
                items = [("w_proj", self.w_proj), ("b_proj", self.b_proj)]
            else:
                obj = getattr(self, group)
                items = [(f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj)]
            out[group] = []
            for name, t in items:
                if id(t) in seen:
                    continue
                seen.add(id(t))
                out[group].append((f"{group}.{name}", t))
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [item for items in self.grouped().values() for item in items]

    def replace_values(self, values: dict) -> "CcraParams":
        """Copy with tensors swapped for new arrays, keyed by ``id(tensor)``.

        Ties survive: every reference to a replaced tensor receives the same
        new tensor.
        """
        memo: dict[int, Tensor] = {}

        def swap(t):
            if t is None or id(t) not in values:
                return t
            if id(t) not in memo:
                memo[id(t)] = Tensor(values[id(t)], requires_grad=t.requires_grad)
            return memo[id(t)]

        def rebuild(obj):
            return type(obj)(**{f.name: swap(getattr(obj, f.name)) for f in dataclasses.fields(obj)})

        return CcraParams(
            rebuild(self.conditioning), rebuild(self.lpwca), rebuild(self.lwca), rebuild(self.pwca),
            swap(self.w_proj), swap(self.b_proj), self.w_dec, self.text_proj,
        )


@dataclass(frozen=True)
class ForwardTrace:
    alpha: Tensor
    W_lp: Tensor
    w_l_raw: Tensor
    w_l_smoothed: Tensor
    w_p: Tensor
    F_lp: Tensor
    F_semantic: Tensor
    F_regional: Tensor
    F_fused: Tensor
    projected: Tensor
    logits: Tensor
    variant: str = "pai"
    # shuffled only: per-layer patch gates, shape (L, N)
    w_p_layers: Tensor | None = field(default=None)

    FIELDS = ("alpha", "W_lp", "w_l_raw", "w_l_smoothed", "w_p", "F_lp",
              "F_semantic", "F_regional", "F_fused", "projected", "logits")

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name).data for name in self.FIELDS}


# ------------------------------------------------------------- construction


def init_params(cfg: CcraConfig, seed: int | None = None, zero_score_head: bool = True) -> CcraParams:
    """Seeded parameters: projections ~ U[-1/sqrt(d), 1/sqrt(d)], LN at identity."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d, dh = cfg.d, cfg.d_hidden
    cond = init_conditioning(d, dh, rng, tie_queries=cfg.tie_queries, zero_score_head=zero_score_head)
    lp = init_key_norm(LpwcaParams, d, dh, rng)
    shared = (lp.gamma, lp.beta) if cfg.tie_norms else None
    lw = init_key_norm(LwcaParams, d, dh, rng, norm=shared)
    pw = init_key_norm(PwcaParams, d, dh, rng, norm=shared)
    bound = 1.0 / math.sqrt(2 * d)
    w_proj = Tensor(rng.uniform(-bound, bound, size=(2 * d, cfg.d_llm)), requires_grad=True)
    b_proj = Tensor(rng.uniform(-bound, bound, size=cfg.d_llm), requires_grad=True)
    # frozen stand-ins for the language model and text encoder
    w_dec = Tensor(rng.normal(0.0, 1.0, size=(cfg.d_llm, cfg.V)))
    text_proj = None
    if d != cfg.d_llm:
        text_proj = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, cfg.d_llm)))
    return CcraParams(cond, lp, lw, pw, w_proj, b_proj, w_dec, text_proj)


def synth_inputs(cfg: CcraConfig, seed: int | None = None):
    """Standard-normal text and visual features plus a target token id."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    text = TextEmbeddings(Tensor(rng.standard_normal((cfg.T, cfg.d))))
    vs = VisualStack(Tensor(rng.standard_normal((cfg.L, cfg.N, cfg.d))))
    target = int(rng.integers(cfg.V))
    return text, vs, target


# ------------------------------------------------------------------- stages


@contextlib.contextmanager
def _stage(name):
    try:
        yield
    except StageError:
        raise
    except CcraError as exc:
        raise StageError(name, exc) from exc


def fuse(f_reg: Tensor, f_last: Tensor) -> Tensor:
    """Row-wise [f_reg, f_last] concatenation, shape (N, 2d)."""
    if f_reg.shape != f_last.shape:
        raise ShapeMismatch(f"cannot fuse {f_reg.shape} with {f_last.shape}")
    return concat([f_reg, f_last], axis=1)


def project_visual(fused: Tensor, params: CcraParams) -> Tensor:
    if fused.ndim != 2 or fused.shape[1] != params.w_proj.shape[0]:
        raise ShapeMismatch(f"fused tokens {fused.shape} do not fit projection {params.w_proj.shape}")
    return matmul(fused, params.w_proj) + params.b_proj


def decode(text: TextEmbeddings, projected: Tensor, params: CcraParams) -> Tensor:
    """Toy decoder: mean over [text; visual] tokens, then a frozen linear map to V logits."""
    ft = text.tokens if params.text_proj is None else matmul(text.tokens, params.text_proj)
    pooled = mean(concat([ft, projected], axis=0), axis=0)
    return matmul(pooled, params.w_dec)


def _check_inputs(text: TextEmbeddings, vs: VisualStack, cfg: CcraConfig):
    if (vs.L, vs.N, vs.d) != (cfg.L, cfg.N, cfg.d):
        raise ShapeMismatch(f"visual stack shape {vs.layers.shape} != config ({cfg.L}, {cfg.N}, {cfg.d})")
    if text.d != cfg.d:
        raise ShapeMismatch(f"text width {text.d} != config d={cfg.d}")


def _finish(text, vs, params, **stages) -> ForwardTrace:
    with _stage("fuse"):
        fused = fuse(stages["F_regional"], vs.last)
    with _stage("project"):
        projected = project_visual(fused, params)
    with _stage("decode"):
        logits = decode(text, projected, params)
    return ForwardTrace(F_fused=fused, projected=projected, logits=logits, **stages)


def _forward_pai(text, vs, params, cfg):
    cond = params.conditioning
    with _stage("conditioning"):
        alpha = token_importance(text, cond)
    with _stage("lpwca"):
        f_lp, w_lp = lpwca_forward(text, vs, cond, params.lpwca, alpha=alpha, eps=cfg.ln_eps, gate=cfg.lp_gate)
    with _stage("lwca"):
        q_l = project_queries(text, cond.w_q_l)
        f_sem, lw = lwca_forward(q_l, f_lp, alpha, params.lwca, cfg.k, cfg.kernel_sigma,
                                 cfg.ln_eps, cfg.smooth_order)
    with _stage("pwca"):
        q_p = project_queries(text, cond.w_q_p)
        f_reg, wp = pwca_forward(q_p, f_sem, alpha, params.pwca, cfg.ln_eps)
    return _finish(text, vs, params, alpha=alpha, W_lp=w_lp, w_l_raw=lw.raw, w_l_smoothed=lw.smoothed,
                   w_p=wp, F_lp=f_lp, F_semantic=f_sem, F_regional=f_reg, variant="pai")


def _forward_decoupled(text, vs, params, cfg):
    # No LPWCA. LWCA and PWCA both read the raw stack and are averaged.
    cond = params.conditioning
    raw = vs.layers
    L, N, d = raw.shape
    with _stage("conditioning"):
        alpha = token_importance(text, cond)
    with _stage("lwca"):
        q_l = project_queries(text, cond.w_q_l)
        f_sem, lw = lwca_forward(q_l, raw, alpha, params.lwca, cfg.k, cfg.kernel_sigma,
                                 cfg.ln_eps, cfg.smooth_order)
    with _stage("pwca"):
        q_p = project_queries(text, cond.w_q_p)
        key_feats = reshape(matmul(lw.smoothed, reshape(raw, (L, N * d))), (N, d))
        wp = patch_weights(q_p, key_feats, alpha, params.pwca)
        f_patch = regional_modulate(mean(raw, axis=0), wp, params.pwca, cfg.ln_eps)
    f_reg = (f_sem + f_patch) * 0.5
    return _finish(text, vs, params, alpha=alpha, W_lp=Tensor(np.zeros((L, N))), w_l_raw=lw.raw,
                   w_l_smoothed=lw.smoothed, w_p=wp, F_lp=raw, F_semantic=f_sem, F_regional=f_reg,
                   variant="decoupled")


def _forward_shuffled(text, vs, params, cfg):
    # LPWCA -> PWCA (gating every layer separately) -> LWCA.
    cond = params.conditioning
    L, N, d = vs.L, vs.N, vs.d
    with _stage("conditioning"):
        alpha = token_importance(text, cond)
    with _stage("lpwca"):
        f_lp, w_lp = lpwca_forward(text, vs, cond, params.lpwca, alpha=alpha, eps=cfg.ln_eps, gate=cfg.lp_gate)
    with _stage("pwca"):
        q_p = project_queries(text, cond.w_q_p)
        flat = reshape(f_lp, (L * N, d))
        wp_layers = reshape(aggregate_tokens(alpha, cross_scores(q_p, flat, params.pwca.w_k)), (L, N))
        gate = reshape(wp_layers + 1.0, (L * N, 1))
        gated = reshape(layer_norm(flat * gate, params.pwca.gamma, params.pwca.beta, cfg.ln_eps), (L, N, d))
        wp = mean(wp_layers, axis=0)
    with _stage("lwca"):
        q_l = project_queries(text, cond.w_q_l)
        f_sem, lw = lwca_forward(q_l, gated, alpha, params.lwca, cfg.k, cfg.kernel_sigma,
                                 cfg.ln_eps, cfg.smooth_order)
    return _finish(text, vs, params, alpha=alpha, W_lp=w_lp, w_l_raw=lw.raw, w_l_smoothed=lw.smoothed,
                   w_p=wp, F_lp=f_lp, F_semantic=f_sem, F_regional=f_sem, variant="shuffled",
                   w_p_layers=wp_layers)


_VARIANT_FNS = {"pai": _forward_pai, "decoupled": _forward_decoupled, "shuffled": _forward_shuffled}


def ccra_forward(text: TextEmbeddings, vs: VisualStack, params: CcraParams, cfg: CcraConfig) -> ForwardTrace:
    """Progressive integration forward pass (always the ``pai`` ordering)."""
    with _stage("inputs"):
        _check_inputs(text, vs, cfg)
    return _forward_pai(text, vs, params, cfg)


def variant_forward(mode: str, text: TextEmbeddings, vs: VisualStack, params: CcraParams,
                    cfg: CcraConfig) -> ForwardTrace:
    if mode not in _VARIANT_FNS:
        raise UnknownVariant(f"unknown variant {mode!r}; expected one of {VARIANTS}")
    with _stage("inputs"):
        _check_inputs(text, vs, cfg)
    return _VARIANT_FNS[mode](text, vs, params, cfg)


# ---------------------------------------------------------------- accounting


def count_parameters(cfg: CcraConfig) -> dict[str, int]:
    """Closed-form count of trainable parameters per group, plus ``total``.

    The frozen decoder and text projection are not counted.
    """
    d, dh = cfg.d, cfg.d_hidden
    stage_queries = 1 if cfg.tie_queries else 3
    counts = {
        "conditioning": (3 + stage_queries) * d * dh + dh,
        "lpwca": d * dh + 2 * d,
        "lwca": d * dh + (0 if cfg.tie_norms else 2 * d),
        "pwca": d * dh + (0 if cfg.tie_norms else 2 * d),
        "projection": 2 * d * cfg.d_llm + cfg.d_llm,
    }
    counts["total"] = sum(counts.values())
    return counts


def enumerate_parameters(params: CcraParams) -> dict[str, int]:
    """Runtime count from the parameter inventory, same layout as count_parameters."""
    counts = {g: sum(t.size for _, t in items) for g, items in params.grouped().items()}
    counts["total"] = sum(counts.values())
    return counts


# ------------------------------------------------------------------ training


def batch_loss(params: CcraParams, batch, cfg: CcraConfig) -> Tensor:
    """Mean cross-entropy of decoder logits over (text, visual, target) triples."""
    if not batch:
        raise EmptyInput("batch is empty")
    losses = [cross_entropy(variant_forward(cfg.variant, text, vs, params, cfg).logits, target)
              for text, vs, target in batch]
    out = losses[0]
    for extra in losses[1:]:
        out = out + extra
    return out * (1.0 / len(losses))


def toy_train_step(params: CcraParams, batch, lr: float, cfg: CcraConfig):
    """One plain gradient-descent step on the CCRA parameters.

    The decoder and text projection stay frozen. Returns (new params, loss
    before the update).
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    loss = batch_loss(params, batch, cfg)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss became {value}")
    tensors = [t for _, t in params.named_parameters()]
    grads = backward(loss, wrt=tensors)
    updated = params.replace_values({id(t): t.data - lr * grads[t] for t in tensors})
    return updated, value


def jitter_params(params: CcraParams, seed: int, scale: float = 0.1) -> CcraParams:
    """Add seeded Gaussian noise to every trainable tensor (moves off symmetric init)."""
    rng = np.random.default_rng(seed)
    return params.replace_values(
        {id(t): t.data + scale * rng.standard_normal(t.shape) for _, t in params.named_parameters()}
    )


def gradient_check(cfg: CcraConfig, eps: float = 1e-5, params: CcraParams | None = None,
                   sample=None, floor: float = 1e-5) -> dict[str, float]:
    """Max relative error between backprop and central differences, per group.

    Per tensor the error is max|analytic - numeric| / max(max|analytic|,
    max|numeric|, floor); a group reports the worst of its tensors. The
    floor keeps near-zero gradients from turning roundoff into large
    relative errors (layer norm nearly cancels positive gate rescaling, so
    some key and query gradients sit around 1e-6).
    """
    if params is None:
        params = jitter_params(init_params(cfg, zero_score_head=False), seed=cfg.seed + 1)
    if sample is None:
        sample = synth_inputs(cfg, cfg.seed)
    batch = [sample]
    tensors = [t for _, t in params.named_parameters()]
    analytic = backward(batch_loss(params, batch, cfg), wrt=tensors)

    report = {}
    for group, items in params.grouped().items():
        worst = 0.0
        for _, t in items:
            def f(x, t=t):
                return batch_loss(params.replace_values({id(t): x.data}), batch, cfg)

            numeric = finite_difference(f, t, eps).data
            a = analytic[t]
            scale = max(np.abs(a).max(), np.abs(numeric).max(), floor)
            worst = max(worst, float(np.abs(a - numeric).max() / scale))
        report[group] = worst
    return report


def depth_query_task(cfg: CcraConfig, seed: int | None = None, noise: float = 0.1):
    """Two question types whose answers live at different depths.

    Four synthetic images cross two binary attributes. A "colour" attribute
    (+c or -c) is written into the shallow layers, an "action" attribute
    (+r or -r) into the upper-middle layers; the final layer holds neither.
    Every layer also carries a depth signature shared across images, so
    layers are identifiable by depth independently of their content. The shallow question must name the colour
    and the deep question the action, both as token 0 or 1. A uniform mix of
    layers carries both attributes with no way to tell which one was asked,
    so each question is only answerable by attending to its own block.

    Returns (batch, shallow_text, deep_text, images, (shallow_layers, deep_layers)).
    """
    if cfg.V < 2 or cfg.L < 4:
        raise ConfigError("depth_query_task needs V >= 2 and L >= 4")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    c, r = rng.standard_normal(cfg.d), rng.standard_normal(cfg.d)
    shallow_layers = range(0, cfg.L // 3 + 1)
    deep_layers = range(cfg.L // 2, cfg.L - 1)
    shallow_q, deep_q = rng.standard_normal(cfg.d), rng.standard_normal(cfg.d)
    shallow_text = TextEmbeddings(Tensor(shallow_q + noise * rng.standard_normal((cfg.T, cfg.d))))
    deep_text = TextEmbeddings(Tensor(deep_q + noise * rng.standard_normal((cfg.T, cfg.d))))
    # depth signature shared by all images, drifting from e0 (shallow) to e1 (deep)
    e0, e1 = rng.standard_normal(cfg.d), rng.standard_normal(cfg.d)
    t = np.linspace(0.0, 1.0, cfg.L)[:, None]
    signature = (1.0 - t) * e0 + t * e1
    images, batch = [], []
    for colour in (0, 1):
        for action in (0, 1):
            layers = signature[:, None, :] + noise * rng.standard_normal((cfg.L, cfg.N, cfg.d))
            for layer in shallow_layers:
                layers[layer] += c if colour == 0 else -c
            for layer in deep_layers:
                layers[layer] += r if action == 0 else -r
            vs = VisualStack(Tensor(layers))
            images.append(vs)
            batch.append((shallow_text, vs, colour))
            batch.append((deep_text, vs, action))
    return batch, shallow_text, deep_text, images, (tuple(shallow_layers), tuple(deep_layers))


def train(params: CcraParams, batch, cfg: CcraConfig, steps: int, lr: float):
    """Run ``steps`` gradient steps; returns (params, list of per-step losses)."""
    losses = []
    for _ in range(steps):
        params, loss = toy_train_step(params, batch, lr, cfg)
        losses.append(loss)
    return params, losses


def evaluate(params: CcraParams, text, vs, cfg: CcraConfig, mode: str | None = None) -> ForwardTrace:
    """Forward pass without graph recording."""
    with no_grad():
        return variant_forward(mode or cfg.variant, text, vs, params, cfg)
