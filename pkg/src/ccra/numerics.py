"""Dense float64 tensors with a small, fixed primitive set and reverse-mode AD.

Every primitive records its inputs and a vector-Jacobian product when any
input requires a gradient, so a forward pass leaves behind a static graph
that :func:`backward` replays in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    EmptyInput,
    EvenKernel,
    KernelTooLarge,
    NonFiniteEvaluation,
    NonFiniteValue,
    NonPositiveSigma,
    NonScalarOutput,
    ShapeMismatch,
)

__all__ = [
    "Tensor",
    "ValueGraph",
    "as_tensor",
    "no_grad",
    "debug_mode",
    "matmul",
    "add",
    "sub",
    "mul",
    "transpose",
    "reshape",
    "concat",
    "total",
    "mean",
    "softmax",
    "cross_entropy",
    "layer_norm",
    "avg_pool_rows",
    "gaussian_kernel",
    "conv1d_reflect",
    "reflect_matrix",
    "backward",
    "finite_difference",
]


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.debug = False


_state = _State()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every primitive's output for NaN/Inf while active."""
    prev = _state.debug
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"{what} produced non-finite values")


class Tensor:
    """Immutable float64 array, optionally a leaf of a gradient graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise EmptyInput(f"tensor with shape {arr.shape} has no elements")
        _check_finite(arr, "Tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self.op = "leaf"

    @classmethod
    def _result(cls, arr, parents, vjp, op):
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if _state.debug:
            _check_finite(arr, op)
        arr.flags.writeable = False
        out.data = arr
        out.op = op
        track = _state.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._vjp = vjp if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise NonScalarOutput(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class ValueGraph:
    """Nodes reachable from an output, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor], output: Tensor):
        self.nodes = nodes
        self.output = output

    @classmethod
    def from_output(cls, output: Tensor) -> "ValueGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order, output)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.requires_grad and not n._parents]

    def __len__(self):
        return len(self.nodes)


# ---------------------------------------------------------------- primitives


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a constant scalar or array."""
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)

        def vjp_const(g):
            return (g * c,)

        return Tensor._result(a.data * c, (a,), vjp_const, "scale")
    b = as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), vjp, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D @ 2-D, 1-D @ 2-D and 2-D @ 1-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 1 and B.ndim == 2:
            return B @ g, np.outer(A, g)
        if A.ndim == 2:
            return np.outer(g, B), A.T @ g
        return g * B, g * A

    return Tensor._result(A @ B, (a, b), vjp, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def _getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return Tensor._result(out, (a,), vjp, "index")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise EmptyInput("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in ts]}: {exc}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._result(out, ts, vjp, "concat")


def total(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data.sum(), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a, axis: int) -> Tensor:
    a = as_tensor(a)
    n = a.shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return Tensor._result(a.data.mean(axis=axis), (a,), vjp, "mean")


def softmax(v) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    v = as_tensor(v)
    z = v.data - v.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (v,), vjp, "softmax")


def cross_entropy(logits, target: int) -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeMismatch(f"cross_entropy expects a logit vector, got {logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise ShapeMismatch(f"target {target} outside [0, {logits.shape[0]})")
    x = logits.data
    m = x.max()
    lse = m + np.log(np.exp(x - m).sum())
    p = np.exp(x - lse)

    def vjp(g):
        d = p.copy()
        d[target] -= 1.0
        return (g * d,)

    return Tensor._result(lse - x[target], (logits,), vjp, "cross_entropy")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with biased variance, then apply gamma/beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead)
        g_beta = g.sum(axis=lead)
        gh = g * gamma.data
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gamma, g_beta

    return Tensor._result(y, (x, gamma, beta), vjp, "layer_norm")


def avg_pool_rows(m) -> Tensor:
    """Mean over the row axis (second to last): [..., n, d] -> [..., d]."""
    m = as_tensor(m)
    if m.ndim < 2:
        raise ShapeMismatch(f"avg_pool_rows expects at least 2-D input, got {m.shape}")
    return mean(m, axis=-2)


def gaussian_kernel(k: int, sigma: float) -> Tensor:
    """Normalized, symmetric Gaussian taps centered at index (k-1)/2."""
    if k < 1 or k % 2 == 0:
        raise EvenKernel(f"kernel size must be a positive odd integer, got {k}")
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    c = (k - 1) / 2
    x = np.arange(k, dtype=np.float64) - c
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g = g / g.sum()
    # enforce exact palindrome against summation-order rounding
    g = 0.5 * (g + g[::-1])
    return Tensor(g)


def reflect_matrix(n: int, g) -> np.ndarray:
    """Matrix P with conv1d_reflect(v, g) == P @ v.

    Out-of-range taps fold back by mirroring about the array edge with the
    edge sample repeated (index -1 reads 0, index n reads n-1), so every
    column sums to sum(g).
    """
    g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
    k = g.shape[0]
    if k % 2 == 0:
        raise EvenKernel(f"kernel size must be odd, got {k}")
    if k > 2 * n - 1:
        raise KernelTooLarge(f"kernel of size {k} exceeds 2n-1 = {2 * n - 1}")
    c = k // 2
    P = np.zeros((n, n))
    for i in range(n):
        for j in range(k):
            p = i + j - c
            if p < 0:
                p = -1 - p
            elif p >= n:
                p = 2 * n - 1 - p
            P[i, p] += g[j]
    return P


def conv1d_reflect(v, g) -> Tensor:
    """Same-length 1-D convolution of ``v`` with a fixed odd kernel ``g``."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeMismatch(f"conv1d_reflect expects a vector, got {v.shape}")
    P = reflect_matrix(v.shape[0], g)
    return Tensor._result(P @ v.data, (v,), lambda gr: (P.T @ gr,), "conv1d_reflect")


# ---------------------------------------------------------- differentiation


def backward(output: Tensor, wrt: Iterable[Tensor] | None = None) -> dict:
    """Gradients of a scalar ``output``.

    Returns a dict keyed by tensor. With ``wrt`` given, every listed tensor
    gets an entry (zeros if it does not influence ``output``); otherwise
    every leaf in the graph does.
    """
    if output.size != 1:
        raise NonScalarOutput(f"backward needs a scalar output, got shape {output.shape}")
    graph = ValueGraph.from_output(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    targets = graph.leaves if wrt is None else list(wrt)
    return {t: grads.get(id(t), np.zeros(t.shape)) for t in targets}


def finite_difference(f: Callable, x, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function at ``x``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty_like(flat)

    def evaluate(arr):
        try:
            val = f(Tensor(arr.reshape(base.shape)))
        except NonFiniteValue as exc:
            raise NonFiniteEvaluation(str(exc)) from exc
        val = float(val.item() if isinstance(val, Tensor) else val)
        if not np.isfinite(val):
            raise NonFiniteEvaluation(f"f returned {val}")
        return val

    with no_grad():
        for i in range(flat.size):
            probe = flat.copy()
            probe[i] = flat[i] + eps
            hi = evaluate(probe)
            probe[i] = flat[i] - eps
            lo = evaluate(probe)
            out[i] = (hi - lo) / (2.0 * eps)
    return Tensor(out.reshape(base.shape))
