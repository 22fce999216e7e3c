"""Dense tensors with define-by-run reverse-mode autodiff on top of numpy.

Parameters and activations are float32. Reductions (sums, means, softmax
denominators, layer-norm statistics) accumulate in float64 and cast back.
The working dtype can be switched to float64 with :func:`precision`, which
is how :func:`grad_check` obtains a low-noise numerical reference.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, NumericError

_state = threading.local()


def dtype():
    return getattr(_state, "dtype", np.float32)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def precision(dt):
    """Temporarily change the dtype new tensors are created with."""
    prev = dtype()
    _state.dtype = dt
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from op '{op}'")
    out = Tensor(data, op=op)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and grad.shape[lead + i] != 1
    )
    red = grad.sum(axis=axes, dtype=np.float64, keepdims=True)
    return red.reshape(red.shape[lead:]).reshape(shape).astype(grad.dtype)


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def seeded_init(shape, scheme="zeros", seed: int = 0, requires_grad: bool = False) -> Tensor:
    """Deterministic tensor initialisation.

    ``scheme`` is ``"zeros"``, ``("normal", mean, std)`` or ``("uniform", a, b)``.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ConfigurationError(f"all dimensions must be >= 1, got {shape}")
    kind = scheme if isinstance(scheme, str) else scheme[0]
    rng = np.random.default_rng(seed)
    if kind == "zeros":
        data = np.zeros(shape)
    elif kind == "normal":
        _, mu, std = scheme
        if std < 0:
            raise ConfigurationError(f"std must be >= 0, got {std}")
        data = mu + std * rng.standard_normal(shape)
    elif kind == "uniform":
        _, a, b = scheme
        data = rng.uniform(a, b, shape)
    elif kind == "ones":
        data = np.ones(shape)
    else:
        raise ConfigurationError(f"unknown init scheme {scheme!r}")
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return _make(out, (x,), bw, "gelu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2:
        # row vector, as in numpy
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + (b.shape[-1],))
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul needs a matrix right operand and a vector or matrix left operand")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _make(out, (a, b), bw, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        out = np.zeros_like(x.data)
        if _is_basic_index(idx):
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(x.data[idx]), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.data.mean(axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / n).astype(x.data.dtype),)

    return _make(out, (x,), bw, "mean")


# ---------------------------------------------------------------------------
# Fused neural-net ops
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``. ``mask`` (broadcastable bool, True = keep) zeroes
    excluded entries, which is how the causal mask is applied."""
    z = x.data.astype(np.float64)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = (e / e.sum(axis=axis, keepdims=True)).astype(x.data.dtype)

    def bw(g):
        inner = (g * p).sum(axis=axis, dtype=np.float64, keepdims=True)
        return ((p * (g - inner)).astype(x.data.dtype),)

    return _make(p, (x,), bw, "softmax")


def _logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z.astype(np.float64)
    m = z.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = (x.data - _logsumexp(x.data, axis)).astype(x.data.dtype)

    def bw(g):
        p = np.exp(out.astype(np.float64))
        return ((g - p * g.sum(axis=axis, dtype=np.float64, keepdims=True)).astype(x.data.dtype),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    dt = x.data.dtype
    out = (xhat * gamma.data + beta.data).astype(dt)

    def bw(g):
        g64 = g.astype(np.float64)
        gxhat = g64 * gamma.data
        gx = inv * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        ggamma = (g64 * xhat).sum(axis=lead)
        gbeta = g64.sum(axis=lead)
        return gx.astype(dt), ggamma.astype(dt), gbeta.astype(dt)

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]``; gradient scatters back with accumulation."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(f"embedding id out of range [0, {weight.shape[0]})")

    def bw(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (out,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape} incompatible with targets {targets.shape}")
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    if t.size == 0:
        raise ContractError("cross_entropy over zero targets")
    if t.min() < 0 or t.max() >= v:
        raise ContractError(f"targets must lie in [0, {v})")
    lse = _logsumexp(z, -1)[:, 0]
    n = t.size
    loss = (lse - z[np.arange(n), t].astype(np.float64)).mean()

    def bw(g):
        p = np.exp(z.astype(np.float64) - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return ((p * (float(g) / n)).astype(logits.data.dtype).reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


class ComputeGraph:
    """Topologically ordered view of the ops that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        loss = self.output
        if loss.size != 1 or loss.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient at node '{node.op}' shape {node.shape}")
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor) -> None:
    ComputeGraph(loss).backward()


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def relative_error(analytic, numeric, floor: float = 1e-6):
    """|a - n| / max(|a| + |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-3

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())

    def __str__(self) -> str:
        lines = [
            f"{'PASS' if e <= self.tol else 'FAIL'} {name}: max rel err {e:.3e}"
            for name, e in self.max_rel_error.items()
        ]
        return "\n".join(lines)


def grad_check(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    n_coords: int = 16,
    seed: int = 0,
    numeric_dtype=np.float64,
    analytic_override: dict[str, np.ndarray] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients of ``fn()`` with central differences.

    ``fn`` rebuilds the graph from ``params`` on every call. The analytic side
    runs at the working precision; the numerical side re-evaluates ``fn`` under
    ``numeric_dtype`` (float64 by default) so its own rounding noise does not
    dominate the comparison. ``analytic_override`` substitutes gradients, which
    exists to exercise the failure path.
    """
    if h <= 0:
        raise ConfigurationError("h must be > 0")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if analytic_override and name in analytic_override:
            analytic = np.asarray(analytic_override[name])
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient for {name}")
        k = min(n_coords, p.size)
        coords = rng.choice(p.size, size=k, replace=False)
        original = p.data
        worst = 0.0
        try:
            p_hi = original.astype(numeric_dtype)
            for c in coords:
                idx = np.unravel_index(c, p.shape)
                vals = []
                for sign in (1.0, -1.0):
                    work = p_hi.copy()
                    work[idx] += sign * h
                    p.data = work
                    with precision(numeric_dtype), _upcast(params, p, numeric_dtype):
                        vals.append(float(fn().data))
                numeric = (vals[0] - vals[1]) / (2 * h)
                if not math.isfinite(numeric):
                    raise NumericError(f"non-finite numerical gradient for {name}")
                worst = max(worst, float(relative_error(analytic[idx], numeric, floor)))
        finally:
            p.data = original
        report.max_rel_error[name] = worst
    for p in params.values():
        p.grad = None
    return report


@contextlib.contextmanager
def _upcast(params: dict[str, Tensor], skip: Tensor, dt):
    saved = {}
    for name, p in params.items():
        if p is not skip:
            saved[name] = p.data
            p.data = p.data.astype(dt)
    try:
        yield
    finally:
        for name, data in saved.items():
            params[name].data = data
