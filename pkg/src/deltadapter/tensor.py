"""Dense float64 tensors with a dynamic reverse-mode autodiff tape.

Every operation on a :class:`Tensor` that has a gradient-requiring input
records its parents and a backward rule. :func:`backward` walks the recorded
graph from a scalar loss in reverse topological order and accumulates
``d loss / d leaf`` into ``leaf.grad``.

Arrays are plain numpy ``float64``; broadcasting follows numpy and the
backward rules reduce gradients back to each input's shape.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer steps)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method sugar -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def backward(self) -> dict:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, rule, op: str) -> Tensor:
    # one reduction instead of an elementwise mask; NaN/Inf always propagate into the sum
    if not math.isfinite(data.sum()):
        raise NumericError(f"{op}: non-finite values in output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def rule(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def rule(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _result(out, (a, b), rule, "div")


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if p == 2:
        return _result(x * x, (a,), lambda g: (2.0 * x * g,), "square")
    with np.errstate(all="ignore"):
        y = x ** p
    return _result(y, (a,), lambda g: (p * x ** (p - 1) * g,), "pow")


def square(a: Tensor) -> Tensor:
    return power(a, 2)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    with np.errstate(over="ignore"):
        x2 = x * x
    if not math.isfinite(x2.sum()):
        # the output would saturate but the backward rule would produce NaN
        raise NumericError("gelu: input magnitude overflows")
    th = x2 * 0.044715
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    y = th + 1.0
    y *= x
    y *= 0.5

    def rule(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 k x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= x
        d *= _GELU_C * 0.5
        d *= 1.0 - th * th
        d += 0.5 * (1.0 + th)
        d *= g
        return (d,)

    return _result(y, (a,), rule, "gelu")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2:
        # vector times matrix, as in numpy: promote, multiply, drop the axis
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (*b.shape[:-2], b.shape[-1]))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    # batched activations times a plain weight matrix: fold the batch into rows
    flat = bd.ndim == 2 and ad.ndim > 2

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if flat:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    try:
        if flat:
            out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
        else:
            out = ad @ bd
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc
    return _result(out, (a, b), rule, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- reductions -----------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), rule, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / n)


# -- shape manipulation ---------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return _result(out, (a,), lambda g: (unbroadcast(g, src),), "broadcast")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    """Slice or gather; repeated gather indices accumulate in backward."""
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def rule(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), rule, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(ts), rule, "concat")


# -- normalization, attention weights, geometry ---------------------------
def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize every last-axis slice to zero mean, unit (population) variance.

    No affine parameters.
    """
    x = as_tensor(x)
    d = x.shape[-1] if x.ndim else 0
    if d < 2:
        raise ShapeError(f"layer_norm: degenerate token of size {d}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    with np.errstate(over="ignore", invalid="ignore"):
        var = (xc * xc).mean(axis=-1, keepdims=True)
    if not math.isfinite(var.sum()):
        raise NumericError("layer_norm: non-finite variance")
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _result(y, (x,), rule, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if not -xd.ndim <= axis < max(xd.ndim, 1):
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), rule, "softmax")


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * xd / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _result(out, (x,), rule, "l2_norm")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine along the last axis with ``max(norm, eps)`` denominators.

    A zero vector on either side yields exactly 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = np.broadcast_arrays(a.data, b.data)
    dot = (ad * bd).sum(axis=-1, keepdims=True)
    na = np.sqrt((ad * ad).sum(axis=-1, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=-1, keepdims=True))
    da, db = np.maximum(na, eps), np.maximum(nb, eps)
    cos = dot / (da * db)

    def rule(g):
        g = g[..., None]
        ga = gb = None
        if a.requires_grad:
            # the norm term only contributes where the guard is inactive
            ga = g * (bd / (da * db) - np.where(na >= eps, cos * ad / (da * da), 0.0))
            ga = unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = g * (ad / (da * db) - np.where(nb >= eps, cos * bd / (db * db), 0.0))
            gb = unbroadcast(gb, b.shape)
        return ga, gb

    return _result(cos[..., 0], (a, b), rule, "cosine")


def randn(shape, rng: np.random.Generator, scale: float = 1.0) -> Tensor:
    """Gaussian constant tensor drawn from a seeded generator."""
    return Tensor(rng.standard_normal(shape) * scale)


# -- graph ----------------------------------------------------------------
@dataclass
class Graph:
    """Executed ops reachable from an output, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
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
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents and n.requires_grad]


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d loss / d leaf into ``leaf.grad`` for every reachable leaf.

    Returns a map from leaf tensor to the gradient contributed by this call.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    contributed: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            g = np.array(g, dtype=np.float64)
            node.grad = g.copy() if node.grad is None else node.grad + g
            contributed[node] = g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return contributed


# -- finite-difference checking ------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    checked_entries: list[int]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error) if self.max_rel_error else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def _rel_error(auto: np.ndarray, num: np.ndarray) -> float:
    scale = max(np.abs(auto).max(initial=0.0), np.abs(num).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(auto - num).max() / scale)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of an input is ``max|auto - fd| / max(|auto|, |fd|)``
    over the checked entries. With ``max_entries`` set, a random subset of
    each input's entries is probed.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    try:
        out = f(*inputs)
    except NumericError as exc:
        raise NumericError(f"grad_check: forward failed: {exc}") from exc
    backward(out)
    rng = rng or np.random.default_rng(0)
    errors, counts = [], []
    with no_grad():
        for t in inputs:
            auto = t.grad if t.grad is not None else np.zeros(t.shape)
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            num = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = f(*inputs).item()
                flat[i] = orig - step
                fm = f(*inputs).item()
                flat[i] = orig
                num[j] = (fp - fm) / (2 * step)
            if not np.isfinite(num).all():
                raise NumericError("grad_check: non-finite finite-difference estimate")
            errors.append(_rel_error(auto.reshape(-1)[idx], num))
            counts.append(int(idx.size))
    return GradCheckReport(errors, counts, tol)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
