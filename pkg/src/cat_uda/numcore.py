"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable op returns a :class:`Tensor` that remembers its parents
and a closure mapping the output cotangent to parent cotangents. Calling
``backward()`` on a scalar walks the graph in reverse topological order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class OracleError(RuntimeError):
    pass


class DataError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor({self.data!r}, op={self.op!r})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, cotangent=None) -> None:
        if cotangent is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without cotangent needs a scalar, got shape {self.shape}")
            cotangent = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): _as_array(cotangent)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into a zero-initialised buffer so signed zeros never leak
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = np.zeros_like(parent.data) + pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.data + b.data, _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), op="add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.data - b.data, _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), op="sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    return Tensor(ad * bd, _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                  op="mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor(out, _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                  op="div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g * out,), op="exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor(np.log(xd), _parents=(x,), _backward=lambda g: (g / xd,), op="log")


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0; NaN passes through so the finite check downstream sees it
    mask = ~(x.data <= 0)
    return Tensor(np.where(mask, x.data, 0.0), _parents=(x,),
                  _backward=lambda g: (np.where(mask, g, 0.0),), op="relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g * (1.0 - out * out),), op="tanh")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split branches so neither exp overflows
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g * out * (1.0 - out),), op="sigmoid")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return Tensor(np.clip(xd, lo, hi), _parents=(x,),
                  _backward=lambda g: (np.where(inside, g, 0.0),), op="clamp")


# reductions and shape ops ---------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor(x.data.sum(axis=axis, keepdims=keepdims), _parents=(x,), _backward=backward, op="sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


def norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; gradient at a zero vector is taken as 0."""
    out = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    safe = np.where(out > 0, out, 1.0)
    xd = x.data

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(out > 0, g * xd / safe, 0.0),)

    value = out if keepdims else np.squeeze(out, axis=axis)
    return Tensor(value, _parents=(x,), _backward=backward, op="norm")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor(x.data.reshape(shape), _parents=(x,), _backward=lambda g: (g.reshape(old),), op="reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([x.data for x in xs], axis=axis), _parents=tuple(xs),
                  _backward=lambda g: tuple(np.split(g, cuts, axis=axis)), op="concat")


def take_along_rows(x: Tensor, cols: np.ndarray) -> Tensor:
    """out[i] = x[i, cols[i]]"""
    rows = np.arange(x.shape[0])

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return Tensor(x.data[rows, cols], _parents=(x,), _backward=backward, op="take")


# linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    return Tensor(ad @ bd, _parents=(a, b), _backward=lambda g: (g @ bd.T, ad.T @ g), op="matmul")


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for x of shape (batch, in), W (in, out), b (out,)."""
    x, W, b = _lift(x), _lift(W), _lift(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(f"affine expects x 2-D, W 2-D, b 1-D; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine: x axis 1 ({x.shape[1]}) != W axis 0 ({W.shape[0]})")
    if W.shape[1] != b.shape[0]:
        raise DimensionError(f"affine: W axis 1 ({W.shape[1]}) != b axis 0 ({b.shape[0]})")
    xd, Wd = x.data, W.data
    return Tensor(xd @ Wd + b.data, _parents=(x, W, b),
                  _backward=lambda g: (g @ Wd.T, xd.T @ g, g.sum(axis=0)), op="affine")


def softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    out = softmax_array(logits.data)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor(out, _parents=(logits,), _backward=backward, op="softmax")


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, _parents=(logits,), _backward=backward, op="log_softmax")


# gradient reversal ------------------------------------------------------------

def grl_backward(cotangent, mu: float) -> np.ndarray:
    if mu < 0:
        raise ConfigError(f"GRL coefficient mu must be >= 0, got {mu}")
    return -mu * _as_array(cotangent)


def grl_forward(x: Tensor, mu: float = 1.0) -> Tensor:
    """Identity on values; the backward pass multiplies the cotangent by ``-mu``."""
    if mu < 0:
        raise ConfigError(f"GRL coefficient mu must be >= 0, got {mu}")
    x = _lift(x)
    return Tensor(x.data, _parents=(x,), _backward=lambda g: (grl_backward(g, mu),), op="grl")


# plain-array helpers ----------------------------------------------------------

def cosine_similarity(a, b) -> float:
    a, b = _as_array(a).ravel(), _as_array(b).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: length {a.shape[0]} != {b.shape[0]}")
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


# finite-difference oracle ---------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    rtol: float
    n_checked: int


def analytic_grads(loss_fn: Callable[[list[Tensor]], Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss_fn(leaves).backward()
    return [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]


def numeric_grads(loss_fn: Callable[[list[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                  h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every entry of ``arrays``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]

    def f(vals):
        return float(loss_fn([Tensor(v) for v in vals]).data)

    if f(base) != f(base):
        raise OracleError("loss_fn is not deterministic: two evaluations differ")
    out = []
    for i, a in enumerate(base):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            fp = f(base)
            flat[j] = old - h
            fm = f(base)
            flat[j] = old
            gflat[j] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def finite_diff_check(loss_fn, params: Iterable[np.ndarray], rtol: float = 1e-4, h: float = 1e-5,
                      *, reference_fn=None, scale: float = 1.0, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` with central differences.

    ``loss_fn`` maps a list of Tensors (one per array in ``params``) to a scalar
    Tensor. With ``reference_fn`` given, the finite differences are taken on
    that function instead and multiplied by ``scale``; this is how a path through
    a gradient-reversal node is checked against the same path without it
    (``scale=-mu``). Relative error uses ``max(|analytic|, |numeric|, floor)``
    as the denominator.
    """
    if h <= 0:
        raise ConfigError(f"finite-difference step h must be > 0, got {h}")
    arrays = [np.array(p, dtype=np.float64) for p in params]
    ana = analytic_grads(loss_fn, arrays)
    num = numeric_grads(reference_fn or loss_fn, arrays, h=h)
    max_rel = max_abs = 0.0
    n = 0
    for a, d in zip(ana, num):
        d = scale * d
        diff = np.abs(a - d)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(d)), floor)
        if diff.size:
            max_abs = max(max_abs, float(diff.max()))
            max_rel = max(max_rel, float((diff / denom).max()))
        n += diff.size
    return GradCheckReport(max_rel, max_abs, max_rel <= rtol, rtol, n)
