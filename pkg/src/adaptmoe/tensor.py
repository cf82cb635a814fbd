"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks the
graph once in reverse topological order and *adds* the result into ``.grad``
of every leaf tensor that requires it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph plumbing ------------------------------------------------------
    @staticmethod
    def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
        if needs:
            out._backward = backward
        return out

    def backward(self) -> None:
        backward(self)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other) -> Tensor:
        return add(as_tensor(other), neg(self))

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other) -> Tensor:
        return div(as_tensor(other), self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        return take(self, index)

    # -- method sugar --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)

    def relu(self) -> Tensor:
        return relu(self)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def softmax(self, axis: int = -1) -> Tensor:
        return softmax(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._make(
        out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return Tensor._make(
        ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    # strict inequality: the derivative at exactly 0 is 0
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- reductions and shape ----------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._make(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def take(a: Tensor, index) -> Tensor:
    """``a[index]`` with scatter-add backward (handles repeated indices)."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(a.data[index], (a,), bw, "take")


def index_add(n_rows: int, index: np.ndarray, src: Tensor) -> Tensor:
    """Zeros of ``(n_rows, *src.shape[1:])`` with ``src`` rows added at ``index``."""
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((n_rows,) + src.shape[1:])
    np.add.at(out, index, src.data)
    return Tensor._make(out, (src,), lambda g: (g[index],), "index_add")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return Tensor._make(
        np.stack([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


# -- normalisation and losses ------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < max(a.ndim, 1):
        raise ContractError(f"softmax: axis {axis} out of range for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    sm = np.exp(out)
    return Tensor._make(
        out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (no affine part)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor._make(xhat, (a,), bw, "layer_norm")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over unmasked rows.

    ``logits`` has shape ``(..., C)``; ``targets`` and ``mask`` have the leading shape.
    """
    targets = np.asarray(targets, dtype=np.intp)
    flat = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    w = np.ones(t.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    count = w.sum()
    if count == 0:
        return Tensor(0.0)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(t))
    loss = -(logp[rows, t] * w).sum() / count

    def bw(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d *= (w / count)[:, None] * g
        return (d.reshape(logits.shape),)

    return Tensor._make(loss, (logits,), bw, "cross_entropy")


# -- backward ----------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf tensor in ``loss``'s graph that requires it.

    Gradients are added to whatever ``.grad`` already holds. Intermediate
    results do not keep their gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            upstream[key] = pg if key not in upstream else upstream[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst: tuple[int, int]  # (parameter position, flat index)
    per_param: list[float] = field(default_factory=list)
    checked: int = 0

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-6,
    indices: Sequence[np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients of ``f()`` with central differences.

    ``f`` must rebuild its graph from ``params`` on every call. The relative
    error of one entry is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
    ``floor`` keeps entries whose true gradient is zero from dividing rounding noise
    by nothing. ``indices`` optionally restricts the check to given flat positions
    per parameter.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    zero_grad(params)
    backward(f())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    zero_grad(params)

    worst_rel, worst_abs, worst = 0.0, 0.0, (-1, -1)
    per_param, checked = [], 0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        ga = analytic[k].reshape(-1)
        positions = range(flat.size) if indices is None else indices[k]
        param_worst = 0.0
        for i in positions:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(ga[i] - num)
            rel = err / max(abs(ga[i]), abs(num), floor)
            checked += 1
            param_worst = max(param_worst, rel)
            worst_abs = max(worst_abs, err)
            if rel > worst_rel:
                worst_rel, worst = rel, (k, int(i))
        per_param.append(param_worst)
    return GradCheckReport(worst_rel, worst_abs, worst, per_param, checked)
