"""Small reverse-mode autodiff over numpy float64 arrays.

Only the operations the attention model needs are provided. Broadcasting
follows numpy rules and gradients are summed back to the input shape.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class ContractError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    # -- reverse pass ----------------------------------------------------
    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    parents = tuple(p for p in parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data)


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def graph_size(root: Tensor) -> int:
    """Number of gradient-tracking nodes reachable from ``root``."""
    return len(_topo(root)) if root.requires_grad else 0


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Interior gradients are reset first; leaf gradients accumulate, so
    callers zero them (ParamStore.zero_grad) before each pass.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    order = _topo(root)
    for node in order:
        if node._parents:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for p, g in zip(node._parents, grads):
            if g is None or not p.requires_grad:
                continue
            g = _unbroadcast(g, p.data.shape)
            if p.grad is None:
                p.grad = g.copy() if not p._parents else g
            else:
                p.grad = p.grad + g
    # interior buffers are not needed after the pass
    for node in order:
        if node._parents:
            node.grad = None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def power(a, p: float):
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,), "relu")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif a.ndim == 1:
            gb = np.multiply.outer(a.data, g)
        elif b.ndim == 2:
            # shared weight: fold every leading axis into one GEMM
            k = a.data.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(out, (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    out = a.data[idx]
    shape = a.data.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def broadcast_to(a, shape):
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (g,), "broadcast")


# ---------------------------------------------------------------------------
# softmax family


def _masked_input(x: np.ndarray, mask):
    if mask is None:
        keep = ~np.isneginf(x)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            try:
                mask = np.broadcast_to(mask, x.shape)
            except ValueError:
                raise ShapeError(f"mask shape {mask.shape} does not match {x.shape}") from None
        keep = mask & ~np.isneginf(x)
    if not keep.any(axis=-1).all():
        raise InvalidMaskError("softmax row has every entry masked")
    return np.where(keep, x, -np.inf), keep


def softmax_last(x, mask=None):
    """Softmax over the last axis; ``mask`` marks the entries that stay."""
    x = as_tensor(x)
    z, keep = _masked_input(x.data, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def log_softmax_last(x, mask=None):
    """Log-softmax over the last axis; masked entries come out as -inf."""
    x = as_tensor(x)
    z, keep = _masked_input(x.data, mask)
    m = z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z - m), 0.0)
    tot = e.sum(axis=-1, keepdims=True)
    out = np.where(keep, z - m - np.log(tot), -np.inf)
    s = e / tot

    def bw(g):
        g = np.where(keep, g, 0.0)
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BNStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1


BN_EPS = 1e-5


def batchnorm(x, weight, bias, stats: BNStats | None = None, training: bool = True,
              update_stats: bool = True, eps: float = BN_EPS):
    """Batch norm over every axis except the last (feature) axis.

    Train mode normalizes with batch statistics and, if ``update_stats``,
    folds them into ``stats`` with its momentum. Eval mode uses ``stats``.
    """
    x = as_tensor(x)
    d = x.data.shape[-1]
    if weight.data.shape != (d,):
        raise ShapeError(f"batchnorm expects {weight.data.shape[0]} features, got {d}")
    flat_n = x.data.size // d
    if flat_n == 0:
        raise ShapeError("batchnorm on an empty batch")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = tmean(x, axes, keepdims=True)
        xc = x - mu
        var = tmean(xc * xc, axes, keepdims=True)
        xhat = xc * power(var + eps, -0.5)
        if stats is not None and update_stats:
            m = stats.momentum
            unbiased = var.data.reshape(d) * (flat_n / max(flat_n - 1, 1))
            stats.mean = (1 - m) * stats.mean + m * mu.data.reshape(d)
            stats.var = (1 - m) * stats.var + m * unbiased
    else:
        if stats is None:
            raise ContractError("eval-mode batchnorm needs running statistics")
        xhat = (x - stats.mean) * (1.0 / np.sqrt(stats.var + eps))
    return xhat * weight + bias


# ---------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ContractError("Adam eps must be positive")


class ParamStore:
    """Ordered named parameters with their Adam moments and step counters."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.params.items()}

    def num_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for k, t in self.params.items():
            new.add(k, t.data.copy())
            new.m[k] = self.m[k].copy()
            new.v[k] = self.v[k].copy()
            new.steps[k] = self.steps[k]
        return new

    def load_values(self, other: "ParamStore"):
        for k, t in self.params.items():
            t.data = other.params[k].data.copy()

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.params.values())


def adam_step(store: ParamStore, grads: dict, cfg: AdamConfig) -> ParamStore:
    """One bias-corrected Adam update applied in place; returns ``store``."""
    for name, g in grads.items():
        if name not in store.params:
            raise ContractError(f"unknown parameter {name!r}")
        p = store.params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {p.data.shape}")
        t = store.steps[name] + 1
        store.steps[name] = t
        store.m[name] = cfg.beta1 * store.m[name] + (1 - cfg.beta1) * g
        store.v[name] = cfg.beta2 * store.v[name] + (1 - cfg.beta2) * g * g
        mhat = store.m[name] / (1 - cfg.beta1 ** t)
        vhat = store.v[name] / (1 - cfg.beta2 ** t)
        p.data = p.data - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return store


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(f, x: np.ndarray, analytic: np.ndarray, h: float = 1e-5, floor: float = 1.0) -> float:
    """Max over coordinates of |a - c| / max(floor, |a|, |c|).

    ``a`` is the analytic gradient and ``c`` the central difference; the
    floor keeps near-zero coordinates from amplifying rounding noise.
    """
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        c = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - c) / max(floor, abs(a), abs(c))
        worst = max(worst, err)
    return worst
