"""Dense float64 tensors with reverse-mode automatic differentiation.

The design is a small tape machine: every differentiable op gives its output
tensor a backward closure and a monotonically increasing sequence number.
``Tape.trace`` collects the ops reachable from a scalar loss in recording
order; ``backward`` replays them in reverse, accumulating into ``.grad`` on
every leaf that requires gradients.

There is deliberately no broadcasting: elementwise ops demand identical
shapes, and anything that looks like broadcasting is spelled with explicit
``tile_rows`` / ``reshape``.  All storage is float64.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_seq_counter = itertools.count()

# When set, forward ops add their multiply-add estimates here (see FlopCounter).
_flops: list["FlopCounter"] = []

# When true, ops do not record backward closures (inference mode).
_grad_enabled = True


class FlopCounter:
    """Context manager accumulating per-op multiply-add counts."""

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _flops.append(self)
        return self

    def __exit__(self, *exc):
        _flops.remove(self)
        return False


def _add_flops(n: int) -> None:
    for c in _flops:
        c.total += n


class no_grad:
    """Disable tape recording inside the block (inference speed-up)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._seq = next(_seq_counter)

    # -- construction helpers -------------------------------------------------
    @classmethod
    def const(cls, values) -> "Tensor":
        return cls(values, requires_grad=False)

    @classmethod
    def param(cls, values) -> "Tensor":
        return cls(values, requires_grad=True)

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        """A gradient-blocked view of the same values."""
        return Tensor(self.values, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    # -- method sugar for common unary ops --------------------------------------
    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absolute(self)

    def sum(self):
        return total_sum(self)

    def mean(self):
        return mean(self)

    def T(self):
        return transpose(self)


class Tape:
    """The recorded ops reachable from a root, in execution order.

    Replaying ``nodes`` in reverse is a valid reverse topological order
    because an op's output always carries a higher sequence number than any
    of its inputs.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        collected: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                collected.append(t)
            stack.extend(t._parents)
        collected.sort(key=lambda t: t._seq)
        return cls(collected)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every requires_grad leaf.

    Repeated calls without resetting leaf grads accumulate, which is what
    batch loops rely on.  Interior tape nodes get fresh grads per replay.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = Tape.trace(loss)
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        if node.grad is None:
            # not on any path that influences the loss value (e.g. a fan-out
            # branch never reduced into the loss); nothing to propagate
            continue
        node._backward()


def _make(values: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[Tensor], Callable[[], None]] | None) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and backward_fn is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn(out)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise binary ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    _add_flops(a.size)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate_grad(out.grad)
            if b.requires_grad:
                b.accumulate_grad(out.grad)
        return run

    return _make(a.values + b.values, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    _add_flops(a.size)

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate_grad(out.grad)
            if b.requires_grad:
                b.accumulate_grad(-out.grad)
        return run

    return _make(a.values - b.values, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    _add_flops(a.size)
    av, bv = a.values, b.values

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate_grad(out.grad * bv)
            if b.requires_grad:
                b.accumulate_grad(out.grad * av)
        return run

    return _make(av * bv, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    _add_flops(a.size)
    av, bv = a.values, b.values

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate_grad(out.grad / bv)
            if b.requires_grad:
                b.accumulate_grad(-out.grad * av / (bv * bv))
        return run

    return _make(av / bv, (a, b), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the subgradient goes to `a`."""
    _check_same_shape("maximum", a, b)
    _add_flops(a.size)
    take_a = a.values >= b.values

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate_grad(out.grad * take_a)
            if b.requires_grad:
                b.accumulate_grad(out.grad * ~take_a)
        return run

    return _make(np.maximum(a.values, b.values), (a, b), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the subgradient goes to `a`."""
    _check_same_shape("minimum", a, b)
    _add_flops(a.size)
    take_a = a.values <= b.values

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate_grad(out.grad * take_a)
            if b.requires_grad:
                b.accumulate_grad(out.grad * ~take_a)
        return run

    return _make(np.minimum(a.values, b.values), (a, b), bw)


# -- scalar / structural --------------------------------------------------------

def scale(a: Tensor, s: float) -> Tensor:
    _add_flops(a.size)
    s = float(s)

    def bw(out):
        def run():
            a.accumulate_grad(out.grad * s)
        return run

    return _make(a.values * s, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    _add_flops(a.shape[0] * a.shape[1] * b.shape[1])
    av, bv = a.values, b.values

    def bw(out):
        def run():
            if a.requires_grad:
                a.accumulate_grad(out.grad @ bv.T)
            if b.requires_grad:
                b.accumulate_grad(av.T @ out.grad)
        return run

    return _make(av @ bv, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ValueError(f"transpose: expects a 2-D tensor, got {a.shape}")

    def bw(out):
        def run():
            a.accumulate_grad(out.grad.T)
        return run

    return _make(a.values.T.copy(), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty input")
    nd = tensors[0].values.ndim
    for t in tensors[1:]:
        if t.values.ndim != nd:
            raise ValueError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def run():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * nd
                    sl[axis] = slice(lo, hi)
                    t.accumulate_grad(out.grad[tuple(sl)])
        return run

    return _make(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row range [start, stop) along axis 0."""
    n = a.shape[0]
    if not (0 <= start <= stop <= n):
        raise ValueError(f"slice_rows: range [{start}, {stop}) out of bounds for {a.shape}")
    start, stop = int(start), int(stop)

    def bw(out):
        def run():
            g = np.zeros_like(a.values)
            g[start:stop] += out.grad
            a.accumulate_grad(g)
        return run

    return _make(a.values[start:stop].copy(), (a,), bw)


def gather_rows(a: Tensor, indices: Iterable[int]) -> Tensor:
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(f"gather_rows: index out of bounds for {a.shape}")

    def bw(out):
        def run():
            g = np.zeros_like(a.values)
            np.add.at(g, idx, out.grad)
            a.accumulate_grad(g)
        return run

    return _make(a.values[idx].copy(), (a,), bw)


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a [d] or [1 x d] tensor into n rows."""
    row = a.values.reshape(-1)
    d = row.size

    def bw(out):
        def run():
            a.accumulate_grad(out.grad.sum(axis=0).reshape(a.shape))
        return run

    return _make(np.tile(row, (n, 1)), (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    new = a.values.reshape(shape)

    def bw(out):
        def run():
            a.accumulate_grad(out.grad.reshape(a.shape))
        return run

    return _make(new.copy(), (a,), bw)


# -- elementwise unary -----------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    _add_flops(a.size)
    mask = a.values > 0

    def bw(out):
        def run():
            a.accumulate_grad(out.grad * mask)
        return run

    return _make(np.maximum(a.values, 0.0), (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    _add_flops(4 * a.size)
    # numerically stable both directions
    v = a.values
    y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                 np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def bw(out):
        def run():
            a.accumulate_grad(out.grad * y * (1.0 - y))
        return run

    return _make(y, (a,), bw)


def exp(a: Tensor) -> Tensor:
    _add_flops(a.size)
    y = np.exp(a.values)

    def bw(out):
        def run():
            a.accumulate_grad(out.grad * y)
        return run

    return _make(y, (a,), bw)


def log(a: Tensor) -> Tensor:
    _add_flops(a.size)
    av = a.values

    def bw(out):
        def run():
            a.accumulate_grad(out.grad / av)
        return run

    return _make(np.log(av), (a,), bw)


def absolute(a: Tensor) -> Tensor:
    _add_flops(a.size)
    sign = np.sign(a.values)

    def bw(out):
        def run():
            a.accumulate_grad(out.grad * sign)
        return run

    return _make(np.abs(a.values), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _add_flops(5 * a.size)
    v = a.values
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def run():
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            a.accumulate_grad(y * (g - dot))
        return run

    return _make(y, (a,), bw)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine; scale/shift are explicit ops)."""
    _add_flops(6 * a.size)
    v = a.values
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (v - mu) * inv
    n = v.shape[-1]

    def bw(out):
        def run():
            g = out.grad
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (g - gm - y * gym))
        return run

    _ = n
    return _make(y, (a,), bw)


# -- reductions -------------------------------------------------------------------

def total_sum(a: Tensor) -> Tensor:
    _add_flops(a.size)

    def bw(out):
        def run():
            a.accumulate_grad(np.full_like(a.values, out.grad.reshape(())))
        return run

    return _make(np.asarray(a.values.sum()), (a,), bw)


def mean(a: Tensor) -> Tensor:
    _add_flops(a.size)
    n = a.size

    def bw(out):
        def run():
            a.accumulate_grad(np.full_like(a.values, out.grad.reshape(()) / n))
        return run

    return _make(np.asarray(a.values.mean()), (a,), bw)


def max_rows(a: Tensor) -> Tensor:
    """Column-wise max over axis 0 of a 2-D tensor: [n x d] -> [d].

    Ties route the gradient to the first maximal row.
    """
    if a.values.ndim != 2:
        raise ValueError(f"max_rows: expects a 2-D tensor, got {a.shape}")
    _add_flops(a.size)
    arg = a.values.argmax(axis=0)

    def bw(out):
        def run():
            g = np.zeros_like(a.values)
            g[arg, np.arange(a.shape[1])] += out.grad
            a.accumulate_grad(g)
        return run

    return _make(a.values.max(axis=0), (a,), bw)


def rows_mean_groups(a: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """Per-group mean of rows of a 2-D tensor: len(groups) x d output.

    One tape node regardless of group count, which keeps region pooling from
    flooding the tape with per-box ops.  Every group must be non-empty.
    """
    if a.values.ndim != 2:
        raise ValueError(f"rows_mean_groups: expects a 2-D tensor, got {a.shape}")
    idx_groups = [np.asarray(g, dtype=np.intp) for g in groups]
    for g in idx_groups:
        if g.size == 0:
            raise ValueError("rows_mean_groups: empty group")
    _add_flops(sum(g.size for g in idx_groups) * a.shape[1])
    out_vals = np.empty((len(idx_groups), a.shape[1]), dtype=np.float64)
    for i, g in enumerate(idx_groups):
        out_vals[i] = a.values[g].mean(axis=0)

    def bw(out):
        def run():
            grad = np.zeros_like(a.values)
            for i, g in enumerate(idx_groups):
                np.add.at(grad, g, out.grad[i] / g.size)
            a.accumulate_grad(grad)
        return run

    return _make(out_vals, (a,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error with mean reduction (divide by element count)."""
    _check_same_shape("mse", a, b)
    d = sub(a, b)
    return mean(mul(d, d))


# -- gradient checking ---------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error metric per coordinate: |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    leaf = Tensor.param(x.values.copy())
    out = f(leaf)
    if out.values.size != 1:
        raise ValueError("grad_check: f must return a scalar")
    backward(out)
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.values)

    flat = x.values.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] += h
        hi = f(Tensor.const(bump.reshape(x.shape))).item()
        bump[i] -= 2 * h
        lo = f(Tensor.const(bump.reshape(x.shape))).item()
        numeric[i] = (hi - lo) / (2 * h)

    denom = np.maximum(1.0, np.abs(analytic.reshape(-1)))
    return float(np.max(np.abs(analytic.reshape(-1) - numeric) / denom)) if flat.size else 0.0
