"""Dense tensors with hand-written vector-Jacobian products.

Every operation the forecaster needs is defined here as a forward function plus
an entry in :data:`VJPS`. Backward passes look the VJP up by op name at call
time, so a test can swap one out and watch the gradient checker catch it.

Arrays are plain numpy buffers; only the differentiation logic lives here.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class GradCheckError(RuntimeError):
    pass


VJPS: dict[str, Callable] = {}


def _vjp(name):
    def register(fn):
        VJPS[name] = fn
        return fn
    return register


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_ctx")

    def __init__(self, data, requires_grad=False, _op=None, _parents=(), _ctx=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._op = _op
        self._parents = _parents
        self._ctx = _ctx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{op})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._op is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = VJPS[node._op](g, node, *node._parents)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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


def tensor(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


_grad_enabled = True


@contextmanager
def no_grad():
    """Build no backward graph inside the block (evaluation passes)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(op, data, parents, ctx=None) -> Tensor:
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _op=op, _parents=tuple(parents), _ctx=ctx)


# ---------------------------------------------------------------- matmul


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast like numpy."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch axes incompatible: {a.shape} x {b.shape}") from exc
    return _make("matmul", out, (a, b))


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


@_vjp("matmul")
def _matmul_vjp(g, out, a, b):
    A, B = a.data, b.data
    ga = gb = None
    if a.requires_grad:
        if B.ndim == 2:
            ga = g @ B.T
        elif A.ndim == 2:
            # G^T H style: contract g and b over every axis but the row axis
            keep_g, keep_b = g.ndim - 2, B.ndim - 2
            ga = np.tensordot(g, B, axes=([i for i in range(g.ndim) if i != keep_g],
                                          [i for i in range(B.ndim) if i != keep_b]))
        else:
            ga = _sum_to(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape)
    if b.requires_grad:
        if B.ndim == 2 and A.ndim > 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        elif A.ndim == 2:
            gb = np.matmul(A.T, g)
        else:
            gb = _sum_to(np.matmul(np.swapaxes(A, -1, -2), g), B.shape)
    return ga, gb


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    return _make("transpose", np.swapaxes(a.data, -1, -2), (a,))


@_vjp("transpose")
def _transpose_vjp(g, out, a):
    return (np.swapaxes(g, -1, -2),)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,))


@_vjp("reshape")
def _reshape_vjp(g, out, a):
    return (g.reshape(a.shape),)


def permute(a, axes) -> Tensor:
    a = _as_tensor(a)
    return _make("permute", np.transpose(a.data, axes), (a,), ctx=tuple(axes))


@_vjp("permute")
def _permute_vjp(g, out, a):
    return (np.transpose(g, np.argsort(out._ctx)),)


# ----------------------------------------------------------- elementwise


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return _make("add", a.data + b.data, (a, b))


@_vjp("add")
def _add_vjp(g, out, a, b):
    return g, g


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    return _make("sub", a.data - b.data, (a, b))


@_vjp("sub")
def _sub_vjp(g, out, a, b):
    return g, -g


def _is_column_of(col, full) -> bool:
    return (col.ndim == full.ndim and col.shape[-1] == 1
            and col.shape[:-1] == full.shape[:-1])


def mul(a, b) -> Tensor:
    """Elementwise product; one side may be a column ``[..., 1]`` broadcast over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not (_is_column_of(a.data, b.data) or _is_column_of(b.data, a.data)):
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}")
    return _make("mul", a.data * b.data, (a, b))


@_vjp("mul")
def _mul_vjp(g, out, a, b):
    ga = gb = None
    if a.requires_grad:
        ga = g * b.data
        if ga.shape != a.shape:
            ga = ga.sum(axis=-1, keepdims=True)
    if b.requires_grad:
        gb = g * a.data
        if gb.shape != b.shape:
            gb = gb.sum(axis=-1, keepdims=True)
    return ga, gb


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    return _make("scale", a.data * a.data.dtype.type(s), (a,), ctx=s)


@_vjp("scale")
def _scale_vjp(g, out, a):
    return (g * g.dtype.type(out._ctx),)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return _make("relu", np.maximum(a.data, 0), (a,))


@_vjp("relu")
def _relu_vjp(g, out, a):
    # subgradient 0 at exactly 0
    return (np.where(a.data > 0, g, 0).astype(g.dtype),)


def add_bias(a, bias) -> Tensor:
    """Add a ``[D]`` row vector to every row of ``a[..., D]``."""
    a, bias = _as_tensor(a), _as_tensor(bias)
    if bias.data.ndim != 1 or bias.shape[0] != a.shape[-1]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match rows of {a.shape}")
    return _make("add_bias", a.data + bias.data, (a, bias))


@_vjp("add_bias")
def _add_bias_vjp(g, out, a, bias):
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
    return g, gb


def affine(x, weight, bias) -> Tensor:
    return add_bias(matmul(x, weight), bias)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make("softmax_rows", y, (x,))


@_vjp("softmax_rows")
def _softmax_vjp(g, out, x):
    y = out.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Parameter-free normalisation over the last axis."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv
    return _make("layer_norm", y.astype(x.dtype, copy=False), (x,), ctx=inv)


@_vjp("layer_norm")
def _layer_norm_vjp(g, out, x):
    y, inv = out.data, out._ctx
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * y).mean(axis=-1, keepdims=True)
    return ((inv * (g - gm - y * gy)).astype(g.dtype, copy=False),)


# --------------------------------------------------------- structural ops


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_last_dim needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_last_dim: leading shape {p.shape[:-1]} != {lead}")
    if len(parts) == 1:
        return parts[0]
    widths = [p.shape[-1] for p in parts]
    return _make("concat", np.concatenate([p.data for p in parts], axis=-1), parts, ctx=widths)


@_vjp("concat")
def _concat_vjp(g, out, *parts):
    bounds = np.cumsum([0] + out._ctx)
    return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))


def take_rows(table, idx) -> Tensor:
    """Row lookup ``table[idx]``; the gradient lands only on the rows read."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx[(idx < 0) | (idx >= n)].flat[0])
        raise IndexError(f"index {bad} out of range for table with {n} rows")
    return _make("take_rows", table.data[idx], (table,), ctx=idx)


@_vjp("take_rows")
def _take_rows_vjp(g, out, table):
    gt = np.zeros_like(table.data)
    np.add.at(gt, out._ctx, g)
    return (gt,)


def expand(a, axis: int, size: int) -> Tensor:
    """Insert ``axis`` and replicate ``a`` ``size`` times along it."""
    a = _as_tensor(a)
    ex = np.expand_dims(a.data, axis)
    shape = list(ex.shape)
    shape[axis] = size
    return _make("expand", np.broadcast_to(ex, shape), (a,), ctx=axis)


@_vjp("expand")
def _expand_vjp(g, out, a):
    return (g.sum(axis=out._ctx),)


def take_column(a, k: int) -> Tensor:
    """``a[..., k:k+1]`` as a column tensor."""
    a = _as_tensor(a)
    return _make("take_column", a.data[..., k:k + 1], (a,), ctx=k)


@_vjp("take_column")
def _take_column_vjp(g, out, a):
    ga = np.zeros_like(a.data)
    ga[..., out._ctx:out._ctx + 1] = g
    return (ga,)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    return _make("sum_all", np.asarray(a.data.sum()), (a,))


@_vjp("sum_all")
def _sum_all_vjp(g, out, a):
    return (np.broadcast_to(g, a.shape).astype(a.dtype),)


def masked_mae(pred, target, mask=None) -> Tensor:
    """Mean absolute error over entries where ``mask`` is true.

    ``target`` and ``mask`` are constants. With nothing unmasked the loss is 0.
    """
    pred = _as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != t.shape:
        raise ShapeError(f"masked_mae: pred {pred.shape} vs target {t.shape}")
    m = np.ones(t.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    diff = pred.data - t
    if count == 0:
        val = np.zeros((), dtype=pred.dtype)
    else:
        val = np.asarray(np.abs(diff[m]).sum() / count, dtype=pred.dtype)
    return _make("masked_mae", val, (pred,), ctx=(np.sign(diff) * m, count))


@_vjp("masked_mae")
def _masked_mae_vjp(g, out, pred):
    sign, count = out._ctx
    if count == 0:
        return (np.zeros_like(pred.data),)
    return ((g * sign / count).astype(pred.dtype),)


# ----------------------------------------------------------- parameters


class Parameter(Tensor):
    """A named trainable leaf with Adam moment buffers."""

    __slots__ = ("name", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, value: np.ndarray):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def name_key(seed: int, name: str) -> int:
    """128-bit Philox key from the store seed and a parameter name."""
    h = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return ((seed & (2**64 - 1)) << 64) | h


def init_uniform(seed: int, name: str, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) drawn from a stream keyed by (seed, name)."""
    rng = np.random.Generator(np.random.Philox(key=name_key(seed, name)))
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ParamStore:
    """Insertion-ordered collection of named parameters."""

    seed: int = 0
    dtype: type = np.float32
    params: "OrderedDict[str, Parameter]" = field(default_factory=OrderedDict)

    def create(self, name: str, shape, fan_in: int | None = None, zero: bool = False) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if zero:
            value = np.zeros(shape, dtype=self.dtype)
        else:
            value = init_uniform(self.seed, name, shape, fan_in or shape[0], self.dtype)
        p = Parameter(name, value)
        self.params[name] = p
        return p

    def add(self, p: Parameter) -> Parameter:
        if p.name in self.params:
            raise KeyError(f"duplicate parameter name {p.name!r}")
        self.params[p.name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def numel(self) -> int:
        return sum(p.data.size for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for n, v in values.items():
            p = self.params[n]
            if v.shape != p.shape:
                raise ShapeError(f"restore {n}: shape {v.shape} != {p.shape}")
            p.data = np.array(v, dtype=p.dtype)

    def astype(self, dtype) -> None:
        self.dtype = dtype
        for p in self:
            p.data = p.data.astype(dtype)
            p.grad = p.grad.astype(dtype)
            p.adam_m = p.adam_m.astype(dtype)
            p.adam_v = p.adam_v.astype(dtype)


# ----------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_err.values())

    def failures(self) -> dict[str, float]:
        return {n: e for n, e in self.max_rel_err.items() if e > self.tol}


def grad_check(f: Callable[[ParamStore], Tensor], store: ParamStore, eps: float = 1e-6,
               tol: float = 1e-4, floor: float = 1e-6,
               names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare backprop gradients to central differences, element by element.

    The relative error of one element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    store.zero_grad()
    f(store).backward()
    analytic = {p.name: p.grad.copy() for p in store}
    report = {}
    for p in store:
        if names is not None and p.name not in names:
            continue
        flat = p.data.reshape(-1)
        grad = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(store).data)
            flat[i] = orig - eps
            down = float(f(store).data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise GradCheckError(f"non-finite objective while perturbing {p.name}[{i}]")
            num = (up - down) / (2 * eps)
            ana = float(grad[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
        report[p.name] = worst
    store.zero_grad()
    return GradCheckReport(report, tol)
