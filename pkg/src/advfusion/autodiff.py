"""A small define-by-run reverse-mode autodiff engine on top of numpy.

Every op returns a new :class:`Tensor`.  When gradients are enabled and any
input requires a gradient, the output remembers its parents and a backward
rule.  Each recorded node carries a monotone sequence number, so the set of
nodes reachable from a loss sorted by descending sequence number is a reverse
topological order of the tape built during that forward pass.

Broadcasting between two tensors is limited to identical shapes or a scalar
operand.  Bias vectors go through :func:`add_bias` and constant masks through
:func:`add_constant`, which keeps shape bugs loud.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_seq = itertools.count()
_grad_enabled = True
_relu_log = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    if a.shape == b.shape:
        return "same"
    if _is_scalar(b):
        return "b_scalar"
    if _is_scalar(a):
        return "a_scalar"
    raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, t: Tensor):
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=t.dtype).reshape(t.shape)


# ----------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, getattr(a, "dtype", None))
    _binary_shapes(a, b, "add")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, getattr(a, "dtype", None))
    _binary_shapes(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, getattr(a, "dtype", None))
    _binary_shapes(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _make(a.data * b.data, (a, b), bw)


def scale(x, c: float):
    x = _as_tensor(x)
    c = x.dtype.type(c)

    def bw(g):
        return (g * c,)

    return _make(x.data * c, (x,), bw)


def relu(x):
    x = _as_tensor(x)
    pos = x.data > 0
    if _relu_log is not None:
        _relu_log.append(pos)

    def bw(g):
        return (g * pos,)

    return _make(np.where(pos, x.data, x.dtype.type(0)), (x,), bw)


def elementwise(op: str, *inputs, factor=None):
    """Dispatch by name: ``add``, ``relu`` or ``scale``."""
    if op == "add":
        return add(*inputs)
    if op == "relu":
        return relu(*inputs)
    if op == "scale":
        return scale(inputs[0], factor if factor is not None else inputs[1])
    raise UsageError(f"unknown elementwise op {op!r}")


def add_bias(x, b):
    """``x + b`` where ``b`` is a vector matching the last axis of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")

    def bw(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _make(x.data + b.data, (x, b), bw)


def add_constant(x, c):
    """Add a non-differentiable numpy constant broadcastable to ``x``."""
    c = np.asarray(c, dtype=x.dtype)
    try:
        out = x.data + c
    except ValueError as exc:
        raise DimensionError(f"add_constant: {c.shape} not broadcastable to {x.shape}") from exc
    if out.shape != x.shape:
        raise DimensionError(f"add_constant: {c.shape} would grow {x.shape}")
    return _make(out, (x,), lambda g: (g,))


# ----------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across the leading axes of ``a``) or has the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def reshape(x, shape):
    old = x.shape
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(old),))


def swapaxes(x, ax1, ax2):
    return _make(np.swapaxes(x.data, ax1, ax2), (x,), lambda g: (np.swapaxes(g, ax1, ax2),))


def stack(tensors, axis):
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def take_last(x, index: int, axis: int):
    """Select one slice along ``axis`` (dropping that axis)."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        idx = [slice(None)] * len(shape)
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return _make(np.take(x.data, index, axis=axis), (x,), bw)


def embedding(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DimensionError(f"embedding: id out of range for table of {vocab} rows")
    return _make(table.data[ids], (table,), bw)


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    n = x.size
    return scale(sum(x), 1.0 / n)


# ----------------------------------------------------------------------------
# normalisation and losses


def softmax_lastdim(x):
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_lastdim: empty last dimension in {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise UsageError("layer_norm: eps must be positive")
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, h).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, h).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw)


def cross_entropy_logits(logits, targets, ignore_id=-100):
    """Mean token cross-entropy over positions whose target is not ``ignore_id``."""
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise DimensionError(f"cross_entropy_logits: {t.shape[0]} targets for logits {logits.shape}")
    keep = t != ignore_id
    bad = np.flatnonzero(keep & ((t < 0) | (t >= V)))
    if bad.size:
        from .errors import DataError

        raise DataError(f"target {t[bad[0]]} out of range [0, {V}) at position {bad[0]}")
    n = int(keep.sum())
    if n == 0:
        return _make(np.asarray(0.0, dtype=logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),))
    rows = np.flatnonzero(keep)
    sel = flat[rows]
    m = sel.max(axis=1, keepdims=True)
    lse = np.log(np.exp(sel - m).sum(axis=1, keepdims=True)) + m
    logp = sel - lse
    loss = -logp[np.arange(n), t[rows]].sum() / n

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t[rows]] -= 1
        full = np.zeros_like(flat)
        full[rows] = p * (g / n)
        return (full.reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ----------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = {}
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        for p in node._parents:
            if p.requires_grad and id(p) not in nodes:
                stack_.append(p)
    order = sorted(nodes.values(), key=lambda n: n._seq, reverse=True)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype).reshape(node.shape)
            else:
                node.grad += g.reshape(node.shape)
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(tensors):
    for t in tensors:
        t.zero_grad()


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    n_checked: int
    n_kink_skipped: int
    extended_precision: bool


@contextlib.contextmanager
def _record_relu_signs(log):
    global _relu_log
    prev = _relu_log
    _relu_log = log
    try:
        yield log
    finally:
        _relu_log = prev


def finite_diff_report(f, params, n_samples=200, h=1e-5, seed=0, extended=True):
    """Compare analytic gradients with central differences.

    ``f`` rebuilds the graph and returns a scalar Tensor on every call.
    ``params`` must be 64-bit leaves; analytic gradients are computed at that
    precision.  When ``extended`` is set and the platform's ``longdouble`` is
    wider than float64, the perturbed losses are evaluated in extended
    precision, which removes most of the cancellation noise of
    ``(f(p+h) - f(p-h)) / 2h``.  A coordinate whose perturbation flips the
    sign of any ReLU input straddles a kink; it is skipped and another
    coordinate is drawn.  The relative error of one coordinate is
    ``|a - n| / (max(|a|, |n|) + 1e-12)``.
    """
    if not h > 0:
        raise UsageError("finite_diff_check: step h must be positive")
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise UsageError("finite_diff_check runs in 64-bit mode only")
    use_ext = extended and np.finfo(np.longdouble).eps < np.finfo(np.float64).eps
    saved = [(p.requires_grad, p.data) for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NumericError("finite_diff_check: loss is not finite")
        backward(loss)
        analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        if use_ext:
            for p in params:
                p.data = p.data.astype(np.longdouble)
        sizes = np.array([p.size for p in params])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        total = int(offsets[-1])
        rng = np.random.default_rng(seed)
        order = rng.permutation(total)
        worst, checked, skipped = 0.0, 0, 0
        with no_grad():
            for c in order:
                if checked >= n_samples:
                    break
                k = int(np.searchsorted(offsets, c, side="right") - 1)
                flat = params[k].data.reshape(-1)
                j = int(c - offsets[k])
                orig = flat[j]
                with _record_relu_signs([]) as plus:
                    flat[j] = orig + h
                    fp = f().data
                with _record_relu_signs([]) as minus:
                    flat[j] = orig - h
                    fm = f().data
                flat[j] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("finite_diff_check: perturbed loss is not finite")
                if any(not np.array_equal(a, b) for a, b in zip(plus, minus)):
                    skipped += 1
                    continue
                num = float((fp - fm) / (2 * flat.dtype.type(h)))
                ana = float(analytic[k].reshape(-1)[j])
                err = abs(ana - num) / (max(abs(ana), abs(num)) + 1e-12)
                worst = max(worst, err)
                checked += 1
        return FiniteDiffReport(worst, checked, skipped, use_ext)
    finally:
        for p, (rg, data) in zip(params, saved):
            p.requires_grad = rg
            p.data = data
            p.grad = None


def finite_diff_check(f, params, n_samples=200, h=1e-5, seed=0, extended=True):
    """Largest relative error between analytic and central-difference gradients.

    See :func:`finite_diff_report` for the procedure.
    """
    return finite_diff_report(f, params, n_samples, h, seed, extended).max_rel_error
