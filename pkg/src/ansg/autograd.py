"""Minimal reverse-mode automatic differentiation over :mod:`ansg.tensor` kernels.

A :class:`Var` wraps an ndarray plus the information needed to push an
adjoint back to its inputs. Calling :func:`backward` on a scalar ``Var``
walks the recorded graph in reverse topological order and returns the
gradient of every named leaf (parameters). Reusing a leaf in several places
(e.g. shared recurrent weights) sums its contributions.

Ops accept plain arrays anywhere a ``Var`` is expected; those are treated as
constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError, UsageError


class Var:
    __slots__ = ("value", "parents", "vjp", "op", "name", "requires_grad")
    __array_ufunc__ = None  # make ndarray-op-Var dispatch to Var's reflected methods

    def __init__(self, value, parents=(), vjp=None, op="leaf", name=None, requires_grad=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.name = name
        if requires_grad is None:
            requires_grad = name is not None or any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape}, name={self.name})"

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

    def __neg__(self):
        return mul(self, -1.0)


def lift(x):
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x), op="const", requires_grad=False)


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def param(array, name):
    """A named leaf whose gradient :func:`backward` reports."""
    return Var(np.asarray(array), op="param", name=name)


def params_to_vars(params):
    return {k: param(v, k) for k, v in params.items()}


def node(val, parents, vjp, op):
    """Record an op result. ``vjp(g)`` returns one adjoint (or None) per parent."""
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Var(val, op=op, requires_grad=False)
    return Var(val, parents, vjp, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ------------------------------------------------------------------

def add(a, b):
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return node(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return node(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    return node(av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def sigmoid(x):
    x = lift(x)
    s = T.sigmoid(x.value)
    return node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x):
    x = lift(x)
    t = np.tanh(x.value)
    return node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x):
    x = lift(x)
    mask = x.value > 0
    return node(np.where(mask, x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def log(x):
    x = lift(x)
    v = x.value
    return node(np.log(v), (x,), lambda g: (g / v,), "log")


def clamp_min(x, lo):
    x = lift(x)
    keep = x.value >= lo
    return node(np.maximum(x.value, lo), (x,), lambda g: (g * keep,), "clamp_min")


def sum(x):  # noqa: A001 - mirrors numpy naming
    x = lift(x)
    shape, dt = x.shape, x.dtype
    return node(np.asarray(x.value.sum(), dtype=dt), (x,),
                lambda g: (np.broadcast_to(g, shape).astype(dt),), "sum")


def mean(x):
    x = lift(x)
    shape, dt, n = x.shape, x.dtype, x.value.size
    return node(np.asarray(x.value.sum() / n, dtype=dt), (x,),
                lambda g: (np.broadcast_to(g / n, shape).astype(dt),), "mean")


# structural -------------------------------------------------------------------

def concat_channels(*xs):
    xs = [lift(x) for x in xs]
    val = xs[0].value
    for x in xs[1:]:
        val = T.concat_channels(val, x.value)
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return node(val, xs, vjp, "concat")


def channel_slice(x, start, stop):
    x = lift(x)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return node(x.value[start:stop], (x,), vjp, "channel_slice")


def split_channels(x, n):
    """Split channels into ``n`` equal consecutive groups."""
    c = lift(x).shape[0]
    if c % n:
        raise DimensionError(f"cannot split {c} channels into {n} equal groups")
    k = c // n
    return [channel_slice(x, i * k, (i + 1) * k) for i in range(n)]


def crop(x, top, left, h, w):
    x = lift(x)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, top:top + h, left:left + w] = g
        return (full,)

    return node(x.value[:, top:top + h, left:left + w], (x,), vjp, "crop")


def crop_center(x, h, w):
    H, W = lift(x).shape[1:]
    if h > H or w > W:
        raise DimensionError(f"crop {h}x{w} exceeds input {H}x{W}")
    return crop(x, T.crop_offsets(H, h), T.crop_offsets(W, w), h, w)


def pad(x, top, bottom, left, right):
    x = lift(x)
    _, h, w = x.shape
    val = np.pad(x.value, ((0, 0), (top, bottom), (left, right)))
    return node(val, (x,), lambda g: (g[:, top:top + h, left:left + w],), "pad")


def reshape(x, shape):
    x = lift(x)
    old = x.shape
    return node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def fixed_transform(x, fwd, inv, op="transform"):
    """Apply a linear index permutation ``fwd`` whose adjoint is ``inv``."""
    x = lift(x)
    return node(np.ascontiguousarray(fwd(x.value)), (x,),
                lambda g: (np.ascontiguousarray(inv(g)),), op)


# network kernels ----------------------------------------------------------------

def conv2d(x, weights, bias=None, padding="valid"):
    x, weights = lift(x), lift(weights)
    parents = [x, weights]
    b = None
    if bias is not None:
        bias = lift(bias)
        parents.append(bias)
        b = bias.value
    xv, wv = x.value, weights.value
    out = T.conv2d(xv, wv, b, padding)

    def vjp(g):
        dx, dw = T.conv2d_backward(xv, wv, g, padding, x.requires_grad, weights.requires_grad)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return node(out, parents, vjp, "conv2d")


def deconv2(x, weights, bias=None):
    x, weights = lift(x), lift(weights)
    parents = [x, weights]
    b = None
    if bias is not None:
        bias = lift(bias)
        parents.append(bias)
        b = bias.value
    xv, wv = x.value, weights.value
    out = T.deconv2(xv, wv, b)

    def vjp(g):
        dx, dw = T.deconv2_backward(xv, wv, g)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return node(out, parents, vjp, "deconv2")


def max_pool2(x):
    x = lift(x)
    out, arg = T.max_pool2(x.value)
    shape = x.shape
    return node(out, (x,), lambda g: (T.max_pool2_backward(g, arg, shape),), "max_pool2")


def softmax_channels(x):
    x = lift(x)
    s = T.softmax_channels(x.value)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=0, keepdims=True)),)

    return node(s, (x,), vjp, "softmax")


def contract(wmat, cols):
    """Differentiable ``(O, K) @ (K, N)``."""
    wmat, cols = lift(wmat), lift(cols)
    a, b = wmat.value, cols.value
    return node(T.contract(a, b), (wmat, cols), lambda g: (g @ b.T, a.T @ g), "contract")


# reverse sweep --------------------------------------------------------------------

GradientSet = dict


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        n, done = stack.pop()
        if done:
            order.append(n)
            continue
        if id(n) in seen:
            continue
        seen.add(id(n))
        stack.append((n, True))
        for p in n.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, loss_seed=1.0):
    """Gradients of scalar ``root`` with respect to every named leaf.

    Returns a mapping ``name -> ndarray`` shaped like the parameter. Raises
    :class:`UsageError` for a non-scalar root and :class:`NumericError` when a
    non-finite adjoint appears (the message names the producing op).
    """
    if not isinstance(root, Var):
        raise UsageError("backward() needs a Var produced by autograd ops")
    if root.value.size != 1:
        raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
    grads = {id(root): np.full(root.shape, loss_seed, dtype=root.dtype)}
    out = {}
    for n in reversed(_topo_order(root)):
        g = grads.pop(id(n), None)
        if g is None:
            continue
        if n.name is not None:
            if n.name in out:
                raise UsageError(f"parameter {n.name!r} appears as more than one leaf")
            out[n.name] = g
        if not n.parents:
            continue
        for p, gp in zip(n.parents, n.vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            if not np.all(np.isfinite(gp)):
                raise NumericError(f"non-finite gradient produced by op {n.op!r}")
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + gp
            else:
                grads[k] = gp
    return out


def value_and_grad(f, params):
    """Evaluate ``f(vars)`` and return ``(loss_float, GradientSet)``."""
    loss = f(params_to_vars(params))
    return float(loss.value), backward(loss)


# finite differences ------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    n_total: int
    worst: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_error <= self.tol

    def format(self, label="gradcheck"):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{label}: {status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.0e} "
                 f"checked={self.n_checked}/{self.n_total}"]
        if not self.passed:
            for name, idx, a, b, r in self.worst:
                lines.append(f"  {name}{list(idx)} analytic={a:.6e} numeric={b:.6e} rel={r:.3e}")
        return "\n".join(lines)

    def raise_if_failed(self, label="gradcheck"):
        if not self.passed:
            raise NumericError(self.format(label))


def rel_error(a, b):
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def finite_diff_check(f, params, step=1e-4, tol=1e-4, full_sweep_below=10_000,
                      sample_size=256, seed=0, n_worst=5):
    """Compare :func:`backward` against central differences of ``f``.

    ``f`` maps a dict of parameters (Vars during the analytic pass, plain
    arrays during probing) to a scalar Var. Every coordinate is probed when
    there are fewer than ``full_sweep_below`` of them, otherwise a seeded
    random sample of ``sample_size``.
    """
    for k, v in params.items():
        if v.dtype != np.float64:
            raise UsageError(f"finite_diff_check needs float64 parameters; {k!r} is {v.dtype}")
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    _, grads = value_and_grad(f, params)

    coords = [(k, idx) for k, v in params.items() for idx in np.ndindex(v.shape)]
    n_total = len(coords)
    if n_total >= full_sweep_below:
        rng = np.random.default_rng(seed)
        pick = rng.choice(n_total, size=min(sample_size, n_total), replace=False)
        coords = [coords[i] for i in sorted(pick)]

    rows = []
    for k, idx in coords:
        p = params[k]
        orig = p[idx]
        p[idx] = orig + step
        fp = float(value(f(params)))
        p[idx] = orig - step
        fm = float(value(f(params)))
        p[idx] = orig
        numeric = (fp - fm) / (2 * step)
        analytic = float(grads[k][idx]) if k in grads else 0.0
        rows.append((k, idx, analytic, numeric, rel_error(analytic, numeric)))
    rows.sort(key=lambda r: -r[4])
    worst = rows[0][4] if rows else 0.0
    return GradCheckReport(worst, tol, len(rows), n_total, rows[:n_worst])
