"""Reverse-mode automatic differentiation on numpy-valued computation graphs.

A ``Var`` wraps a float64 numpy array (scalars are 0-d arrays) and records the
operation that produced it. ``backward`` replays the recorded graph in reverse
creation order, so gradient accumulation is an ordered, deterministic
reduction: re-running backward on the same graph is bitwise reproducible.

Every public function in this module dispatches on type: given plain numpy
inputs it computes with numpy and returns numpy, given at least one ``Var`` it
records the op. Numeric code elsewhere in the package is written once against
these functions and serves both the differentiable and the plain-evaluation
paths.

Subgradient conventions at non-differentiable points (documented once, used
everywhere): ``maximum``/``minimum`` route ties to the first argument,
``absolute`` takes the left branch (slope -1 at 0), reductions ``amin``/
``amax`` route to the lowest index among ties, ``clip`` has zero gradient on
the boundary.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as _expit

_NODE_COUNTER = itertools.count()

# When set, backward raises GradError on the first non-finite adjoint instead
# of silently propagating NaNs into the optimizer.
NAN_GUARD = True

# Kept for API symmetry with the concurrency contract: accumulation in this
# implementation is always the ordered (creation-order) reduction.
DETERMINISTIC_REDUCTION = True


class GradError(RuntimeError):
    """Raised when backward propagation encounters a non-finite adjoint."""


def _as_value(x):
    return np.asarray(x, dtype=np.float64)


class Var:
    """One node of the computation graph: a value plus its local pullback."""

    __slots__ = ("value", "parents", "vjp", "op", "node_id", "is_leaf")

    def __init__(self, value, parents=(), vjp=None, op="leaf", leaf=False):
        self.value = _as_value(value)
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.node_id = next(_NODE_COUNTER)
        self.is_leaf = leaf

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def detach(self):
        return self.value

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    # -- operator sugar -------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)


def leaf(value):
    """Create a differentiable leaf (an optimizable parameter vector)."""
    return Var(value, leaf=True)


def value_of(x):
    """Plain numpy value of a Var or array-like."""
    return x.value if isinstance(x, Var) else _as_value(x)


def is_var(x):
    return isinstance(x, Var)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _record(op, out_value, parents, vjp):
    var_parents = tuple(p for p in parents if isinstance(p, Var))
    return Var(out_value, parents=var_parents, vjp=vjp, op=op)


# ---------------------------------------------------------------------------
# binary elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return _as_value(a) + _as_value(b)
    av, bv = value_of(a), value_of(b)
    out = av + bv

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append((a, _unbroadcast(g, av.shape)))
        if isinstance(b, Var):
            grads.append((b, _unbroadcast(g, bv.shape)))
        return grads

    return _record("add", out, (a, b), vjp)


def sub(a, b):
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return _as_value(a) - _as_value(b)
    av, bv = value_of(a), value_of(b)
    out = av - bv

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append((a, _unbroadcast(g, av.shape)))
        if isinstance(b, Var):
            grads.append((b, _unbroadcast(-g, bv.shape)))
        return grads

    return _record("sub", out, (a, b), vjp)


def mul(a, b):
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return _as_value(a) * _as_value(b)
    av, bv = value_of(a), value_of(b)
    out = av * bv

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append((a, _unbroadcast(g * bv, av.shape)))
        if isinstance(b, Var):
            grads.append((b, _unbroadcast(g * av, bv.shape)))
        return grads

    return _record("mul", out, (a, b), vjp)


def div(a, b):
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return _as_value(a) / _as_value(b)
    av, bv = value_of(a), value_of(b)
    out = av / bv

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append((a, _unbroadcast(g / bv, av.shape)))
        if isinstance(b, Var):
            grads.append((b, _unbroadcast(-g * av / (bv * bv), bv.shape)))
        return grads

    return _record("div", out, (a, b), vjp)


def maximum(a, b):
    """Elementwise max; at ties the gradient goes to the first argument."""
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return np.maximum(_as_value(a), _as_value(b))
    av, bv = value_of(a), value_of(b)
    out = np.maximum(av, bv)
    mask_a = av >= bv

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append((a, _unbroadcast(g * mask_a, av.shape)))
        if isinstance(b, Var):
            grads.append((b, _unbroadcast(g * ~mask_a, bv.shape)))
        return grads

    return _record("maximum", out, (a, b), vjp)


def minimum(a, b):
    """Elementwise min; at ties the gradient goes to the first argument."""
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return np.minimum(_as_value(a), _as_value(b))
    av, bv = value_of(a), value_of(b)
    out = np.minimum(av, bv)
    mask_a = av <= bv

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append((a, _unbroadcast(g * mask_a, av.shape)))
        if isinstance(b, Var):
            grads.append((b, _unbroadcast(g * ~mask_a, bv.shape)))
        return grads

    return _record("minimum", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# unary elementwise
# ---------------------------------------------------------------------------

def neg(a):
    if not isinstance(a, Var):
        return -_as_value(a)
    out = -a.value
    return _record("neg", out, (a,), lambda g: [(a, -g)])


def power(a, p):
    """a ** p with constant exponent p."""
    p = float(p)
    if not isinstance(a, Var):
        return _as_value(a) ** p
    av = a.value
    out = av ** p
    return _record("pow", out, (a,), lambda g: [(a, g * p * av ** (p - 1.0))])


def exp(a):
    if not isinstance(a, Var):
        return np.exp(_as_value(a))
    out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: [(a, g * out)])


def log(a):
    if not isinstance(a, Var):
        return np.log(_as_value(a))
    av = a.value
    out = np.log(av)
    return _record("log", out, (a,), lambda g: [(a, g / av)])


def sqrt(a):
    if not isinstance(a, Var):
        return np.sqrt(_as_value(a))
    out = np.sqrt(a.value)
    return _record("sqrt", out, (a,), lambda g: [(a, g * 0.5 / out)])


def sin(a):
    if not isinstance(a, Var):
        return np.sin(_as_value(a))
    av = a.value
    out = np.sin(av)
    return _record("sin", out, (a,), lambda g: [(a, g * np.cos(av))])


def cos(a):
    if not isinstance(a, Var):
        return np.cos(_as_value(a))
    av = a.value
    out = np.cos(av)
    return _record("cos", out, (a,), lambda g: [(a, -g * np.sin(av))])


def absolute(a):
    """abs with left-branch subgradient: slope -1 at exactly 0."""
    if not isinstance(a, Var):
        return np.abs(_as_value(a))
    av = a.value
    out = np.abs(av)
    sign = np.where(av > 0.0, 1.0, -1.0)
    return _record("abs", out, (a,), lambda g: [(a, g * sign)])


def _sigmoid(x):
    return _expit(x)


def _softplus(x, beta=1.0):
    # max(x, 0) + log1p(exp(-|x|)), measurably faster than np.logaddexp
    bx = x if beta == 1.0 else beta * x
    out = np.log1p(np.exp(-np.abs(bx)))
    out += np.maximum(bx, 0.0)
    if beta != 1.0:
        out /= beta
    return out


def sigmoid(a):
    if not isinstance(a, Var):
        return _expit(_as_value(a))
    out = _expit(a.value)
    return _record("sigmoid", out, (a,), lambda g: [(a, g * out * (1.0 - out))])


def softplus(a, beta=1.0):
    """log(1 + exp(beta x)) / beta, numerically stable; derivative sigmoid(beta x)."""
    if not isinstance(a, Var):
        return _softplus(_as_value(a), beta)
    av = a.value
    out = _softplus(av, beta)
    deriv = _expit(beta * av) if beta != 1.0 else _expit(av)
    return _record("softplus", out, (a,), lambda g: [(a, g * deriv)])


def clip(a, lo, hi):
    """Clamp to [lo, hi]; zero gradient outside the open interval."""
    if not isinstance(a, Var):
        return np.clip(_as_value(a), lo, hi)
    av = a.value
    out = np.clip(av, lo, hi)
    mask = (av > lo) & (av < hi)
    return _record("clip", out, (a,), lambda g: [(a, g * mask)])


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------

def sumval(a, axis=None, keepdims=False):
    if not isinstance(a, Var):
        return np.sum(_as_value(a), axis=axis, keepdims=keepdims)
    av = a.value
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return [(a, np.broadcast_to(g, av.shape).copy())]
        if not keepdims:
            g = np.expand_dims(g, axis)
        return [(a, np.broadcast_to(g, av.shape).copy())]

    return _record("sum", out, (a,), vjp)


def meanval(a, axis=None, keepdims=False):
    av = value_of(a)
    if axis is None:
        n = av.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([av.shape[ax] for ax in axes]))
    return div(sumval(a, axis=axis, keepdims=keepdims), float(n))


def amin(a, axis):
    """Min along an axis; gradient routed to the first (lowest-index) argmin."""
    if not isinstance(a, Var):
        return np.min(_as_value(a), axis=axis)
    av = a.value
    out = np.min(av, axis=axis)
    idx = np.argmin(av, axis=axis)

    def vjp(g):
        gx = np.zeros_like(av)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return [(a, gx)]

    return _record("amin", out, (a,), vjp)


def amax(a, axis):
    """Max along an axis; gradient routed to the first (lowest-index) argmax."""
    if not isinstance(a, Var):
        return np.max(_as_value(a), axis=axis)
    av = a.value
    out = np.max(av, axis=axis)
    idx = np.argmax(av, axis=axis)

    def vjp(g):
        gx = np.zeros_like(av)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return [(a, gx)]

    return _record("amax", out, (a,), vjp)


def _is_advanced_index(idx):
    if isinstance(idx, tuple):
        return any(isinstance(i, (np.ndarray, list)) for i in idx)
    return isinstance(idx, (np.ndarray, list))


def take(a, idx):
    """Indexing / slicing; backward scatter-adds (duplicate indices accumulate)."""
    if not isinstance(a, Var):
        return _as_value(a)[idx]
    av = a.value
    out = av[idx]
    advanced = _is_advanced_index(idx)

    def vjp(g):
        gx = np.zeros_like(av)
        if advanced:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        return [(a, gx)]

    return _record("take", out, (a,), vjp)


def reshape(a, shape):
    if not isinstance(a, Var):
        return _as_value(a).reshape(shape)
    av = a.value
    out = av.reshape(shape)
    return _record("reshape", out, (a,), lambda g: [(a, g.reshape(av.shape))])


def scatter(a, idx, size):
    """Place a 1-D vector at integer positions `idx` of a zeros(size) vector
    (the adjoint of `take` with an integer index)."""
    idx = np.asarray(idx)
    if not isinstance(a, Var):
        out = np.zeros(size)
        out[idx] = _as_value(a)
        return out
    out = np.zeros(size)
    out[idx] = a.value
    return _record("scatter", out, (a,), lambda g: [(a, g[idx])])


def stack(parts, axis=0):
    if not any(isinstance(p, Var) for p in parts):
        return np.stack([_as_value(p) for p in parts], axis=axis)
    values = [value_of(p) for p in parts]
    out = np.stack(values, axis=axis)

    def vjp(g):
        slabs = np.moveaxis(g, axis, 0)
        return [(p, slabs[i].reshape(values[i].shape)) for i, p in enumerate(parts) if isinstance(p, Var)]

    return _record("stack", out, tuple(parts), vjp)


def concat(parts, axis=0):
    if not any(isinstance(p, Var) for p in parts):
        return np.concatenate([_as_value(p) for p in parts], axis=axis)
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i, p in enumerate(parts):
            if isinstance(p, Var):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                grads.append((p, g[tuple(sl)]))
        return grads

    return _record("concat", out, tuple(parts), vjp)


def matmul(a, b):
    """a @ b where b is 2-D (in, out) and a is (..., in)."""
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return _as_value(a) @ _as_value(b)
    av, bv = value_of(a), value_of(b)
    if bv.ndim != 2:
        raise ValueError("matmul: right operand must be 2-D")
    out = av @ bv

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append((a, (g @ bv.T).reshape(av.shape)))
        if isinstance(b, Var):
            a2 = av.reshape(-1, av.shape[-1])
            g2 = g.reshape(-1, bv.shape[-1])
            grads.append((b, a2.T @ g2))
        return grads

    return _record("matmul", out, (a, b), vjp)


def cumprod(a, axis=-1):
    """Cumulative product; gradient assumes strictly nonzero inputs."""
    if not isinstance(a, Var):
        return np.cumprod(_as_value(a), axis=axis)
    av = a.value
    out = np.cumprod(av, axis=axis)

    def vjp(g):
        gy = g * out
        rev = np.flip(np.cumsum(np.flip(gy, axis=axis), axis=axis), axis=axis)
        return [(a, rev / av)]

    return _record("cumprod", out, (a,), vjp)


def norm(a, axis=-1, eps=1e-24):
    """Euclidean norm along an axis, guarded so the gradient at 0 is 0."""
    return sqrt(add(sumval(mul(a, a), axis=axis), eps))


def dot(a, b):
    return sumval(mul(a, b))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss, leaves):
    """Propagate d(loss)/d(leaf) for each leaf; untouched leaves get zeros.

    `loss` must be a scalar Var. Returns a list of numpy arrays aligned with
    `leaves`. Nodes are visited in strictly decreasing creation order, which
    makes accumulation an ordered deterministic reduction.
    """
    if not isinstance(loss, Var):
        raise TypeError("backward: loss must be a Var")
    if loss.value.size != 1:
        raise ValueError("backward: loss must be scalar")
    if not np.isfinite(loss.value):
        raise GradError(f"non-finite loss value in node kind '{loss.op}'")

    # Reachable subgraph, iterative DFS.
    nodes = {}
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if node.node_id in nodes:
            continue
        nodes[node.node_id] = node
        stack_.extend(node.parents)

    grads = {loss.node_id: np.ones_like(loss.value)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        if node.vjp is None:
            continue  # leaves keep their accumulated gradient
        g = grads.pop(node_id, None)
        if g is None:
            continue
        for parent, pg in node.vjp(g):
            # summing is a single pass; any NaN/Inf makes the sum non-finite
            if NAN_GUARD and not np.isfinite(np.sum(pg)):
                raise GradError(f"non-finite gradient produced by node kind '{node.op}'")
            acc = grads.get(parent.node_id)
            grads[parent.node_id] = pg if acc is None else acc + pg

    out = []
    for lf in leaves:
        g = grads.get(lf.node_id)
        out.append(np.zeros_like(lf.value) if g is None else np.asarray(g, dtype=np.float64))
    return out


# ---------------------------------------------------------------------------
# Adam and learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam moments for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        params = np.asarray(params)
        return cls(m=np.zeros_like(params, dtype=np.float64), v=np.zeros_like(params, dtype=np.float64))


def adam_step(state, params, grads, lr, active=None):
    """One Adam update. Entries where `active` is False stay bitwise untouched.

    Returns the updated parameter vector; `state` is updated in place.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("adam_step: parameter/gradient/state shape mismatch")
    state.step += 1
    t = state.step
    if active is None:
        state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
        m_hat = state.m / (1.0 - state.beta1 ** t)
        v_hat = state.v / (1.0 - state.beta2 ** t)
        return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    active = np.asarray(active, dtype=bool)
    new = params.copy()
    m = state.m[active]
    v = state.v[active]
    g = grads[active]
    m = state.beta1 * m + (1.0 - state.beta1) * g
    v = state.beta2 * v + (1.0 - state.beta2) * g * g
    state.m[active] = m
    state.v[active] = v
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new[active] = params[active] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new


@dataclass
class ParamGroup:
    """Named flat parameter vector with a geometric learning-rate schedule."""

    name: str
    values: np.ndarray
    lr_initial: float
    lr_final: float
    horizon: int
    adam: AdamState = field(default=None)
    active: np.ndarray = field(default=None)  # bool mask; None = all active

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.adam is None:
            self.adam = AdamState.for_params(self.values)

    def lr(self, iteration):
        return schedule(iteration, self.lr_initial, self.lr_final, self.horizon)


def schedule(iteration, lr_initial, lr_final, total):
    """Exponential decay: lr(i) = lr0 * (lrT/lr0)^(i/T), clamped to [0, T]."""
    if total <= 0:
        return lr_final
    frac = min(max(iteration, 0), total) / total
    return lr_initial * (lr_final / lr_initial) ** frac


def clip_global_norm(grad_list, max_norm):
    """Scale a list of gradient arrays in place so their joint norm <= max_norm."""
    total = 0.0
    for g in grad_list:
        total += float(np.sum(g * g))
    total = np.sqrt(total)
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        grad_list = [g * scale for g in grad_list]
    return grad_list
