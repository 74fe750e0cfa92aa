"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records a Wengert list of operations while ordinary Python
code runs on :class:`Var` objects.  The recorded program can be replayed
with new leaf values (:func:`evaluate`) and differentiated with a single
reverse sweep (:meth:`Tape.backward`, :func:`gradient`).

Every public operation below is *generic*: called with plain arrays it
returns ``numpy`` results directly, called with at least one :class:`Var`
it records a node.  Flow layers and target densities are written once
against these functions and serve both the fast numeric path and the
differentiable path.

Values may be arrays of any shape.  Elementwise operations follow numpy
broadcasting; ``matvec``/``affine`` contract over the last axis.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, NumericalError

# Operation kinds that carry a local adjoint rule.  The structural kinds at
# the end (indexing, concatenation, ...) are needed to express coupling
# partitions and spline bin lookups.
OPERATION_KINDS = (
    "add", "sub", "mul", "div", "neg", "exp", "log", "tanh", "sigmoid",
    "square", "sqrt", "sum", "dot", "matvec", "affine", "max", "min", "abs",
    "getitem", "concat", "reshape", "cumsum", "take", "where", "clip",
)
# Kinds whose outputs are treated as constants by the reverse sweep.
NONDIFF_KINDS = ("stop", "amax", "between", "bin_index")


class Var:
    """A node on a :class:`Tape`."""

    __slots__ = ("tape", "index", "kind", "parents", "value", "attrs",
                 "requires_grad")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape, index, kind, parents, value, attrs, requires_grad):
        self.tape = tape
        self.index = index
        self.kind = kind
        self.parents = parents
        self.value = value
        self.attrs = attrs
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __repr__(self):
        return f"Var(#{self.index} {self.kind}, shape={self.shape})"

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
        return neg(self)

    def __pow__(self, power):
        if power == 2:
            return square(self)
        if power == 0.5:
            return sqrt(self)
        if isinstance(power, int) and power >= 1:
            out = self
            for _ in range(power - 1):
                out = mul(out, self)
            return out
        raise ContractViolation("only positive integer powers and 0.5 are supported")

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


# --------------------------------------------------------------------------
# forward rules


def _matvec(w, x):
    return x @ w.T


def _affine(x, w, b):
    return x @ w.T + b


def _sum(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _bin_index(knots, u):
    # knots: (..., K+1) increasing, u: (...)
    n_bins = knots.shape[-1] - 1
    idx = np.sum(u[..., None] >= knots, axis=-1) - 1
    return np.clip(idx, 0, n_bins - 1)


def _concat(*arrays, axis=-1):
    arrays = [np.asarray(a) for a in arrays]
    if axis == -1:
        lead = np.broadcast_shapes(*(a.shape[:-1] for a in arrays))
        arrays = [np.broadcast_to(a, lead + a.shape[-1:]) for a in arrays]
    return np.concatenate(arrays, axis=axis)


def _take(a, idx):
    return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]


_FORWARD = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "neg": np.negative,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "sigmoid": expit,
    "square": np.square,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sum": _sum,
    "dot": lambda a, b: np.sum(a * b, axis=-1),
    "matvec": _matvec,
    "affine": _affine,
    "max": np.maximum,
    "min": np.minimum,
    "getitem": lambda a, key: a[key],
    "concat": _concat,
    "reshape": lambda a, shape: np.reshape(a, shape),
    "cumsum": lambda a, axis=-1: np.cumsum(a, axis=axis),
    "take": _take,
    "where": np.where,
    "clip": np.clip,
    "stop": lambda a: a,
    "amax": lambda a, axis=None, keepdims=False: np.max(a, axis=axis,
                                                        keepdims=keepdims),
    "between": lambda a, lo, hi: (a >= lo) & (a <= hi),
    "bin_index": _bin_index,
}


# --------------------------------------------------------------------------
# adjoint rules: (g, node, parent values) -> tuple of parent adjoints


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _shape(v):
    return np.shape(v)


def _vjp_add(g, node, a, b):
    return _unbroadcast(g, _shape(a)), _unbroadcast(g, _shape(b))


def _vjp_sub(g, node, a, b):
    return _unbroadcast(g, _shape(a)), _unbroadcast(-g, _shape(b))


def _vjp_mul(g, node, a, b):
    return _unbroadcast(g * b, _shape(a)), _unbroadcast(g * a, _shape(b))


def _vjp_div(g, node, a, b):
    return (_unbroadcast(g / b, _shape(a)),
            _unbroadcast(-g * a / (b * b), _shape(b)))


def _vjp_sum(g, node, a):
    axis = node.attrs.get("axis")
    if axis is not None and not node.attrs.get("keepdims"):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, _shape(a)),)


def _vjp_dot(g, node, a, b):
    g = np.expand_dims(g, -1)
    return _unbroadcast(g * b, _shape(a)), _unbroadcast(g * a, _shape(b))


def _weight_grad(g, x):
    g2 = np.reshape(g, (-1, g.shape[-1]))
    x2 = np.reshape(x, (-1, x.shape[-1]))
    return g2.T @ x2


def _vjp_matvec(g, node, w, x):
    x = np.asarray(x)
    gx = _unbroadcast(g @ w, x.shape)
    return _weight_grad(g, np.broadcast_to(x, g.shape[:-1] + x.shape[-1:])), gx


def _vjp_affine(g, node, x, w, b):
    x = np.asarray(x)
    gx = _unbroadcast(g @ w, x.shape)
    gw = _weight_grad(g, np.broadcast_to(x, g.shape[:-1] + x.shape[-1:]))
    return gx, gw, _unbroadcast(g, _shape(b))


def _vjp_max(g, node, a, b):
    mask = np.asarray(a) >= np.asarray(b)
    return (_unbroadcast(np.where(mask, g, 0.0), _shape(a)),
            _unbroadcast(np.where(mask, 0.0, g), _shape(b)))


def _vjp_min(g, node, a, b):
    mask = np.asarray(a) <= np.asarray(b)
    return (_unbroadcast(np.where(mask, g, 0.0), _shape(a)),
            _unbroadcast(np.where(mask, 0.0, g), _shape(b)))


def _is_basic_key(key):
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, slice))
               for k in keys)


def _vjp_getitem(g, node, a):
    key = node.attrs["key"]
    out = np.zeros(_shape(a))
    if _is_basic_key(key):
        out[key] += g
    else:
        np.add.at(out, key, g)
    return (out,)


def _vjp_concat(g, node, *arrays):
    axis = node.attrs.get("axis", -1)
    sizes = [np.shape(a)[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]
    parts = np.split(g, splits, axis=axis)
    return tuple(_unbroadcast(p, _shape(a)) for p, a in zip(parts, arrays))


def _vjp_cumsum(g, node, a):
    axis = node.attrs.get("axis", -1)
    rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
    return (rev,)


def _vjp_take(g, node, a, idx):
    out = np.zeros(_shape(a))
    np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
    return out, None


def _vjp_where(g, node, cond, a, b):
    return (None,
            _unbroadcast(np.where(cond, g, 0.0), _shape(a)),
            _unbroadcast(np.where(cond, 0.0, g), _shape(b)))


def _vjp_clip(g, node, a):
    lo, hi = node.attrs["a_min"], node.attrs["a_max"]
    a = np.asarray(a)
    return (np.where((a > lo) & (a < hi), g, 0.0),)


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": lambda g, node, a: (-g,),
    "exp": lambda g, node, a: (g * node.value,),
    "log": lambda g, node, a: (g / a,),
    "tanh": lambda g, node, a: (g * (1.0 - node.value ** 2),),
    "sigmoid": lambda g, node, a: (g * node.value * (1.0 - node.value),),
    "square": lambda g, node, a: (2.0 * g * a,),
    "sqrt": lambda g, node, a: (0.5 * g / node.value,),
    "abs": lambda g, node, a: (g * np.sign(a),),
    "sum": _vjp_sum,
    "dot": _vjp_dot,
    "matvec": _vjp_matvec,
    "affine": _vjp_affine,
    "max": _vjp_max,
    "min": _vjp_min,
    "getitem": _vjp_getitem,
    "concat": _vjp_concat,
    "reshape": lambda g, node, a: (np.reshape(g, _shape(a)),),
    "cumsum": _vjp_cumsum,
    "take": _vjp_take,
    "where": _vjp_where,
    "clip": _vjp_clip,
}


# --------------------------------------------------------------------------


class Tape:
    """Append-only record of operations, topologically ordered by construction."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.inputs: list[Var] = []
        self.outputs: list[Var] = []
        self.last_sweep_visits = 0

    def __len__(self):
        return len(self.nodes)

    def _new(self, kind, parents, value, attrs, requires_grad):
        node = Var(self, len(self.nodes), kind, parents, value, attrs,
                   requires_grad)
        self.nodes.append(node)
        return node

    def variable(self, value) -> Var:
        """Register a leaf variable (differentiable input)."""
        node = self._new("input", (), np.asarray(value, dtype=float), {}, True)
        self.inputs.append(node)
        return node

    def constant(self, value) -> Var:
        return self._new("const", (), np.asarray(value), {}, False)

    def lift(self, value) -> Var:
        if isinstance(value, Var):
            if value.tape is not self:
                raise ContractViolation("variables from different tapes mixed")
            return value
        return self.constant(value)

    def record(self, kind, args, attrs) -> Var:
        parents = tuple(self.lift(a) for a in args)
        value = _FORWARD[kind](*(p.value for p in parents), **attrs)
        requires = (kind not in NONDIFF_KINDS
                    and any(p.requires_grad for p in parents))
        return self._new(kind, parents, value, attrs, requires)

    def set_output(self, *outputs: Var):
        for out in outputs:
            if out.tape is not self:
                raise ContractViolation("output belongs to another tape")
        self.outputs = list(outputs)

    def _output(self):
        if self.outputs:
            return self.outputs
        if not self.nodes:
            raise ContractViolation("empty tape")
        return [self.nodes[-1]]

    def evaluate(self, input_values):
        """Replay the recorded program with new leaf values.

        Raises :class:`NumericalError` with the node index when any
        intermediate value is non-finite.
        """
        input_values = list(input_values)
        if len(input_values) != len(self.inputs):
            raise ContractViolation(
                f"expected {len(self.inputs)} input values, got "
                f"{len(input_values)}")
        supplied = {leaf.index: np.asarray(v, dtype=float)
                    for leaf, v in zip(self.inputs, input_values)}
        for node in self.nodes:
            if node.kind == "input":
                value = supplied[node.index]
                if value.shape != node.value.shape:
                    raise ContractViolation(
                        f"input #{node.index} has shape {value.shape}, "
                        f"recorded {node.value.shape}")
            elif node.kind == "const":
                continue
            else:
                value = _FORWARD[node.kind](*(p.value for p in node.parents),
                                            **node.attrs)
            if (np.issubdtype(np.asarray(value).dtype, np.floating)
                    and not np.all(np.isfinite(value))):
                raise NumericalError(
                    f"non-finite value at node {node.index} ({node.kind})",
                    location=node.index)
            node.value = value
        outs = [o.value for o in self._output()]
        return outs[0] if len(outs) == 1 else tuple(outs)

    def backward(self, output: Var | None = None, seed=None) -> dict:
        """One reverse sweep from ``output``; returns ``{node index: adjoint}``."""
        if output is None:
            outs = self._output()
            if len(outs) != 1:
                raise ContractViolation("backward needs a single output")
            output = outs[0]
        if seed is None:
            if np.size(output.value) != 1:
                raise ContractViolation(
                    "gradient requires a scalar output; got shape "
                    f"{output.shape}")
            seed = np.ones_like(output.value, dtype=float)
        grads = {output.index: np.asarray(seed, dtype=float)}
        visits = 0
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads.pop(node.index, None)
            if node.kind in ("input", "const"):
                if g is not None:
                    grads[node.index] = g
                continue
            if g is None or not node.requires_grad:
                continue
            visits += 1
            parent_grads = _VJP[node.kind](g, node,
                                           *(p.value for p in node.parents))
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        self.last_sweep_visits = visits
        return grads

    def grad_of(self, grads: dict, var: Var):
        g = grads.get(var.index)
        if g is None:
            return np.zeros(np.shape(var.value))
        return np.asarray(g, dtype=float).reshape(np.shape(var.value))


def evaluate(tape: Tape, input_values):
    return tape.evaluate(input_values)


def gradient(tape: Tape, input_values):
    """Replay ``tape`` at ``input_values`` and return d(output)/d(inputs).

    When every leaf is a scalar the result is a flat vector, otherwise a
    list with one array per leaf.
    """
    outs = tape._output()
    if len(outs) != 1:
        raise ContractViolation("gradient requires a single-output tape")
    tape.evaluate(input_values)
    grads = tape.backward(outs[0])
    per_leaf = [tape.grad_of(grads, leaf) for leaf in tape.inputs]
    if all(np.ndim(leaf.value) == 0 for leaf in tape.inputs):
        return np.array([float(g) for g in per_leaf])
    return per_leaf


def trace(function, *args):
    """Record ``function(*args)`` on a fresh tape.

    Returns ``(tape, leaves, output)``; the output is registered as the
    tape output.
    """
    tape = Tape()
    leaves = [tape.variable(a) for a in args]
    out = tape.lift(function(*leaves))
    tape.set_output(out)
    return tape, leaves, out


def value_and_grad(function, *args):
    """Value of a scalar ``function`` and its gradient w.r.t. each argument."""
    tape, leaves, out = trace(function, *args)
    grads = tape.backward(out)
    result = tuple(tape.grad_of(grads, leaf) for leaf in leaves)
    return float(out.value), result[0] if len(result) == 1 else result


def check_gradient(function, point, step=1e-5) -> float:
    """Largest relative gap between reverse-mode and central differences.

    The relative error per coordinate is ``|a - b| / max(1, |a|, |b|)``;
    non-finite comparisons count as ``inf``.
    """
    if step <= 0:
        raise ContractViolation("step must be positive")
    point = np.asarray(point, dtype=float)
    try:
        _, analytic = value_and_grad(function, point)
    except (FloatingPointError, ArithmeticError, ValueError):
        return float("inf")
    analytic = np.ravel(analytic)
    flat = point.ravel()
    worst = 0.0
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = float(np.sum(function(hi.reshape(point.shape))))
        f_lo = float(np.sum(function(lo.reshape(point.shape))))
        numeric = (f_hi - f_lo) / (2.0 * step)
        a = analytic[i]
        if not (np.isfinite(a) and np.isfinite(numeric)):
            return float("inf")
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


# --------------------------------------------------------------------------
# generic operations


def _find_tape(args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _op(kind, *args, **attrs):
    tape = _find_tape(args)
    if tape is None:
        return _FORWARD[kind](*args, **attrs)
    return tape.record(kind, args, attrs)


def add(a, b):
    return _op("add", a, b)


def sub(a, b):
    return _op("sub", a, b)


def mul(a, b):
    return _op("mul", a, b)


def div(a, b):
    return _op("div", a, b)


def neg(a):
    return _op("neg", a)


def exp(a):
    return _op("exp", a)


def log(a):
    return _op("log", a)


def tanh(a):
    return _op("tanh", a)


def sigmoid(a):
    return _op("sigmoid", a)


def square(a):
    return _op("square", a)


def sqrt(a):
    return _op("sqrt", a)


def abs_(a):
    return _op("abs", a)


def sum_(a, axis=None, keepdims=False):
    return _op("sum", a, axis=axis, keepdims=keepdims)


def dot(a, b):
    """Inner product over the last axis."""
    return _op("dot", a, b)


def matvec(w, x):
    """``x @ w.T`` for ``w`` of shape (out, in) and ``x`` of shape (..., in)."""
    return _op("matvec", w, x)


def affine(x, w, b):
    return _op("affine", x, w, b)


def maximum(a, b):
    return _op("max", a, b)


def minimum(a, b):
    return _op("min", a, b)


def getitem(a, key):
    return _op("getitem", a, key=key)


def concat(arrays, axis=-1):
    tape = _find_tape(arrays)
    if tape is None:
        return _concat(*arrays, axis=axis)
    return tape.record("concat", tuple(arrays), {"axis": axis})


def reshape(a, shape):
    return _op("reshape", a, shape=tuple(shape))


def cumsum(a, axis=-1):
    return _op("cumsum", a, axis=axis)


def take(a, idx):
    """Gather ``a[..., idx[...]]`` along the last axis."""
    return _op("take", a, idx)


def where(cond, a, b):
    return _op("where", cond, a, b)


def clip(a, lo, hi):
    return _op("clip", a, a_min=lo, a_max=hi)


def stop_gradient(a):
    return _op("stop", a)


def amax(a, axis=None, keepdims=False):
    """Maximum reduction; never differentiated (used for stabilisation)."""
    return _op("amax", a, axis=axis, keepdims=keepdims)


def between(a, lo, hi):
    return _op("between", a, lo=lo, hi=hi)


def bin_index(knots, u):
    return _op("bin_index", knots, u)


# composites


def softplus(a):
    """``log(1 + exp(a))`` computed without overflow."""
    return maximum(a, 0.0) + log(1.0 + exp(-abs_(a)))


def log_sigmoid(a):
    return -softplus(-a)


def logsumexp(a, axis=-1):
    m = amax(a, axis=axis, keepdims=True)
    m_flat = amax(a, axis=axis)
    return log(sum_(exp(a - m), axis=axis)) + m_flat


def softmax(a, axis=-1):
    e = exp(a - amax(a, axis=axis, keepdims=True))
    return e / sum_(e, axis=axis, keepdims=True)


def value(a):
    """Numeric value of a Var or array."""
    return a.value if isinstance(a, Var) else a


def is_traced(*args) -> bool:
    return _find_tape(args) is not None
