"""Flow container, layer protocol and shared numerical helpers.

Convention: a flow's forward map ``f`` sends data ``x`` to latent ``z``.
Sampling pushes base draws through ``f^{-1}``.  Every layer implements

    forward(x, p, ctx) -> (y, log|det dy/dx|)
    inverse(y, p, ctx) -> (x, log|det dx/dy|)

with ``x`` of shape ``(n, d)`` and log-dets of shape ``(n,)``.  ``p`` is the
layer's parameter dict; its entries are ndarrays on the fast path or tape
variables when a loss is being differentiated, and layer code is written
with the generic operations of :mod:`nfmc.diff` so both cases share it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diff as d
from ..errors import ContractViolation, InputError, NumericalError
from ..utils import std_normal_logpdf


@dataclass
class FlowContext:
    """Evaluation options threaded through every layer call.

    ``rng`` feeds stochastic log-det estimators, ``probes`` is the number of
    Hutchinson probes, ``exact_trace`` replaces random probes by the
    coordinate basis.  ``penalty`` accumulates regularization terms (the
    continuous flow's Jacobian-norm penalty) while a loss is built.
    """

    rng: np.random.Generator | None = None
    probes: int = 1
    exact_trace: bool = False
    penalty: object = 0.0

    def require_rng(self, who):
        if self.rng is None and not self.exact_trace:
            raise InputError(f"{who} needs a random stream for its log-det "
                             "estimator")
        return self.rng


def probe_vectors(ctx: FlowContext, n, dim, who="layer"):
    """Hutchinson probes of shape ``(P, n, dim)`` and the averaging weight."""
    if ctx.exact_trace:
        return np.eye(dim)[:, None, :], 1.0
    rng = ctx.require_rng(who)
    p = max(1, int(ctx.probes))
    return rng.standard_normal((p, n, dim)), 1.0 / p


def lead_shape(x):
    return np.shape(d.value(x))[:-1]


def zeros_logdet(x):
    return np.zeros(lead_shape(x))


class Bijection:
    """Base class.  Subclasses define ``param_shapes`` and the two maps."""

    kind = "bijection"
    deterministic = True

    def __init__(self, dim):
        self.dim = int(dim)

    def param_shapes(self) -> dict:
        return {}

    def init_params(self, rng) -> dict:
        return {k: np.zeros(s) for k, s in self.param_shapes().items()}

    def n_params(self):
        return int(sum(np.prod(s, dtype=int) for s in self.param_shapes().values()))

    def forward(self, x, p, ctx):
        raise NotImplementedError

    def map(self, x, p):
        """Forward output without the log-det."""
        return self.forward(x, p, FlowContext(exact_trace=True))[0]

    def inverse(self, y, p, ctx):
        raise NotImplementedError

    # persistent non-trainable state (spectral vectors)
    def buffers(self) -> dict:
        return {}

    def set_buffers(self, buffers: dict):
        pass

    def refresh(self, p, iterations):
        pass

    def describe(self):
        return {"kind": self.kind}


def solve_monotone(alpha, beta, e, rhs, iterations=100):
    """Solve ``t + alpha * tanh(beta * t + e) = rhs`` elementwise.

    Requires ``1 + alpha * beta > 0`` so the left side is increasing; the
    root lies within ``|alpha|`` of ``rhs``.  Bisection followed by a few
    guarded Newton steps.
    """
    alpha, beta, e, rhs = np.broadcast_arrays(*(np.asarray(v, dtype=float)
                                               for v in (alpha, beta, e, rhs)))
    span = np.abs(alpha) + 1e-12
    lo = rhs - span
    hi = rhs + span
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        val = mid + alpha * np.tanh(beta * mid + e) - rhs
        pos = val > 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
        if np.all(hi - lo <= 4e-16 * np.maximum(1.0, np.abs(mid))):
            break
    t = 0.5 * (lo + hi)
    for _ in range(3):
        th = np.tanh(beta * t + e)
        f = t + alpha * th - rhs
        fp = 1.0 + alpha * beta * (1.0 - th * th)
        step = f / fp
        nt = t - step
        ok = np.isfinite(nt) & (np.abs(f) > 0)
        t = np.where(ok, nt, t)
    return t


def implicit_inverse(layer, y, p, ctx, x_star, jacobian):
    """Differentiable handle on an iteratively computed inverse.

    ``x_star`` solves ``f(x; p) = y`` numerically and ``jacobian`` is
    ``df/dx`` at ``x_star`` (shape ``(n, d, d)``).  The returned expression
    ``x* - J^{-1} (f(x*; p) - y)`` has value ``x*`` (up to the solve error)
    and the implicit-function derivatives with respect to ``p`` and ``y``.
    """
    n, dim = x_star.shape
    jinv = np.linalg.inv(jacobian)
    r = layer.map(x_star, p) - y
    corr = d.sum_(jinv * d.reshape(r, (n, 1, dim)), axis=-1)
    return x_star - corr


class FlowModel:
    """Standard-normal base plus an ordered list of bijections."""

    def __init__(self, dim, layers, params=None, architecture="custom",
                 hyperparameters=None, seed=0):
        self.dim = int(dim)
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            if layer.dim != self.dim:
                raise ContractViolation(f"layer {i} has dimension {layer.dim}")
        if params is None:
            rng = np.random.default_rng(seed)
            params = [layer.init_params(rng) for layer in self.layers]
        self.params = [dict(p) for p in params]
        self.architecture = architecture
        self.hyperparameters = dict(hyperparameters or {})
        self.seed = seed
        self.frozen = False
        self.default_probes = 20
        self.hyperparam_id = None

    def __repr__(self):
        kinds = ",".join(l.kind for l in self.layers)
        return f"FlowModel(dim={self.dim}, layers=[{kinds}])"

    # -- parameters -------------------------------------------------------

    @property
    def deterministic_logdet(self):
        return all(layer.deterministic for layer in self.layers)

    @property
    def n_parameters(self):
        return sum(layer.n_params() for layer in self.layers)

    def _keys(self):
        for i, layer in enumerate(self.layers):
            for name in layer.param_shapes():
                yield i, name

    def get_parameters(self) -> np.ndarray:
        parts = [np.ravel(self.params[i][name]) for i, name in self._keys()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_parameters(self, flat, power_iterations=50):
        if self.frozen:
            raise ContractViolation("flow is frozen")
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_parameters,):
            raise ContractViolation(f"expected {self.n_parameters} parameters, "
                                    f"got shape {flat.shape}")
        pos = 0
        for i, name in self._keys():
            shape = self.layers[i].param_shapes()[name]
            size = int(np.prod(shape, dtype=int))
            self.params[i][name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        self.refresh(power_iterations)

    parameters = property(get_parameters, set_parameters)

    def refresh(self, iterations):
        for layer, p in zip(self.layers, self.params):
            layer.refresh(p, iterations)

    def freeze(self):
        self.frozen = True
        return self

    def unfreeze(self):
        self.frozen = False
        return self

    def traced_parameters(self, tape):
        """Tape variables for every parameter, in flat order."""
        leaves = []
        dicts = []
        for layer, p in zip(self.layers, self.params):
            q = {}
            for name in layer.param_shapes():
                var = tape.variable(p[name])
                q[name] = var
                leaves.append(var)
            dicts.append(q)
        return dicts, leaves

    def flatten_grads(self, tape, grads, leaves):
        parts = [np.ravel(tape.grad_of(grads, v)) for v in leaves]
        return np.concatenate(parts) if parts else np.zeros(0)

    def buffers(self):
        return [layer.buffers() for layer in self.layers]

    def set_buffers(self, buffers):
        for layer, b in zip(self.layers, buffers):
            layer.set_buffers(b)

    # -- maps -------------------------------------------------------------

    def context(self, rng=None, probes=None, exact_trace=False):
        return FlowContext(rng=rng, probes=self.default_probes if probes is None
                           else probes, exact_trace=exact_trace)

    def forward_expr(self, x, params, ctx, check=True):
        logdet = 0.0
        for i, (layer, p) in enumerate(zip(self.layers, params)):
            x, ld = layer.forward(x, p, ctx)
            logdet = logdet + ld
            if check and not d.is_traced(x):
                _check_finite(x, ld, i, "forward")
        return x, logdet + zeros_logdet(x)

    def inverse_expr(self, z, params, ctx, check=True):
        logdet = 0.0
        for i in reversed(range(len(self.layers))):
            z, ld = self.layers[i].inverse(z, params[i], ctx)
            logdet = logdet + ld
            if check and not d.is_traced(z):
                _check_finite(z, ld, i, "inverse")
        return z, logdet + zeros_logdet(z)

    def _prepare(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise InputError(f"expected points of dimension {self.dim}, got "
                             f"shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InputError("non-finite input point")
        return x, single

    def forward(self, x, ctx=None, rng=None):
        """``(z, log|det df/dx|)``; accepts one point or a batch."""
        x, single = self._prepare(x)
        ctx = ctx or self.context(rng)
        with np.errstate(all="ignore"):
            z, ld = self.forward_expr(x, self.params, ctx)
        return (z[0], float(ld[0])) if single else (z, ld)

    def inverse(self, z, ctx=None, rng=None):
        """``(x, log|det df^{-1}/dz|)``."""
        z, single = self._prepare(z)
        ctx = ctx or self.context(rng)
        with np.errstate(all="ignore"):
            x, ld = self.inverse_expr(z, self.params, ctx)
        return (x[0], float(ld[0])) if single else (x, ld)

    def forward_unchecked(self, x, ctx):
        """Batch forward pass letting non-finite rows through (sampler use)."""
        with np.errstate(all="ignore"):
            return self.forward_expr(x, self.params, ctx, check=False)

    def inverse_unchecked(self, z, ctx):
        with np.errstate(all="ignore"):
            return self.inverse_expr(z, self.params, ctx, check=False)

    def log_prob(self, x, ctx=None, rng=None):
        z, ld = self.forward(x, ctx=ctx, rng=rng)
        return std_normal_logpdf(z) + ld

    def sample(self, rng, n):
        """``n`` draws and their log densities under the flow."""
        if n < 1:
            raise InputError("sample count must be >= 1")
        z = rng.standard_normal((int(n), self.dim))
        x, ld = self.inverse(z, ctx=self.context(rng))
        return x, std_normal_logpdf(z) - ld

    # -- persistence ------------------------------------------------------

    def to_checkpoint(self) -> dict:
        return {
            "architecture": self.architecture,
            "dim": self.dim,
            "hyperparameters": self.hyperparameters,
            "parameters": self.get_parameters().tolist(),
            "seed": self.seed,
            "buffers": [{k: np.asarray(v).tolist() for k, v in b.items()}
                        for b in self.buffers()],
        }


def _check_finite(x, ld, index, direction):
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(ld))):
        raise NumericalError(f"non-finite value in {direction} pass of layer "
                             f"{index}", location=index)
