"""Continuous flows: fixed-step ODE integration of a learned vector field."""

import numpy as np

from .. import diff as d
from ..errors import InputError, NumericalError
from .base import Bijection, FlowContext, probe_vectors
from .nets import MLP

SOLVER_STEPS = {"euler": 150, "rk4": 100}


class VelocityField:
    """``g(t, z)``: tanh MLP, with time appended to the input if requested."""

    def __init__(self, dim, hidden_size=10, n_hidden_layers=1, time_dependent=False):
        self.dim = dim
        self.time_dependent = time_dependent
        self.mlp = MLP([dim + int(time_dependent), *[hidden_size] * n_hidden_layers,
                        dim], zero_last=True)

    def param_shapes(self):
        return self.mlp.param_shapes()

    def init_params(self, rng):
        return self.mlp.init_params(rng)

    def linearize(self, t, z, p):
        if not self.time_dependent:
            return self.mlp.linearize(z, p)
        out, jvp = self.mlp.linearize(d.concat([z, np.full(1, t)], axis=-1), p)
        return out, (lambda v: jvp(d.concat([v, np.zeros(1)], axis=-1)))


class LinearField:
    """``g(t, z) = a z`` (no parameters), a closed-form test field."""

    def __init__(self, a):
        self.a = float(a)

    def param_shapes(self):
        return {}

    def init_params(self, rng):
        return {}

    def linearize(self, t, z, p):
        return self.a * z, (lambda v: self.a * v)


def _integrate(field, p, z, t0, t1, ctx, solver, steps):
    if t0 == t1:
        raise InputError("t_start must differ from t_end")
    if solver not in SOLVER_STEPS:
        raise InputError(f"unknown solver {solver!r}")
    n, dim = np.shape(d.value(z))
    w, weight = probe_vectors(ctx, n, dim, "continuous flow")
    h = (t1 - t0) / steps

    def rhs(t, state):
        g, jvp = field.linearize(t, state, p)
        jw = jvp(w)
        tr = weight * d.sum_(d.sum_(w * jw, axis=-1), axis=0)
        pen = weight * d.sum_(d.sum_(d.square(jw), axis=-1), axis=0)
        return g, tr, pen

    logdet = np.zeros(n)
    penalty = np.zeros(n)
    t = t0
    for k in range(steps):
        if solver == "euler":
            g, tr, pen = rhs(t, z)
            z = z + h * g
            logdet = logdet + h * tr
            penalty = penalty + abs(h) * pen
        else:
            g1, tr1, p1 = rhs(t, z)
            g2, tr2, p2 = rhs(t + h / 2, z + (h / 2) * g1)
            g3, tr3, p3 = rhs(t + h / 2, z + (h / 2) * g2)
            g4, tr4, p4 = rhs(t + h, z + h * g3)
            z = z + (h / 6) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
            logdet = logdet + (h / 6) * (tr1 + 2.0 * tr2 + 2.0 * tr3 + tr4)
            penalty = penalty + (abs(h) / 6) * (p1 + 2.0 * p2 + 2.0 * p3 + p4)
        t = t0 + (k + 1) * h
        if not d.is_traced(z) and not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite state at integration step {k}",
                                 location=k)
    return z, logdet, penalty


def cnf_integrate(field, z_start, t_start, t_end, rng=None, params=None,
                  solver="euler", steps=None, probes=1, exact_trace=False):
    """Integrate ``dz/dt = g(t, z)`` jointly with its Jacobian trace.

    Returns ``(z_end, log|det dz_end/dz_start|)``; the log-det is the
    integral of the Hutchinson trace estimate from ``t_start`` to ``t_end``
    and so changes sign with the integration direction.
    """
    z = np.asarray(z_start, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    ctx = FlowContext(rng=rng, probes=probes, exact_trace=exact_trace)
    with np.errstate(over="ignore", invalid="ignore"):
        z_end, ld, _ = _integrate(field, params or {}, z, float(t_start),
                                  float(t_end), ctx, solver,
                                  steps or SOLVER_STEPS[solver])
    return (z_end[0], float(ld[0])) if single else (z_end, ld)


class ContinuousFlow(Bijection):
    """Data-to-latent map is the ODE flow from t = 0 to t = 1."""

    kind = "continuous"
    deterministic = False

    def __init__(self, dim, hidden_size=10, n_hidden_layers=1, solver="euler",
                 steps=None, time_dependent=False, regularization=0.0):
        super().__init__(dim)
        if regularization < 0:
            raise InputError("regularization weight must be >= 0")
        self.field = VelocityField(dim, hidden_size, n_hidden_layers, time_dependent)
        self.solver = solver
        self.steps = steps or SOLVER_STEPS[solver]
        self.regularization = regularization

    def param_shapes(self):
        return self.field.param_shapes()

    def init_params(self, rng):
        return self.field.init_params(rng)

    def _run(self, x, p, ctx, t0, t1):
        z, ld, pen = _integrate(self.field, p, x, t0, t1, ctx, self.solver, self.steps)
        if self.regularization > 0:
            ctx.penalty = ctx.penalty + self.regularization * d.sum_(pen) / np.shape(d.value(pen))[0]
        return z, ld

    def forward(self, x, p, ctx):
        return self._run(x, p, ctx, 0.0, 1.0)

    def inverse(self, y, p, ctx):
        return self._run(y, p, ctx, 1.0, 0.0)

    def describe(self):
        return {"kind": self.kind, "solver": self.solver, "steps": self.steps,
                "regularization": self.regularization}
