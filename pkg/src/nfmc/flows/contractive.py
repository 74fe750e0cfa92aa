"""Contractive residual layers ``y = x + g(x)`` with Lip(g) < 1."""

import math

import numpy as np

from .. import diff as d
from ..errors import ConvergenceError, InputError
from .base import Bijection, implicit_inverse, probe_vectors
from .nets import MLP


def power_iteration(w, u=None, v=None, iterations=1):
    """Top singular value estimate ``u^T W v`` and the updated vectors."""
    w = np.asarray(w, dtype=float)
    if u is None:
        u = np.ones(w.shape[0]) / np.sqrt(w.shape[0])
    if v is None:
        v = np.ones(w.shape[1]) / np.sqrt(w.shape[1])
    for _ in range(iterations):
        wv = w.T @ u
        n = np.linalg.norm(wv)
        if n == 0:
            break
        v = wv / n
        wu = w @ v
        n = np.linalg.norm(wu)
        if n == 0:
            break
        u = wu / n
    return float(u @ w @ v), u, v


def spectral_normalize(w, iterations=1, coefficient=0.9, vectors=None):
    """``W * min(1, coefficient / sigma)`` with ``sigma`` by power iteration.

    ``vectors`` (a dict with ``u`` and ``v``) persists the power-iteration
    state between calls and is updated in place.
    """
    if iterations < 1:
        raise InputError("iterations must be >= 1")
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        return w
    vectors = {} if vectors is None else vectors
    sigma, u, v = power_iteration(w, vectors.get("u"), vectors.get("v"), iterations)
    vectors["u"], vectors["v"] = u, v
    return w * min(1.0, coefficient / sigma) if sigma > 0 else w


def hutchinson_trace(jvp, dim, probes, rng):
    """``mean_i w_i^T J w_i`` with standard-normal probes.

    ``jvp`` maps an array of probes ``(probes, dim)`` to ``J`` applied to
    each row.
    """
    if probes < 1:
        raise InputError("probes must be >= 1")
    w = rng.standard_normal((int(probes), int(dim)))
    return float(np.mean(np.sum(w * jvp(w), axis=-1)))


def contractive_logdet(jvp, n, dim, ctx, estimator="power_series", n_terms=30,
                       p_stop=0.5):
    """Estimate ``log det(I + J_g)`` per point from Jacobian-vector products.

    Power series: ``sum_{k<=n_terms} (-1)^{k+1}/k w^T J^k w``.  Roulette:
    the series truncated at ``N ~ Geometric(p_stop)`` (support 1, 2, ...),
    term ``k`` divided by ``P(N >= k) = (1 - p_stop)^{k-1}``, which is
    unbiased for the infinite series.
    """
    w, weight = probe_vectors(ctx, n, dim, "contractive layer")
    if estimator == "power_series":
        coefs = np.array([(-1.0) ** (k + 1) / k for k in range(1, n_terms + 1)])
        mask = None
        kmax = n_terms
    elif estimator == "roulette":
        rng = ctx.require_rng("roulette estimator")
        if rng is None:
            raise InputError("the roulette estimator needs a random stream")
        stops = rng.geometric(p_stop, size=n)
        kmax = int(stops.max())
        ks = np.arange(1, kmax + 1)
        coefs = (-1.0) ** (ks + 1) / ks / (1.0 - p_stop) ** (ks - 1)
        mask = (ks[:, None] <= stops[None, :]).astype(float)    # (kmax, n)
    else:
        raise InputError(f"unknown estimator {estimator!r}")
    total = 0.0
    v = w
    for k in range(kmax):
        v = jvp(v)
        term = d.sum_(w * v, axis=-1)                            # (P, n)
        c = coefs[k] if mask is None else coefs[k] * mask[k]
        total = total + c * term
    return weight * d.sum_(total, axis=0)


def contractive_inverse(g, y, tolerance=1e-8, max_iterations=1000):
    """Banach iteration ``x <- y - g(x)`` from ``x = y``.

    Returns ``(x, iterations)``; stops when successive iterates differ by
    less than ``tolerance`` in the max norm.
    """
    if tolerance <= 0:
        raise InputError("tolerance must be positive")
    x = np.array(y, dtype=float)
    delta = np.inf
    for k in range(1, max_iterations + 1):
        x_new = y - g(x)
        delta = float(np.max(np.abs(x_new - x))) if x.size else 0.0
        x = x_new
        if not np.isfinite(delta):
            break
        if delta < tolerance:
            return x, k
    raise ConvergenceError(f"fixed-point inverse did not converge in "
                           f"{max_iterations} iterations (residual {delta:.3g})",
                           iterations=max_iterations, residual=delta)


def contractive_hidden_size(dim):
    return 3 * max(math.ceil(math.log10(dim)) if dim > 1 else 0, 4)


class SpectralMLP:
    """``g(x) = W2 tanh(W1 x + b1) + b2`` with spectrally normalized weights."""

    def __init__(self, dim, hidden, coefficient=0.9, seed=0):
        self.mlp = MLP([dim, hidden, dim], zero_last=True)
        self.coefficient = coefficient
        rng = np.random.default_rng(seed)
        self.vectors = []
        for out, inp in ((hidden, dim), (dim, hidden)):
            u = rng.standard_normal(out)
            v = rng.standard_normal(inp)
            self.vectors.append({"u": u / np.linalg.norm(u),
                                 "v": v / np.linalg.norm(v)})

    def param_shapes(self):
        return self.mlp.param_shapes()

    def init_params(self, rng):
        return self.mlp.init_params(rng)

    def refresh(self, p, iterations):
        if iterations < 1:
            return
        for i, vec in enumerate(self.vectors):
            _, vec["u"], vec["v"] = power_iteration(
                d.value(p[f"W{i}"]), vec["u"], vec["v"], iterations)

    def weights(self, p):
        out = []
        for i, vec in enumerate(self.vectors):
            w = p[f"W{i}"]
            sigma = d.sum_(vec["u"] * d.matvec(w, vec["v"]))
            out.append(w * (self.coefficient / d.maximum(sigma, self.coefficient)))
        return out

    def linearize(self, x, p):
        return self.mlp.linearize(x, p, weights=self.weights(p))

    def buffers(self):
        out = {}
        for i, vec in enumerate(self.vectors):
            out[f"u{i}"] = vec["u"].copy()
            out[f"v{i}"] = vec["v"].copy()
        return out

    def set_buffers(self, buffers):
        for i, vec in enumerate(self.vectors):
            vec["u"] = np.asarray(buffers[f"u{i}"], dtype=float)
            vec["v"] = np.asarray(buffers[f"v{i}"], dtype=float)


class LinearResidual:
    """Fixed linear residual ``g(x) = A x`` (no parameters)."""

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def param_shapes(self):
        return {}

    def init_params(self, rng):
        return {}

    def refresh(self, p, iterations):
        pass

    def linearize(self, x, p):
        a = self.matrix
        return d.matvec(a, x), (lambda v: d.matvec(a, v))

    def buffers(self):
        return {}

    def set_buffers(self, buffers):
        pass


class ContractiveResidual(Bijection):
    """``y = x + g(x)``; log-det by a power series or Russian roulette."""

    kind = "contractive_residual"
    deterministic = False

    def __init__(self, dim, net=None, estimator="power_series", n_terms=30,
                 p_stop=0.5, tolerance=1e-8, max_iterations=1000, seed=0,
                 coefficient=0.9):
        super().__init__(dim)
        self.net = net or SpectralMLP(dim, contractive_hidden_size(dim),
                                      coefficient, seed)
        self.estimator = estimator
        self.n_terms = n_terms
        self.p_stop = p_stop
        self.tolerance = tolerance
        self.max_iterations = max_iterations
        self.last_iterations = 0

    def param_shapes(self):
        return self.net.param_shapes()

    def init_params(self, rng):
        return self.net.init_params(rng)

    def refresh(self, p, iterations):
        self.net.refresh(p, iterations)

    def buffers(self):
        return self.net.buffers()

    def set_buffers(self, buffers):
        self.net.set_buffers(buffers)

    def map(self, x, p):
        gx, _ = self.net.linearize(x, p)
        return x + gx

    def logdet(self, x, p, ctx):
        n = np.shape(d.value(x))[0]
        _, jvp = self.net.linearize(x, p)
        return contractive_logdet(jvp, n, self.dim, ctx, self.estimator,
                                  self.n_terms, self.p_stop)

    def forward(self, x, p, ctx):
        gx, jvp = self.net.linearize(x, p)
        n = np.shape(d.value(x))[0]
        ld = contractive_logdet(jvp, n, self.dim, ctx, self.estimator,
                                self.n_terms, self.p_stop)
        return x + gx, ld

    def jacobian(self, x, p):
        _, jvp = self.net.linearize(x, p)
        cols = jvp(np.broadcast_to(np.eye(self.dim)[:, None, :],
                                   (self.dim,) + x.shape))
        return np.eye(self.dim) + np.transpose(cols, (1, 2, 0))

    def solve(self, y, p):
        pv = {k: d.value(v) for k, v in p.items()}
        g = lambda x: self.net.linearize(x, pv)[0]
        x, self.last_iterations = contractive_inverse(g, y, self.tolerance,
                                                      self.max_iterations)
        return x

    def inverse(self, y, p, ctx):
        x_star = self.solve(d.value(y), p)
        if d.is_traced(y, *p.values()):
            pv = {k: d.value(v) for k, v in p.items()}
            x = implicit_inverse(self, y, p, ctx, x_star, self.jacobian(x_star, pv))
        else:
            x = x_star
        return x, -self.logdet(x, p, ctx)

    def describe(self):
        return {"kind": self.kind, "estimator": self.estimator}
