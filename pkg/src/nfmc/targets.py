"""Benchmark target distributions.

Every target exposes an (optionally unnormalized) log density written with
the generic operations of :mod:`nfmc.diff`, a hand-derived gradient used in
sampler hot loops, and reference moments where they are known.  The tape
gradient (:meth:`Target.grad_log_density_tape`) is kept as the oracle the
analytic gradients are checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.special import expit, gammaln, log_expit

from . import diff as d
from .errors import DataError, InputError, MomentsUnavailable, SpecError
from .utils import LOG_2PI


def _softplus(x):
    return np.logaddexp(0.0, x)


def random_rotation(dim: int, seed: int) -> np.ndarray:
    """Seeded orthonormal matrix with determinant +1.

    QR of a standard-normal matrix, columns multiplied by the signs of the
    diagonal of R.  That sign fix alone leaves ``det Q = sign(det A)``, so a
    negative determinant is repaired by flipping the last column.
    """
    if dim < 1:
        raise SpecError("dim must be >= 1")
    a = np.random.default_rng(seed).standard_normal((dim, dim))
    q0, r = np.linalg.qr(a)
    q = q0 * np.sign(np.diag(r))[None, :]
    if np.linalg.det(q) < 0:
        q[:, -1] = -q[:, -1]
    return q


@dataclass
class PosteriorDataset:
    name: str
    columns: dict = field(default_factory=dict)

    def __post_init__(self):
        self.columns = {k: np.asarray(v, dtype=float)
                        for k, v in self.columns.items()}


def load_dataset(path) -> PosteriorDataset:
    """Read a ``{"name": ..., "columns": {...}}`` JSON dataset file."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"dataset file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed dataset JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict) or "columns" not in raw:
        raise DataError("dataset must be an object with a 'columns' entry")
    columns = raw["columns"]
    if not isinstance(columns, dict):
        raise DataError("'columns' must map names to arrays")
    try:
        dataset = PosteriorDataset(str(raw.get("name", Path(path).stem)),
                                   columns)
    except (TypeError, ValueError) as exc:
        raise DataError(f"columns must be numeric arrays: {exc}") from exc
    validate_dataset(dataset)
    return dataset


def validate_dataset(dataset: PosteriorDataset, family: str | None = None):
    cols = dataset.columns
    for name, col in cols.items():
        if not np.all(np.isfinite(col)):
            raise DataError(f"column {name!r} contains non-finite values")
    family = family or _guess_family(dataset)
    if family == "eight_schools":
        for key in ("y", "sigma"):
            if key not in cols:
                raise DataError(f"eight schools needs column {key!r}")
            if cols[key].ndim != 1:
                raise DataError(f"column {key!r} must be one-dimensional")
        if len(cols["y"]) != len(cols["sigma"]):
            raise DataError("columns 'y' and 'sigma' have different lengths")
        if len(cols["y"]) == 0:
            raise DataError("eight schools data is empty")
        if np.any(cols["sigma"] <= 0):
            raise DataError("'sigma' must be strictly positive")
    elif family in ("german_credit", "sparse_german_credit"):
        for key in ("x", "y"):
            if key not in cols:
                raise DataError(f"German credit needs column {key!r}")
        if cols["x"].ndim != 2:
            raise DataError("'x' must be a row-major matrix")
        if cols["y"].ndim != 1 or len(cols["y"]) != cols["x"].shape[0]:
            raise DataError("'y' length must match the rows of 'x'")
        if not np.all(np.isin(cols["y"], (0.0, 1.0))):
            raise DataError("labels 'y' must be 0 or 1")
    return dataset


def _guess_family(dataset):
    if "sigma" in dataset.columns:
        return "eight_schools"
    if "x" in dataset.columns:
        return "german_credit"
    return None


def load_reference_moments(path):
    try:
        raw = json.loads(Path(path).read_text())
        second = np.asarray(raw["second_moment"], dtype=float)
        variance = np.asarray(raw["variance"], dtype=float)
    except FileNotFoundError as exc:
        raise MomentsUnavailable(f"reference file not found: {path}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed reference-moment file {path}: {exc}") from exc
    return second, variance


class Target:
    """Base class: subclasses implement :meth:`log_density_expr`."""

    family = "target"

    def __init__(self, dim, name=None):
        if dim < 1:
            raise SpecError("dimension must be positive")
        self.dim = int(dim)
        self.name = name or f"{self.family}_{self.dim}d"
        self.reference_second_moment = None
        self.reference_variance = None

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"

    # generic expression; x has shape (..., dim)
    def log_density_expr(self, x):
        raise NotImplementedError

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise InputError(f"expected trailing dimension {self.dim}, got "
                             f"shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InputError("non-finite input point")
        return x

    def log_density(self, x):
        return self.log_density_expr(self._check(x))

    def grad_log_density(self, x):
        return self.grad_log_density_tape(x)

    def value_and_grad(self, x):
        return self.log_density(x), self.grad_log_density(x)

    def grad_log_density_tape(self, x):
        """Reverse-mode gradient of :meth:`log_density_expr` (the oracle)."""
        x = self._check(x)
        tape = d.Tape()
        xv = tape.variable(x)
        out = d.sum_(self.log_density_expr(xv))
        grads = tape.backward(out)
        return tape.grad_of(grads, xv)

    # unchecked paths for sampler inner loops: non-finite rows give nan/-inf
    def _logp(self, x):
        with np.errstate(all="ignore"):
            return self.log_density_expr(x)

    def _value_and_grad(self, x):
        with np.errstate(all="ignore"):
            return self.log_density_expr(x), self.grad_log_density_unchecked(x)

    def grad_log_density_unchecked(self, x):
        return self.grad_log_density(x)

    def reference_moments(self):
        """``(E[X_d^2], Var[X_d])`` or :class:`MomentsUnavailable`."""
        if self.reference_second_moment is None:
            raise MomentsUnavailable(
                f"no analytic reference moments for {self.name}; supply a "
                "reference-run file")
        return self.reference_second_moment.copy(), self.reference_variance.copy()

    def set_reference(self, second_moment, variance):
        second = np.asarray(second_moment, dtype=float)
        var = np.asarray(variance, dtype=float)
        if second.shape != (self.dim,) or var.shape != (self.dim,):
            raise DataError("reference vectors must have length = dimension")
        if np.any(var <= 0):
            raise DataError("reference variances must be positive")
        self.reference_second_moment = second
        self.reference_variance = var


# --------------------------------------------------------------------------
# Gaussians


class GaussianTarget(Target):
    """Zero-mean Gaussian with covariance ``Q diag(eigenvalues) Q^T``."""

    family = "gaussian"

    def __init__(self, eigenvalues, rotation=None, kind="full_rank", name=None):
        eigenvalues = np.asarray(eigenvalues, dtype=float)
        if np.any(eigenvalues <= 0):
            raise SpecError("eigenvalues must be positive")
        super().__init__(len(eigenvalues), name=name or f"{kind}_gaussian_"
                         f"{len(eigenvalues)}d")
        self.kind = kind
        self.eigenvalues = eigenvalues
        self.rotation = rotation
        if rotation is None:
            self.precision = None
            self.inv_var = 1.0 / eigenvalues
            variance = eigenvalues.copy()
        else:
            self.precision = (rotation / eigenvalues) @ rotation.T
            self.precision = 0.5 * (self.precision + self.precision.T)
            self.covariance = (rotation * eigenvalues) @ rotation.T
            variance = np.einsum("ij,j,ij->i", rotation, eigenvalues, rotation)
        self.log_norm = -0.5 * self.dim * LOG_2PI - 0.5 * np.sum(np.log(eigenvalues))
        self.set_reference(variance, variance)

    def log_density_expr(self, x):
        if self.precision is None:
            quad = d.sum_(d.square(x) * self.inv_var, axis=-1)
        else:
            quad = d.dot(x, d.matvec(self.precision, x))
        return -0.5 * quad + self.log_norm

    def grad_log_density(self, x):
        x = self._check(x)
        return self.grad_log_density_unchecked(x)

    def grad_log_density_unchecked(self, x):
        if self.precision is None:
            return -x * self.inv_var
        return -x @ self.precision


def standard_gaussian(dim):
    return GaussianTarget(np.ones(dim), kind="standard")


def diagonal_gaussian(dim):
    stds = np.linspace(1.0, 10.0, dim)
    return GaussianTarget(stds ** 2, kind="diagonal")


def full_rank_gaussian(dim, seed=0):
    return GaussianTarget(np.linspace(1.0, 10.0, dim),
                          rotation=random_rotation(dim, seed), kind="full_rank")


def ill_conditioned_eigenvalues(dim, seed=0, min_condition=1e3, attempts=1000):
    """Eigenvalues whose reciprocals are Gamma(shape 0.5, rate 1) draws.

    Redraws until the condition number exceeds ``min_condition``; after
    ``attempts`` draws the worst-conditioned candidate seen is kept.
    """
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(attempts):
        inv = rng.gamma(shape=0.5, scale=1.0, size=dim)
        eig = 1.0 / inv
        cond = eig.max() / eig.min()
        if best is None or cond > best[0]:
            best = (cond, eig)
        if cond > min_condition:
            return eig
    return best[1]


def ill_conditioned_gaussian(dim, seed=0):
    eig = ill_conditioned_eigenvalues(dim, seed)
    return GaussianTarget(eig, rotation=random_rotation(dim, seed + 1),
                          kind="ill_conditioned")


# --------------------------------------------------------------------------
# non-Gaussian unimodal


class Funnel(Target):
    """x1 ~ N(0, 3); x_i | x1 ~ N(0, exp(x1 / 2)) (standard deviations)."""

    family = "funnel"

    def __init__(self, dim=100, scale=3.0):
        if dim < 2:
            raise SpecError("funnel needs at least two dimensions")
        super().__init__(dim)
        self.scale = float(scale)
        # E[exp(x1)] for x1 ~ N(0, scale^2)
        rest = np.exp(self.scale ** 2 / 2.0)
        second = np.full(dim, rest)
        second[0] = self.scale ** 2
        self.set_reference(second, second.copy())

    def log_density_expr(self, x):
        x1 = x[..., 0]
        rest = x[..., 1:]
        k = self.dim - 1
        head = -0.5 * d.square(x1) / self.scale ** 2 - np.log(self.scale) - 0.5 * LOG_2PI
        tail = (-0.5 * d.sum_(d.square(rest), axis=-1) * d.exp(-x1)
                - 0.5 * k * x1 - 0.5 * k * LOG_2PI)
        return head + tail

    def grad_log_density(self, x):
        return self.grad_log_density_unchecked(self._check(x))

    def grad_log_density_unchecked(self, x):
        x1 = x[..., 0]
        rest = x[..., 1:]
        inv = np.exp(-x1)
        g = np.empty_like(x)
        g[..., 0] = (-x1 / self.scale ** 2 + 0.5 * np.sum(rest ** 2, axis=-1) * inv
                     - 0.5 * (self.dim - 1))
        g[..., 1:] = -rest * inv[..., None]
        return g


class Rosenbrock(Target):
    """Unnormalized -sum_d [s (x_{2d-1}^2 - x_{2d})^2 + (x_{2d-1} - 1)^2]."""

    family = "rosenbrock"

    def __init__(self, dim=100, scale=10.0):
        if dim % 2:
            raise SpecError("Rosenbrock dimension must be even")
        super().__init__(dim)
        self.scale = float(scale)
        # a ~ N(1, 1/2), b | a ~ N(a^2, 1/(2 s))
        var_a = 0.5
        e_a2 = 1.0 + var_a
        e_a4 = 1.0 + 6.0 * var_a + 3.0 * var_a ** 2
        e_b2 = e_a4 + 1.0 / (2.0 * self.scale)
        second = np.empty(dim)
        second[0::2] = e_a2
        second[1::2] = e_b2
        var = np.empty(dim)
        var[0::2] = var_a
        var[1::2] = e_b2 - e_a2 ** 2
        self.set_reference(second, var)

    def log_density_expr(self, x):
        a = x[..., 0::2]
        b = x[..., 1::2]
        return -d.sum_(self.scale * d.square(d.square(a) - b) + d.square(a - 1.0),
                       axis=-1)

    def grad_log_density(self, x):
        return self.grad_log_density_unchecked(self._check(x))

    def grad_log_density_unchecked(self, x):
        a = x[..., 0::2]
        b = x[..., 1::2]
        r = a ** 2 - b
        g = np.empty_like(x)
        g[..., 0::2] = -(4.0 * self.scale * r * a + 2.0 * (a - 1.0))
        g[..., 1::2] = 2.0 * self.scale * r
        return g


# --------------------------------------------------------------------------
# multimodal


class GaussianMixture(Target):
    """Mixture of diagonal Gaussian components."""

    family = "gaussian_mixture"

    def __init__(self, means, stds, weights, name=None):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        n_comp, dim = means.shape
        stds = np.asarray(stds, dtype=float)
        if stds.ndim == 1:
            stds = np.repeat(stds[:, None], dim, axis=1)
        weights = np.asarray(weights, dtype=float)
        if stds.shape != means.shape or weights.shape != (n_comp,):
            raise SpecError("mixture means, stds and weights disagree in shape")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise SpecError("mixture weights must be non-negative and sum to 1")
        if np.any(stds <= 0):
            raise SpecError("component standard deviations must be positive")
        super().__init__(dim, name=name)
        self.means = means
        self.stds = stds
        self.weights = weights
        with np.errstate(divide="ignore"):
            self.log_weights = np.log(weights)
        self.log_norms = (self.log_weights - np.sum(np.log(stds), axis=1)
                          - 0.5 * dim * LOG_2PI)
        mean = weights @ means
        second = weights @ (means ** 2 + stds ** 2)
        self.set_reference(second, second - mean ** 2)

    def _component_logs(self, x):
        # (..., k)
        xe = d.reshape(x, np.shape(d.value(x))[:-1] + (1, self.dim))
        z = (xe - self.means) / self.stds
        return -0.5 * d.sum_(d.square(z), axis=-1) + self.log_norms

    def log_density_expr(self, x):
        return d.logsumexp(self._component_logs(x), axis=-1)

    def grad_log_density(self, x):
        return self.grad_log_density_unchecked(self._check(x))

    def grad_log_density_unchecked(self, x):
        comp = self._component_logs(x)
        resp = np.exp(comp - np.max(comp, axis=-1, keepdims=True))
        resp /= resp.sum(axis=-1, keepdims=True)
        per = -(x[..., None, :] - self.means) / self.stds ** 2
        return np.sum(resp[..., None] * per, axis=-2)


def three_component_mixture(dim=100):
    means = np.repeat(np.array([-5.0, 0.0, 5.0])[:, None], dim, axis=1)
    t = GaussianMixture(means, np.full(3, 0.7), np.full(3, 1.0 / 3.0),
                        name=f"three_component_mixture_{dim}d")
    t.family = "three_component_mixture"
    return t


def twenty_component_mixture(dim=100, seed=0):
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 10.0, size=(20, dim))
    logits = rng.normal(size=20)
    w = np.exp(logits - logits.max())
    w /= w.sum()
    t = GaussianMixture(means, np.ones(20), w,
                        name=f"twenty_component_mixture_{dim}d")
    t.family = "twenty_component_mixture"
    return t


def double_well_moments():
    """Second moment of the 1-D density proportional to exp(-(x^2 - 4)^2)."""
    dens = lambda x: np.exp(-(x * x - 4.0) ** 2)
    z, _ = integrate.quad(dens, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12,
                          limit=200)
    m2, _ = integrate.quad(lambda x: x * x * dens(x), -np.inf, np.inf,
                           epsabs=1e-13, epsrel=1e-12, limit=200)
    return m2 / z


class DoubleWell(Target):
    family = "double_well"

    def __init__(self, dim=10):
        super().__init__(dim)
        m2 = double_well_moments()
        self.set_reference(np.full(dim, m2), np.full(dim, m2))

    def log_density_expr(self, x):
        return -d.sum_(d.square(d.square(x) - 4.0), axis=-1)

    def grad_log_density(self, x):
        return self.grad_log_density_unchecked(self._check(x))

    def grad_log_density_unchecked(self, x):
        return -4.0 * x * (x ** 2 - 4.0)


# --------------------------------------------------------------------------
# real-world posteriors


def _normal_logpdf(x, mean, std):
    return -0.5 * d.square((x - mean) / std) - np.log(std) - 0.5 * LOG_2PI


def _gamma_logpdf(x, shape, rate):
    return (shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * d.log(x)
            - rate * x)


class EightSchools(Target):
    """Parameters (mu, tau_tilde, theta'), tau = softplus(tau_tilde)."""

    family = "eight_schools"

    def __init__(self, dataset: PosteriorDataset):
        validate_dataset(dataset, "eight_schools")
        self.y = dataset.columns["y"]
        self.sigma = dataset.columns["sigma"]
        super().__init__(2 + len(self.y), name=f"eight_schools_{2 + len(self.y)}d")

    def log_density_expr(self, x):
        mu = x[..., 0]
        tau_t = x[..., 1]
        theta_p = x[..., 2:]
        tau = d.softplus(tau_t)
        log_tau = d.log(tau)
        lp = _normal_logpdf(mu, 0.0, 10.0)
        # LogNormal(5, 1) density of tau and the softplus Jacobian
        lp = lp - log_tau - 0.5 * LOG_2PI - 0.5 * d.square(log_tau - 5.0)
        lp = lp + d.log_sigmoid(tau_t)
        lp = lp + d.sum_(_normal_logpdf(theta_p, 0.0, 1.0), axis=-1)
        theta = d.reshape(mu, np.shape(d.value(mu)) + (1,)) + \
            d.reshape(tau, np.shape(d.value(tau)) + (1,)) * theta_p
        lp = lp + d.sum_(_normal_logpdf(self.y, theta, self.sigma), axis=-1)
        return lp

    def grad_log_density(self, x):
        return self.grad_log_density_unchecked(self._check(x))

    def grad_log_density_unchecked(self, x):
        mu = x[..., 0]
        tau_t = x[..., 1]
        theta_p = x[..., 2:]
        tau = _softplus(tau_t)
        s = expit(tau_t)
        log_tau = np.log(tau)
        theta = mu[..., None] + tau[..., None] * theta_p
        resid = (self.y - theta) / self.sigma ** 2
        g = np.empty_like(x)
        g[..., 0] = -mu / 100.0 + resid.sum(axis=-1)
        dtau = -1.0 / tau - (log_tau - 5.0) / tau + np.sum(resid * theta_p, axis=-1)
        g[..., 1] = dtau * s + (1.0 - s)
        g[..., 2:] = -theta_p + resid * tau[..., None]
        return g


class GermanCredit(Target):
    """Logistic regression with a Gamma(0.5, 0.5)-scaled coefficient vector.

    Dense parameters are ``(tau_tilde, beta)``; the sparse variant is
    ``(tau_tilde, lambda_tilde, beta)`` with elementwise local scales.
    """

    family = "german_credit"

    def __init__(self, dataset: PosteriorDataset, sparse=False):
        validate_dataset(dataset, "german_credit")
        self.x = dataset.columns["x"]
        self.y = dataset.columns["y"]
        self.sparse = sparse
        self.n_features = self.x.shape[1]
        dim = 1 + self.n_features * (2 if sparse else 1)
        if sparse:
            self.family = "sparse_german_credit"
        super().__init__(dim, name=f"{self.family}_{dim}d")

    def _split(self, x):
        k = self.n_features
        tau_t = x[..., 0]
        if self.sparse:
            return tau_t, x[..., 1:1 + k], x[..., 1 + k:]
        return tau_t, None, x[..., 1:]

    def log_density_expr(self, x):
        tau_t, lam_t, beta = self._split(x)
        tau = d.softplus(tau_t)
        lp = _gamma_logpdf(tau, 0.5, 0.5) + d.log_sigmoid(tau_t)
        coef = beta
        if self.sparse:
            lam = d.softplus(lam_t)
            lp = lp + d.sum_(_gamma_logpdf(lam, 0.5, 0.5) + d.log_sigmoid(lam_t),
                             axis=-1)
            coef = beta * lam
        lp = lp + d.sum_(_normal_logpdf(beta, 0.0, 1.0), axis=-1)
        eta = d.reshape(tau, np.shape(d.value(tau)) + (1,)) * d.matvec(self.x, coef)
        lp = lp + d.sum_(self.y * eta - d.softplus(eta), axis=-1)
        return lp

    def grad_log_density(self, x):
        return self.grad_log_density_unchecked(self._check(x))

    def grad_log_density_unchecked(self, x):
        tau_t, lam_t, beta = self._split(x)
        tau = _softplus(tau_t)
        s_tau = expit(tau_t)
        coef = beta
        if self.sparse:
            lam = _softplus(lam_t)
            coef = beta * lam
        lin = coef @ self.x.T                       # (..., N)
        eta = tau[..., None] * lin
        resid = self.y - expit(eta)                 # d loglik / d eta
        g = np.empty_like(x)
        dtau = (-0.5 / tau - 0.5) + np.sum(resid * lin, axis=-1)
        g[..., 0] = dtau * s_tau + (1.0 - s_tau)
        dcoef = tau[..., None] * (resid @ self.x)   # (..., k)
        k = self.n_features
        if self.sparse:
            s_lam = expit(lam_t)
            dlam = (-0.5 / lam - 0.5) + dcoef * beta
            g[..., 1:1 + k] = dlam * s_lam + (1.0 - s_lam)
            g[..., 1 + k:] = -beta + dcoef * lam
        else:
            g[..., 1:] = -beta + dcoef
        return g


# --------------------------------------------------------------------------

SYNTHETIC_FAMILIES = (
    "standard_gaussian", "diagonal_gaussian", "full_rank_gaussian",
    "ill_conditioned_gaussian", "funnel", "rosenbrock", "gaussian_mixture",
    "three_component_mixture", "twenty_component_mixture", "double_well",
)
POSTERIOR_FAMILIES = ("eight_schools", "german_credit", "sparse_german_credit")
FAMILIES = SYNTHETIC_FAMILIES + POSTERIOR_FAMILIES


def build_target(spec, dataset: PosteriorDataset | None = None) -> Target:
    """Construct a target from ``{"family": ..., "dim": ..., ...}``.

    Recognised keys besides ``family``: ``dim`` (default 100, 10 for the
    double well), ``seed``, ``scale`` (Rosenbrock), ``means``/``stds``/
    ``weights`` (custom mixture) and ``reference`` (path to a reference
    moment file, mainly for posteriors).
    """
    if isinstance(spec, str):
        spec = {"family": spec}
    spec = dict(spec)
    family = spec.get("family")
    if family not in FAMILIES:
        raise SpecError(f"unknown target family {family!r}")
    if family in POSTERIOR_FAMILIES:
        if dataset is None:
            raise DataError(f"{family} needs a dataset")
        if not isinstance(dataset, PosteriorDataset):
            raise DataError("dataset must be a PosteriorDataset")
    elif dataset is not None:
        raise SpecError(f"{family} is synthetic and takes no dataset")

    seed = int(spec.get("seed", 0))
    dim = int(spec.get("dim", 10 if family == "double_well" else 100))
    if family == "standard_gaussian":
        target = standard_gaussian(dim)
    elif family == "diagonal_gaussian":
        target = diagonal_gaussian(dim)
    elif family == "full_rank_gaussian":
        target = full_rank_gaussian(dim, seed)
    elif family == "ill_conditioned_gaussian":
        target = ill_conditioned_gaussian(dim, seed)
    elif family == "funnel":
        target = Funnel(dim)
    elif family == "rosenbrock":
        target = Rosenbrock(dim, float(spec.get("scale", 10.0)))
    elif family == "gaussian_mixture":
        try:
            target = GaussianMixture(spec["means"], spec["stds"], spec["weights"])
        except KeyError as exc:
            raise SpecError(f"gaussian_mixture needs {exc.args[0]!r}") from exc
    elif family == "three_component_mixture":
        target = three_component_mixture(dim)
    elif family == "twenty_component_mixture":
        target = twenty_component_mixture(dim, seed)
    elif family == "double_well":
        target = DoubleWell(dim)
    elif family == "eight_schools":
        target = EightSchools(dataset)
    elif family == "german_credit":
        target = GermanCredit(dataset)
    else:
        target = GermanCredit(dataset, sparse=True)

    if spec.get("reference"):
        target.set_reference(*load_reference_moments(spec["reference"]))
    return target


def reference_moments(target: Target):
    return target.reference_moments()
