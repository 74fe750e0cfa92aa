"""MH, HMC, NeuTra, Jump and IMH samplers over a pool of parallel chains."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diff as d
from .errors import (ContractViolation, ConvergenceError, DivergentTrajectory,
                     InputError, NumericalError, SpecError)
from .metrics import RunningMoments
from .training import FitBudget, fit
from .utils import std_normal_logpdf

KINDS = ("mh", "hmc", "imh", "jump_mh", "jump_hmc", "neutra_mh", "neutra_hmc")
FLOW_KINDS = ("imh", "jump_mh", "jump_hmc", "neutra_mh", "neutra_hmc")
TARGET_ACCEPT = {"mh": 0.234, "hmc": 0.65}
INITIAL_STEP = {"mh": 1.0, "hmc": 0.1}
MIN_INVERSE_MASS = 1e-8
MASS_DECAY = 0.999


def local_kind(kind):
    """Inner local sampler (``"mh"``/``"hmc"``) of a kind, or None for imh."""
    if kind == "imh":
        return None
    return "hmc" if kind.endswith("hmc") else "mh"


# --------------------------------------------------------------------------
# densities


class _Density:
    """Uniform ``logp`` / ``value_and_grad`` access for targets and stubs."""

    def __init__(self, source):
        self.source = source

    def logp(self, x):
        s = self.source
        if hasattr(s, "_logp"):
            return np.asarray(s._logp(x), dtype=float)
        return np.asarray(s(x)[0], dtype=float)

    def value_and_grad(self, x):
        s = self.source
        if hasattr(s, "_value_and_grad"):
            v, g = s._value_and_grad(x)
        else:
            v, g = s(x)
        return np.asarray(v, dtype=float), np.asarray(g, dtype=float)


def as_density(source):
    return source if isinstance(source, _Density) else _Density(source)


def _rowwise(fn, x, width):
    """Evaluate ``fn`` on a batch, retrying row by row if the batch fails."""
    try:
        return fn(x)
    except (ConvergenceError, NumericalError):
        pass
    outs = []
    for row in x:
        try:
            outs.append(fn(row[None, :]))
        except (ConvergenceError, NumericalError):
            bad = np.full((1, width), np.nan)
            outs.append((bad, np.full(1, np.nan)))
    return (np.concatenate([o[0] for o in outs]),
            np.concatenate([np.asarray(o[1], dtype=float).reshape(1) for o in outs]))


class NeutraDensity:
    """Flow-adjusted density on latent space.

    ``log p~(z) = log p(x) + log|det dx/dz|`` with ``x = f^{-1}(z)``, where
    ``f`` is the flow's data-to-latent map.
    """

    def __init__(self, flow, target, rng=None, probes=None):
        self.flow = flow
        self.target = as_density(target)
        self.rng = rng
        self.probes = probes
        self.dim = flow.dim

    def _ctx(self):
        return self.flow.context(rng=self.rng, probes=self.probes)

    def transform(self, z):
        x, _ = _rowwise(lambda a: self.flow.inverse_unchecked(a, self._ctx()),
                        np.atleast_2d(z), self.dim)
        return x

    def _logp(self, z):
        z = np.atleast_2d(z)
        x, ld = _rowwise(lambda a: self.flow.inverse_unchecked(a, self._ctx()),
                         z, self.dim)
        with np.errstate(all="ignore"):
            out = self.target.logp(x) + ld
        return np.where(np.isfinite(out), out, -np.inf)

    def _value_and_grad(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        tape = d.Tape()
        zv = tape.variable(z)
        try:
            with np.errstate(all="ignore"):
                x, ld = self.flow.inverse_expr(zv, self.flow.params, self._ctx())
        except (ConvergenceError, NumericalError):
            return self._rowwise_value_and_grad(z)
        xv = d.value(x)
        with np.errstate(all="ignore"):
            lp, g = self.target.value_and_grad(xv)
            value = lp + d.value(ld)
        ok = np.isfinite(value) & np.all(np.isfinite(g), axis=-1)
        g = np.where(ok[:, None], g, 0.0)
        grads = tape.backward(d.sum_(x * g) + d.sum_(ld))
        with np.errstate(all="ignore"):
            gz = tape.grad_of(grads, zv)
        value = np.where(ok, value, -np.inf)
        gz = np.where(ok[:, None], gz, np.nan)
        return value, gz

    def _rowwise_value_and_grad(self, z):
        values, grads = [], []
        for row in z:
            try:
                v, g = self._value_and_grad(row[None, :])
            except (ConvergenceError, NumericalError):
                v, g = np.full(1, -np.inf), np.full((1, self.dim), np.nan)
            values.append(v)
            grads.append(g)
        return np.concatenate(values), np.concatenate(grads)


def neutra_log_density(flow, target, z, rng=None):
    """``(value, gradient)`` of the adjusted density at latent point(s) ``z``."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    v, g = NeutraDensity(flow, target, rng)._value_and_grad(np.atleast_2d(z))
    return (float(v[0]), g[0]) if single else (v, g)


# --------------------------------------------------------------------------
# chain pool and adaptation


class ChainPool:
    """States of parallel chains, each with its own random stream."""

    def __init__(self, states, rngs, t=0):
        self.states = np.array(states, dtype=float)
        if self.states.ndim != 2:
            raise InputError("states must be a (chains, dimension) matrix")
        if len(rngs) != self.states.shape[0]:
            raise InputError("one random stream per chain required")
        self.rngs = list(rngs)
        self.t = t
        self.logp = None
        self.grad = None

    @classmethod
    def create(cls, n_chains, dim, seed):
        """Standard-normal initial states from per-chain streams of ``seed``."""
        if n_chains < 1:
            raise InputError("need at least one chain")
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        rngs = [np.random.default_rng(s) for s in ss.spawn(n_chains)]
        states = np.stack([g.standard_normal(dim) for g in rngs])
        return cls(states, rngs)

    @property
    def n_chains(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[1]

    def normal(self):
        return np.stack([g.standard_normal(self.dim) for g in self.rngs])

    def log_uniform(self):
        with np.errstate(divide="ignore"):
            return np.log(np.array([g.random() for g in self.rngs]))

    def invalidate(self):
        self.logp = None
        self.grad = None

    def ensure_logp(self, density):
        if self.logp is None:
            self.logp = density.logp(self.states)

    def ensure_grad(self, density):
        if self.grad is None or self.logp is None:
            self.logp, self.grad = density.value_and_grad(self.states)


@dataclass
class StepStats:
    accepted: np.ndarray
    accept_prob: np.ndarray
    invalid: int = 0

    @property
    def accept_fraction(self):
        return float(np.mean(self.accepted))

    @property
    def mean_accept_prob(self):
        return float(np.mean(self.accept_prob))


def metropolis_accept(log_alpha, log_w):
    """Accept iff ``log_alpha > log_w``; NaN never accepts."""
    with np.errstate(invalid="ignore"):
        return np.asarray(log_alpha) > np.asarray(log_w)


def mh_log_alpha(lp_new, lp_old):
    return lp_new - lp_old


def jump_log_alpha(lp_new, lp_old, lq_new, lq_old):
    """Independence-proposal ratio: target ratio times reverse proposal ratio."""
    return (lp_new - lp_old) + (lq_old - lq_new)


def _accept_prob(log_alpha):
    with np.errstate(invalid="ignore", over="ignore"):
        p = np.exp(np.minimum(log_alpha, 0.0))
    return np.where(np.isnan(p), 0.0, p)


def _commit(pool, accept, proposal, lp_new, grad_new=None):
    pool.states = np.where(accept[:, None], proposal, pool.states)
    pool.logp = np.where(accept, lp_new, pool.logp)
    if grad_new is not None and pool.grad is not None:
        pool.grad = np.where(accept[:, None], grad_new, pool.grad)
    elif grad_new is None:
        pool.grad = None


def mh_step(pool: ChainPool, target, inverse_mass, step_size=1.0, u=None):
    """Random-walk proposal ``x + step_size * M^{-1} u``, ``u ~ N(0, I)``."""
    density = as_density(target)
    pool.ensure_logp(density)
    if u is None:
        u = pool.normal()
    proposal = pool.states + step_size * np.asarray(inverse_mass) * u
    lp_new = density.logp(proposal)
    invalid = ~np.isfinite(lp_new)
    lp_new = np.where(invalid, -np.inf, lp_new)
    log_alpha = mh_log_alpha(lp_new, pool.logp)
    accept = metropolis_accept(log_alpha, pool.log_uniform()) & ~invalid
    _commit(pool, accept, proposal, lp_new)
    pool.t += 1
    return StepStats(accept, np.where(invalid, 0.0, _accept_prob(log_alpha)),
                     int(invalid.sum()))


def _leapfrog_batch(x, r, grad, step, steps, density, inverse_mass):
    """Vectorized leapfrog; returns end state, momentum, log p, grad, ok mask."""
    ok = np.ones(x.shape[0], dtype=bool)
    lp = None
    with np.errstate(all="ignore"):
        for _ in range(steps):
            r = r + 0.5 * step * grad
            x = x + step * inverse_mass * r
            lp, grad = density.value_and_grad(x)
            r = r + 0.5 * step * grad
        ok &= np.isfinite(lp) & np.all(np.isfinite(x), axis=-1) \
            & np.all(np.isfinite(r), axis=-1) & np.all(np.isfinite(grad), axis=-1)
    return x, r, lp, grad, ok


def leapfrog(x, r, step, steps, target, inverse_mass=1.0):
    """``steps`` rounds of half-kick, drift ``step * M^{-1} r``, half-kick."""
    if step <= 0 or steps < 1:
        raise InputError("leapfrog needs step > 0 and steps >= 1")
    density = as_density(target)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    r2 = np.atleast_2d(np.asarray(r, dtype=float))
    _, grad = density.value_and_grad(x2)
    x_end, r_end, _, _, ok = _leapfrog_batch(x2, r2, np.asarray(grad, dtype=float),
                                             step, steps, density,
                                             np.asarray(inverse_mass, dtype=float))
    if not np.all(ok):
        raise DivergentTrajectory("non-finite state along the leapfrog trajectory")
    return (x_end[0], r_end[0]) if single else (x_end, r_end)


def hmc_step(pool: ChainPool, target, inverse_mass, step_size, n_leapfrog=10, u=None):
    """One HMC transition per chain.

    Momentum is refreshed as ``r = u / sqrt(M^{-1})`` so that its covariance
    is ``M``; kinetic energy is ``0.5 r^T M^{-1} r``.
    """
    density = as_density(target)
    pool.ensure_grad(density)
    minv = np.broadcast_to(np.asarray(inverse_mass, dtype=float), (pool.dim,))
    if u is None:
        u = pool.normal()
    r0 = u / np.sqrt(minv)
    x1, r1, lp1, g1, ok = _leapfrog_batch(pool.states, r0, pool.grad, step_size,
                                          n_leapfrog, density, minv)
    with np.errstate(all="ignore"):
        k0 = 0.5 * np.sum(r0 * r0 * minv, axis=-1)
        k1 = 0.5 * np.sum(r1 * r1 * minv, axis=-1)
        log_alpha = lp1 - pool.logp - (k1 - k0)
    log_alpha = np.where(ok, log_alpha, -np.inf)
    accept = metropolis_accept(log_alpha, pool.log_uniform()) & ok
    lp1 = np.where(ok, lp1, -np.inf)
    _commit(pool, accept, np.where(ok[:, None], x1, pool.states), lp1,
            np.where(ok[:, None], g1, pool.grad))
    pool.t += 1
    return StepStats(accept, np.where(ok, _accept_prob(log_alpha), 0.0),
                     int((~ok).sum()))


@dataclass
class DualAveragingState:
    """Nesterov dual averaging of the log step size."""

    target: float
    initial_step: float = 1.0
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    t: int = 0
    h_bar: float = 0.0
    log_step: float = None
    log_step_bar: float = 0.0
    mu: float = None

    def __post_init__(self):
        if self.initial_step <= 0:
            raise InputError("initial step size must be positive")
        if self.mu is None:
            self.mu = math.log(10.0 * self.initial_step)
        if self.log_step is None:
            self.log_step = math.log(self.initial_step)

    @property
    def step_size(self):
        return math.exp(self.log_step)

    @property
    def final_step_size(self):
        return math.exp(self.log_step_bar) if self.t > 0 else self.step_size


def dual_averaging_update(state: DualAveragingState, observed_acceptance):
    a = float(min(max(observed_acceptance, 0.0), 1.0))
    state.t += 1
    w = 1.0 / (state.t + state.t0)
    state.h_bar = (1.0 - w) * state.h_bar + w * (state.target - a)
    state.log_step = state.mu - math.sqrt(state.t) / state.gamma * state.h_bar
    eta = state.t ** (-state.kappa)
    state.log_step_bar = eta * state.log_step + (1.0 - eta) * state.log_step_bar
    return state


def adapt_inverse_mass(current, states, t):
    """``M^{-1} + sqrt(cross-chain variance) * 0.999^t``, clamped at 1e-8."""
    states = np.asarray(states, dtype=float)
    current = np.asarray(current, dtype=float)
    if states.shape[0] < 2:
        return current.copy()
    spread = np.sqrt(np.var(states, axis=0, ddof=1))
    return np.maximum(current + spread * MASS_DECAY ** t, MIN_INVERSE_MASS)


# --------------------------------------------------------------------------
# jumps


def jump_step(flow, target, pool: ChainPool, rng=None, probes=None):
    """Independent flow proposal for every chain with the Metropolis-Hastings
    correction ``log p(x') - log p(x) + log q(x) - log q(x')``.

    ``rng`` drives estimator probes of stochastic log-det layers; proposal
    noise comes from the per-chain streams.
    """
    density = as_density(target)
    pool.ensure_logp(density)
    ctx = flow.context(rng=rng, probes=probes)
    z = pool.normal()
    x_new, ld_inv = _rowwise(lambda a: flow.inverse_unchecked(a, ctx), z, pool.dim)
    lq_new = std_normal_logpdf(z) - ld_inv
    ctx = flow.context(rng=rng, probes=probes)
    z_old, ld_old = _rowwise(lambda a: flow.forward_unchecked(a, ctx),
                             pool.states, pool.dim)
    with np.errstate(all="ignore"):
        lq_old = std_normal_logpdf(z_old) + ld_old
        ok = np.all(np.isfinite(x_new), axis=-1) & np.isfinite(lq_new) \
            & np.isfinite(lq_old)
        lp_new = np.where(ok, density.logp(np.where(ok[:, None], x_new, 0.0)), -np.inf)
        ok &= np.isfinite(lp_new)
        log_alpha = jump_log_alpha(lp_new, pool.logp, lq_new, lq_old)
    log_alpha = np.where(ok, log_alpha, -np.inf)
    accept = metropolis_accept(log_alpha, pool.log_uniform()) & ok
    _commit(pool, accept, np.where(ok[:, None], x_new, pool.states),
            np.where(ok, lp_new, -np.inf))
    pool.t += 1
    return StepStats(accept, np.where(ok, _accept_prob(log_alpha), 0.0),
                     int((~ok).sum()))


# --------------------------------------------------------------------------
# schedules


@dataclass
class SamplerConfig:
    kind: str = "mh"
    n_chains: int = 100
    leapfrog_steps: int = 10
    jump_interval: int = 25
    initial_step_size: float | None = None
    target_accept: float | None = None
    svi_fraction: float | None = None
    refit_fraction: float = 0.2
    probes: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown sampler kind {self.kind!r}")
        if self.kind == "imh":
            if self.jump_interval not in (1, 25):
                raise SpecError("imh uses a jump every step (jump_interval = 1)")
            self.jump_interval = 1
        if self.jump_interval < 1:
            raise SpecError("jump_interval must be >= 1")
        if self.kind.startswith("jump") and self.jump_interval == 1:
            raise SpecError("jump_interval = 1 is the imh kind")
        if self.n_chains < 1 or self.leapfrog_steps < 1:
            raise SpecError("n_chains and leapfrog_steps must be >= 1")
        if self.svi_fraction is None:
            self.svi_fraction = {"imh": 1.0, "neutra_mh": 0.5, "neutra_hmc": 0.5}.get(
                self.kind, 0.4)
        if not self.kind.startswith("jump"):
            self.refit_fraction = 0.0
        if not (0 <= self.svi_fraction <= 1 and 0 <= self.refit_fraction <= 1
                and self.svi_fraction + self.refit_fraction <= 1):
            raise SpecError("warm-up fractions must lie in [0, 1] and sum to <= 1")

    @property
    def needs_flow(self):
        return self.kind in FLOW_KINDS


@dataclass
class Budget:
    """Per-phase limits; each phase ends at whichever limit comes first.

    Step limits make a run reproducible bit for bit; second limits are
    checked against the wall clock every step.
    """

    warmup_seconds: float | None = None
    sampling_seconds: float | None = None
    warmup_steps: int | None = None
    sampling_steps: int | None = None
    fit_steps: int | None = None
    refit_steps: int | None = None

    def __post_init__(self):
        if self.warmup_seconds is None and self.warmup_steps is None:
            raise SpecError("warm-up needs a seconds or steps limit")
        if self.sampling_seconds is None and self.sampling_steps is None:
            raise SpecError("sampling needs a seconds or steps limit")
        for name in ("warmup_seconds", "sampling_seconds", "warmup_steps",
                     "sampling_steps", "fit_steps", "refit_steps"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise SpecError(f"{name} must be >= 0")


@dataclass
class RunResult:
    second_moment: list
    first_moment: list
    n_steps: int
    accept_rate_local: float | None
    accept_rate_jump: float | None
    warmup_seconds: float
    sampling_seconds: float
    divergences: int
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())


class _Phase:
    def __init__(self, seconds, steps, clock):
        self.seconds = seconds
        self.steps = steps
        self.clock = clock
        self.start = clock()
        self.count = 0

    def elapsed(self):
        return self.clock() - self.start

    def remaining_seconds(self):
        return None if self.seconds is None else max(self.seconds - self.elapsed(), 0.0)

    def running(self):
        if self.steps is not None and self.count >= self.steps:
            return False
        if self.seconds is not None and self.elapsed() >= self.seconds:
            return False
        return True


class _Tally:
    def __init__(self):
        self.accepted = 0
        self.proposed = 0

    def add(self, stats):
        self.accepted += int(np.sum(stats.accepted))
        self.proposed += len(stats.accepted)

    @property
    def rate(self):
        return self.accepted / self.proposed if self.proposed else None


def _rng_streams(seed):
    """Chain, fit, flow-estimator and spare streams from one root seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    chains, fit_ss, flow_ss, spare = ss.spawn(4)
    return chains, np.random.default_rng(fit_ss), np.random.default_rng(flow_ss), spare


def run_sampler(config: SamplerConfig, target, flow=None, seed=0,
                budget: Budget = None, clock=time.perf_counter, fit_flow=True,
                history_path=None):
    """Warm up and sample; returns a :class:`RunResult`.

    ``fit_flow=False`` skips flow training and uses ``flow`` as given.
    """
    if budget is None:
        raise InputError("a budget is required")
    if config.needs_flow and flow is None:
        raise SpecError(f"sampler kind {config.kind} needs a flow")
    if not config.needs_flow and flow is not None:
        raise SpecError(f"sampler kind {config.kind} takes no flow")
    if flow is not None and flow.dim != target.dim:
        raise ContractViolation("flow and target dimensions differ")
    chain_ss, fit_rng, flow_rng, _ = _rng_streams(seed)
    kind = config.kind
    local = local_kind(kind)
    probes = config.probes
    diag = {"nonfinite_rejections": 0, "warmup_truncated": False}

    warm = _Phase(budget.warmup_seconds, None, clock)

    def fit_phase(objective, source, fraction, max_steps, key):
        seconds = None
        if budget.warmup_seconds is not None:
            seconds = max(fraction * budget.warmup_seconds - warm.elapsed(), 0.0)
        flow.unfreeze()
        _, hist = fit(flow, objective, source,
                      FitBudget(seconds=seconds, max_steps=max_steps), fit_rng,
                      history_path=history_path if objective == "svi" else None)
        flow.freeze()
        diag[key] = {"steps": hist.steps, "best_loss": _finite_or_none(hist.best_loss),
                     "skipped": hist.skipped}

    if flow is not None and fit_flow:
        fit_phase("svi", target, config.svi_fraction, budget.fit_steps, "svi")
    if flow is not None:
        flow.freeze()

    if kind.startswith("neutra"):
        density = as_density(NeutraDensity(flow, target, flow_rng, probes))
        moments = RunningMoments(target.dim, transform=density.source.transform)
    else:
        density = as_density(target)
        moments = RunningMoments(target.dim)
    pool = ChainPool.create(config.n_chains, target.dim, chain_ss)

    minv = np.ones(target.dim)
    da = None
    if local is not None:
        da = DualAveragingState(
            target=config.target_accept or TARGET_ACCEPT[local],
            initial_step=config.initial_step_size or INITIAL_STEP[local])
    divergences = 0

    def local_step(step_size):
        nonlocal divergences
        if local == "mh":
            stats = mh_step(pool, density, minv, step_size)
        else:
            stats = hmc_step(pool, density, minv, step_size, config.leapfrog_steps)
            divergences += stats.invalid
        diag["nonfinite_rejections"] += stats.invalid if local == "mh" else 0
        return stats

    # inner warm-up: adapt step size and mass while moving
    refit = kind.startswith("jump") and fit_flow
    warm_end = 1.0 - config.refit_fraction if refit else 1.0
    buffer = [] if refit else None
    t = 0
    if local is not None:
        while True:
            if budget.warmup_steps is not None and t >= budget.warmup_steps:
                break
            if budget.warmup_seconds is not None and \
                    warm.elapsed() >= warm_end * budget.warmup_seconds:
                break
            stats = local_step(da.step_size)
            dual_averaging_update(da, stats.mean_accept_prob)
            minv = adapt_inverse_mass(minv, pool.states, t)
            if buffer is not None and t % 5 == 0:
                buffer.append(pool.states.copy())
                if len(buffer) > 200:
                    buffer.pop(0)
            t += 1
        step_size = da.final_step_size
    else:
        step_size = None
    diag["warmup_steps"] = t
    diag["step_size"] = step_size
    if refit and buffer:
        samples = np.concatenate(buffer)
        samples = samples[np.all(np.isfinite(samples), axis=1)]
        fit_phase("mle", samples, 1.0, budget.refit_steps, "mle")
    warmup_seconds = warm.elapsed()
    if budget.warmup_seconds is not None and warmup_seconds > budget.warmup_seconds * 1.05:
        diag["warmup_truncated"] = True

    # sampling
    samp = _Phase(budget.sampling_seconds, budget.sampling_steps, clock)
    local_tally, jump_tally = _Tally(), _Tally()
    k = config.jump_interval if kind in ("imh", "jump_mh", "jump_hmc") else None
    while samp.running():
        samp.count += 1
        if k is not None and samp.count % k == 0:
            stats = jump_step(flow, density, pool, flow_rng, probes)
            diag["nonfinite_rejections"] += stats.invalid
            jump_tally.add(stats)
        else:
            local_tally.add(local_step(step_size))
        moments.update(pool.states)
    sampling_seconds = samp.elapsed()
    diag["dropped_points"] = moments.dropped
    diag["inverse_mass"] = [float(v) for v in minv]
    return RunResult(
        second_moment=[float(v) for v in moments.second_moment],
        first_moment=[float(v) for v in moments.first_moment],
        n_steps=samp.count,
        accept_rate_local=local_tally.rate,
        accept_rate_jump=jump_tally.rate,
        warmup_seconds=warmup_seconds,
        sampling_seconds=sampling_seconds,
        divergences=divergences,
        diagnostics=diag,
    )


def _finite_or_none(v):
    return float(v) if np.isfinite(v) else None
