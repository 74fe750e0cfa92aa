"""Flow fitting: reverse-KL SVI against a target and maximum likelihood."""

from __future__ import annotations

import copy
import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diff as d
from .errors import ContractViolation, InputError, TrainingDiverged
from .utils import std_normal_logpdf

MAX_CONSECUTIVE_SKIPS = 100
CLIP_NORM = 10.0


@dataclass
class AdamState:
    size: int
    step_size: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_update(state: AdamState, gradient, parameters):
    """One bias-corrected Adam step; returns the new parameter vector."""
    g = np.asarray(gradient, dtype=float)
    x = np.asarray(parameters, dtype=float)
    if g.shape != (state.size,) or x.shape != (state.size,):
        raise ContractViolation("gradient/parameter length differs from the "
                                "optimizer state")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return x - state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradient(g, max_norm=CLIP_NORM):
    norm = float(np.linalg.norm(g))
    if norm > max_norm:
        return g * (max_norm / norm)
    return g


# --------------------------------------------------------------------------
# losses


def svi_loss_and_grad(flow, target, z, rng=None):
    """Reverse-KL estimate ``mean(log q(x) - log p(x))`` with ``x = f^{-1}(z)``.

    The target enters the tape through ``sum(x * grad log p(x))`` with the
    gradient held constant, which has the right parameter derivative
    without differentiating the target on the tape.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = z.shape[0]
    tape = d.Tape()
    params, leaves = flow.traced_parameters(tape)
    ctx = flow.context(rng=rng, probes=1)
    x, ld = flow.inverse_expr(z, params, ctx)
    xv = d.value(x)
    with np.errstate(all="ignore"):
        lp = target._logp(xv)
        glp = target.grad_log_density_unchecked(xv)
    logq = std_normal_logpdf(z) - d.value(ld)
    loss = float(np.mean(logq - lp))
    if not (np.isfinite(loss) and np.all(np.isfinite(glp))):
        return loss, None
    obj = -d.sum_(ld) / n - d.sum_(x * glp) / n
    if not isinstance(ctx.penalty, float):
        obj = obj + ctx.penalty
    grads = tape.backward(obj)
    return loss, flow.flatten_grads(tape, grads, leaves)


def svi_loss(flow, target, z, rng=None):
    """Numeric reverse-KL estimate (no gradient)."""
    x, ld = flow.inverse(z, ctx=flow.context(rng=rng, probes=1))
    with np.errstate(all="ignore"):
        lp = target._logp(x)
    return float(np.mean(std_normal_logpdf(z) - ld - lp))


def mle_loss_and_grad(flow, batch, rng=None):
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    n = batch.shape[0]
    tape = d.Tape()
    params, leaves = flow.traced_parameters(tape)
    ctx = flow.context(rng=rng, probes=1)
    z, ld = flow.forward_expr(batch, params, ctx)
    nll = -(d.sum_(std_normal_logpdf(z)) + d.sum_(ld)) / n
    loss = float(d.value(nll))
    if not np.isfinite(loss):
        return loss, None
    obj = nll if isinstance(ctx.penalty, float) else nll + ctx.penalty
    grads = tape.backward(obj)
    return loss, flow.flatten_grads(tape, grads, leaves)


def mle_loss(flow, batch, rng=None):
    lq = flow.log_prob(batch, ctx=flow.context(rng=rng, probes=1))
    return float(-np.mean(lq))


def _apply(flow, adam, grad, power_iterations=5):
    if grad is None or not np.all(np.isfinite(grad)):
        return False
    new = adam_update(adam, clip_gradient(grad), flow.get_parameters())
    if not np.all(np.isfinite(new)):
        return False
    flow.set_parameters(new, power_iterations=power_iterations)
    return True


def svi_step(flow, target, adam, rng, batch_size=1):
    """One single-sample SVI update.  Returns ``(loss, applied)``."""
    z = rng.standard_normal((batch_size, flow.dim))
    loss, grad = svi_loss_and_grad(flow, target, z, rng)
    if not np.isfinite(loss):
        return loss, False
    return loss, _apply(flow, adam, grad)


def mle_step(flow, batch, adam, rng=None):
    """One maximum-likelihood update on ``batch``.  Returns ``(loss, applied)``."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[0] == 0:
        raise InputError("empty batch")
    loss, grad = mle_loss_and_grad(flow, batch, rng)
    if not np.isfinite(loss):
        return loss, False
    return loss, _apply(flow, adam, grad)


# --------------------------------------------------------------------------
# fitting loop


@dataclass
class FitBudget:
    """Stop after ``seconds`` of wall clock, ``max_steps`` steps, or
    ``patience`` steps without improvement of the monitored loss."""

    seconds: float | None = None
    max_steps: int | None = None
    patience: int = 5000
    eval_every: int = 10

    def exhausted(self, step, elapsed):
        if self.max_steps is not None and step >= self.max_steps:
            return True
        if self.seconds is not None and elapsed >= self.seconds:
            return True
        return False


@dataclass
class FitHistory:
    rows: list = field(default_factory=list)
    best_loss: float = math.inf
    best_step: int = -1
    skipped: int = 0
    steps: int = 0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "wall_seconds", "loss", "best_loss", "skipped"])
            w.writerows(self.rows)


def fit(flow, objective, source, budget: FitBudget, rng, validation=None,
        batch_size=1024, history_path=None, clock=time.perf_counter):
    """Train ``flow`` in place and restore its best snapshot.

    ``objective`` is ``"svi"`` (``source`` a target) or ``"mle"`` (``source``
    an array of samples).  The monitored loss is a fixed-sample validation
    loss: 1024 fixed base draws for SVI, a held-out split (10% of the data
    unless ``validation`` is given) for MLE.
    """
    if objective not in ("svi", "mle"):
        raise InputError(f"unknown objective {objective!r}")
    history = FitHistory()
    adam = AdamState(flow.n_parameters)
    start = clock()
    if objective == "mle":
        data = np.atleast_2d(np.asarray(source, dtype=float))
        if data.shape[0] == 0:
            raise InputError("no training samples")
        if validation is None and data.shape[0] >= 20:
            order = rng.permutation(data.shape[0])
            n_val = max(1, data.shape[0] // 10)
            validation = data[order[:n_val]]
            data = data[order[n_val:]]
        if validation is None:
            validation = data
        validation = validation[:4096]
        eval_seed = int(rng.integers(2 ** 63))
        monitor = lambda: mle_loss(flow, validation, np.random.default_rng(eval_seed))
    else:
        z_val = rng.standard_normal((1024, flow.dim))
        eval_seed = int(rng.integers(2 ** 63))
        monitor = lambda: svi_loss(flow, source, z_val, np.random.default_rng(eval_seed))

    def snapshot():
        return flow.get_parameters(), copy.deepcopy(flow.buffers())

    best = snapshot()
    if flow.n_parameters == 0 or budget.patience <= 0 or budget.exhausted(0, 0.0):
        return flow, history
    with np.errstate(all="ignore"):
        history.best_loss = monitor()
    if not np.isfinite(history.best_loss):
        history.best_loss = math.inf
    history.best_step = 0
    consecutive = 0
    step = 0
    while True:
        elapsed = clock() - start
        if budget.exhausted(step, elapsed) or step - history.best_step >= budget.patience:
            break
        with np.errstate(all="ignore"):
            if objective == "svi":
                loss, applied = svi_step(flow, source, adam, rng)
            else:
                n = data.shape[0]
                idx = rng.choice(n, size=min(batch_size, n), replace=False) \
                    if n > batch_size else np.arange(n)
                loss, applied = mle_step(flow, data[idx], adam, rng)
        step += 1
        if applied:
            consecutive = 0
        else:
            consecutive += 1
            history.skipped += 1
            if consecutive > MAX_CONSECUTIVE_SKIPS:
                flow.set_parameters(best[0], power_iterations=0)
                flow.set_buffers(best[1])
                raise TrainingDiverged(f"{consecutive} consecutive skipped steps "
                                       f"at step {step}")
        if step % budget.eval_every == 0:
            with np.errstate(all="ignore"):
                val = monitor()
            if np.isfinite(val) and val < history.best_loss:
                history.best_loss = val
                history.best_step = step
                best = snapshot()
        history.rows.append((step, round(clock() - start, 6), loss,
                             history.best_loss, history.skipped))
    history.steps = step
    flow.set_parameters(best[0], power_iterations=0)
    flow.set_buffers(best[1])
    if history_path is not None:
        history.write_csv(history_path)
    return flow, history
