import csv

import numpy as np
import pytest

from nfmc import flows as F, targets as T
from nfmc.errors import ContractViolation, InputError, TrainingDiverged
from nfmc.flows.base import FlowModel
from nfmc.training import (AdamState, FitBudget, adam_update, clip_gradient, fit,
                           mle_loss, mle_step, svi_loss, svi_loss_and_grad, svi_step)

from conftest import perturb

LOG_2PI = np.log(2 * np.pi)


def _affine(dim, log_scale=0.0, loc=0.0):
    return FlowModel(dim, [F.ElementwiseAffine(dim)],
                     params=[{"loc": np.full(dim, float(loc)),
                              "log_scale": np.full(dim, float(log_scale))}])


class _NanTarget:
    dim = 2

    def _logp(self, x):
        return np.full(x.shape[0], np.nan)

    def grad_log_density_unchecked(self, x):
        return np.full(x.shape, np.nan)


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(adam_update(AdamState(3), np.zeros(3), x), x)


def test_adam_first_step_closed_form():
    new = adam_update(AdamState(1), np.array([1.0]), np.array([0.0]))
    assert new[0] == pytest.approx(-0.05 / (1 + 1e-8), rel=1e-15)


def test_adam_constant_gradient_drift():
    state = AdamState(2)
    x = np.zeros(2)
    path = [x]
    for _ in range(100):
        x = adam_update(state, np.array([3.0, -0.5]), x)
        path.append(x)
    steps = np.diff(np.array(path), axis=0)
    assert np.all(steps[:, 0] < 0) and np.all(steps[:, 1] > 0)
    assert np.all(np.abs(steps) <= 0.05 + 1e-12)


def test_adam_length_mismatch():
    with pytest.raises(ContractViolation):
        adam_update(AdamState(2), np.zeros(3), np.zeros(3))


def test_adam_accumulators_match_parameter_length():
    flow = F.build_flow("realnvp", 4)
    state = AdamState(flow.n_parameters)
    assert state.m.shape == state.v.shape == (flow.n_parameters,)


def test_clip_gradient():
    g = np.array([30.0, 40.0])
    np.testing.assert_allclose(clip_gradient(g), [6.0, 8.0])
    np.testing.assert_array_equal(clip_gradient(np.array([1.0, 2.0])), [1.0, 2.0])


# -- SVI ----------------------------------------------------------------------


def test_svi_loss_zero_for_matching_flow():
    stds = np.array([1.0, 2.0, 5.0])
    target = T.GaussianTarget(stds ** 2, kind="diagonal")
    flow = _affine(3)
    flow.params[0]["log_scale"] = np.log(stds)
    adam = AdamState(flow.n_parameters, step_size=0.0)
    rng = np.random.default_rng(0)
    losses = np.array([svi_step(flow, target, adam, rng)[0] for _ in range(10_000)])
    se = losses.std(ddof=1) / np.sqrt(losses.size)
    assert abs(losses.mean()) <= 3 * se + 1e-12
    assert np.max(np.abs(losses)) < 1e-12


def test_svi_identity_flow_standard_gaussian():
    flow = F.identity_flow(4)
    z = np.random.default_rng(1).standard_normal((10_000, 4))
    assert abs(svi_loss(flow, T.standard_gaussian(4), z)) < 1e-12


@pytest.mark.parametrize("arch", ["realnvp", "planar", "iaf"])
def test_svi_gradient_matches_finite_differences(arch):
    target = T.diagonal_gaussian(3)
    flow = perturb(F.build_flow(arch, 3, seed=1), np.random.default_rng(2), 0.2)
    z = np.random.default_rng(3).standard_normal((1, 3))
    _, grad = svi_loss_and_grad(flow, target, z)
    p0 = flow.get_parameters()
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in rng.choice(p0.size, size=min(20, p0.size), replace=False):
        e = np.zeros_like(p0)
        e[i] = 1e-6
        flow.set_parameters(p0 + e, power_iterations=0)
        up = svi_loss(flow, target, z)
        flow.set_parameters(p0 - e, power_iterations=0)
        down = svi_loss(flow, target, z)
        fd = (up - down) / 2e-6
        worst = max(worst, abs(fd - grad[i]) / max(1.0, abs(fd), abs(grad[i])))
    flow.set_parameters(p0, power_iterations=0)
    assert worst < 1e-4


def test_svi_affine_flow_finds_kl_minimizer():
    target = T.GaussianTarget(np.array([4.0]), kind="diagonal")
    flow, _ = fit(_affine(1), "svi", target, FitBudget(max_steps=5000),
                  np.random.default_rng(0))
    assert abs(np.exp(flow.params[0]["log_scale"][0]) - 2.0) < 0.1


def test_svi_step_skips_nonfinite_loss():
    flow = _affine(2)
    before = flow.get_parameters()
    loss, applied = svi_step(flow, _NanTarget(), AdamState(4), np.random.default_rng(0))
    assert not applied and not np.isfinite(loss)
    np.testing.assert_array_equal(flow.get_parameters(), before)


# -- MLE ----------------------------------------------------------------------


def test_mle_identity_flow_loss():
    batch = np.random.default_rng(0).standard_normal((256, 3))
    flow = _affine(3)
    adam = AdamState(flow.n_parameters, step_size=0.0)
    loss, _ = mle_step(flow, batch, adam)
    expect = 1.5 * LOG_2PI + 0.5 * np.mean(np.sum(batch ** 2, axis=1))
    assert loss == pytest.approx(expect, rel=1e-13)


def test_mle_stationary_step_keeps_parameters():
    flow = _affine(1)
    batch = np.array([[1.0], [-1.0]])  # mean 0, second moment 1: zero gradient
    before = flow.get_parameters()
    _, applied = mle_step(flow, batch, AdamState(flow.n_parameters))
    assert applied
    np.testing.assert_array_equal(flow.get_parameters(), before)


def test_mle_affine_flow_recovers_scale():
    data = 3.0 * np.random.default_rng(1).standard_normal((4000, 1))
    # monitor the training data itself so the snapshot tracks the sample MLE
    flow, _ = fit(_affine(1), "mle", data, FitBudget(max_steps=3000),
                  np.random.default_rng(2), validation=data)
    assert abs(np.exp(flow.params[0]["log_scale"][0]) - 3.0) < 0.15


def test_mle_empty_batch():
    with pytest.raises(InputError):
        mle_step(_affine(1), np.zeros((0, 1)), AdamState(2))


# -- fit ----------------------------------------------------------------------


def test_fit_with_no_budget_returns_flow_unchanged():
    flow = perturb(F.build_flow("realnvp", 2), np.random.default_rng(0))
    before = flow.get_parameters()
    for budget in (FitBudget(max_steps=100, patience=0), FitBudget(max_steps=0),
                   FitBudget(seconds=0.0)):
        out, hist = fit(flow, "svi", T.standard_gaussian(2), budget,
                        np.random.default_rng(1))
        np.testing.assert_array_equal(out.get_parameters(), before)
        assert hist.steps == 0


def test_fit_svi_realnvp_matches_target_stds():
    target = T.GaussianTarget(np.array([1.0, 9.0]), kind="diagonal")
    flow, _ = fit(F.build_flow("realnvp", 2, seed=2), "svi", target,
                  FitBudget(max_steps=20_000), np.random.default_rng(2))
    x, _ = flow.sample(np.random.default_rng(99), 10_000)
    np.testing.assert_allclose(x.std(axis=0), [1.0, 3.0], rtol=0.1)


def test_fit_history_and_snapshot(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.standard_normal((600, 2)) * [1.0, 2.0] + [0.5, -1.0]
    val = rng.standard_normal((100, 2)) * [1.0, 2.0] + [0.5, -1.0]
    path = tmp_path / "hist.csv"
    flow, hist = fit(F.build_flow("realnvp", 2), "mle", data,
                     FitBudget(max_steps=400, eval_every=5), np.random.default_rng(4),
                     validation=val, batch_size=64, history_path=path)
    best = np.array([row[3] for row in hist.rows])
    assert np.all(np.diff(best) <= 0)
    # the returned parameters are the best snapshot, not the last iterate
    assert mle_loss(flow, val) == pytest.approx(hist.best_loss, rel=1e-12)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "wall_seconds", "loss", "best_loss", "skipped"]
    assert len(rows) == hist.steps + 1


def test_fit_is_deterministic_for_step_budgets():
    runs = []
    for _ in range(2):
        flow, _ = fit(F.build_flow("realnvp", 2, seed=5), "svi", T.diagonal_gaussian(2),
                      FitBudget(max_steps=200), np.random.default_rng(6))
        runs.append(flow.get_parameters())
    assert runs[0].tobytes() == runs[1].tobytes()


def test_fit_diverges_and_restores_snapshot():
    flow = perturb(F.build_flow("realnvp", 2), np.random.default_rng(0))
    before = flow.get_parameters()
    with pytest.raises(TrainingDiverged):
        fit(flow, "svi", _NanTarget(), FitBudget(max_steps=1000), np.random.default_rng(1))
    np.testing.assert_array_equal(flow.get_parameters(), before)


class _HalfNanTarget:
    """Standard normal, but undefined for x_0 > 1.5."""

    dim = 2

    def _logp(self, x):
        lp = -0.5 * np.sum(x ** 2, axis=-1)
        return np.where(x[:, 0] > 1.5, np.nan, lp)

    def grad_log_density_unchecked(self, x):
        return np.where(x[:, :1] > 1.5, np.nan, -x)


def test_fit_skips_are_counted_and_parameters_stay_finite():
    flow, hist = fit(F.build_flow("realnvp", 2, seed=1), "svi", _HalfNanTarget(),
                     FitBudget(max_steps=300), np.random.default_rng(2))
    assert hist.skipped > 0
    assert np.all(np.isfinite(flow.get_parameters()))
    assert hist.rows[-1][4] == hist.skipped


def test_fit_unknown_objective():
    with pytest.raises(InputError):
        fit(_affine(1), "elbo", None, FitBudget(max_steps=1), np.random.default_rng(0))
