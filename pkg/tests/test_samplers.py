import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nfmc import flows as F, targets as T
from nfmc.errors import DivergentTrajectory, InputError, SpecError
from nfmc.flows.base import FlowModel
from nfmc.samplers import (Budget, ChainPool, DualAveragingState, RunResult,
                           SamplerConfig, adapt_inverse_mass, dual_averaging_update,
                           hmc_step, jump_log_alpha, jump_step, leapfrog,
                           metropolis_accept, mh_log_alpha, mh_step,
                           neutra_log_density, run_sampler)

from conftest import fd_jacobian

LOG_2PI = np.log(2 * np.pi)


def _affine_flow(dim, log_scale, loc=0.0):
    flow = FlowModel(dim, [F.ElementwiseAffine(dim)],
                     params=[{"loc": np.full(dim, float(loc)),
                              "log_scale": np.full(dim, float(log_scale))}])
    return flow.freeze()


def _flat(x):
    x = np.atleast_2d(x)
    return np.zeros(x.shape[0]), np.zeros(x.shape)


# -- MH -------------------------------------------------------------------------


def test_mh_null_move_is_accepted():
    pool = ChainPool.create(20, 3, seed=0)
    before = pool.states.copy()
    stats = mh_step(pool, T.standard_gaussian(3), np.ones(3), u=np.zeros((20, 3)))
    assert np.all(stats.accepted)
    np.testing.assert_array_equal(pool.states, before)


def test_mh_never_enters_impossible_region():
    def half_line(x):
        x = np.atleast_2d(x)
        return np.where(x[:, 0] < 0, -0.5 * x[:, 0] ** 2, -np.inf), np.zeros(x.shape)

    pool = ChainPool(np.full((10, 1), -0.1), [np.random.default_rng(i) for i in range(10)])
    stats = mh_step(pool, half_line, np.ones(1), u=np.full((10, 1), 5.0))
    assert not np.any(stats.accepted)
    np.testing.assert_array_equal(pool.states, -0.1)
    np.testing.assert_array_equal(stats.accept_prob, 0.0)


def test_mh_standard_gaussian_second_moment():
    target = T.standard_gaussian(1)
    pool = ChainPool.create(100, 1, seed=1)
    total, n = 0.0, 0
    for t in range(10_000):
        mh_step(pool, target, np.ones(1), step_size=2.4)
        if t >= 500:
            total += np.sum(pool.states ** 2)
            n += pool.n_chains
    assert abs(total / n - 1.0) < 0.05


def test_metropolis_rule():
    assert metropolis_accept(0.0, -1e-12)
    assert not metropolis_accept(-1.0, -0.5)
    assert not metropolis_accept(np.nan, -10.0)
    assert mh_log_alpha(-1.0, -3.0) == 2.0
    assert jump_log_alpha(-1.0, -3.0, -2.0, -0.5) == pytest.approx(2.0 + 1.5)


# -- leapfrog / HMC ------------------------------------------------------------


def test_leapfrog_free_particle():
    x, r = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    minv = np.array([2.0, 0.5])
    xe, re = leapfrog(x, r, 0.1, 7, _flat, minv)
    np.testing.assert_allclose(xe, x + 7 * 0.1 * minv * r, rtol=1e-14)
    np.testing.assert_array_equal(re, r)


def test_leapfrog_one_step_by_hand():
    xe, re = leapfrog(np.array([1.0]), np.array([0.0]), 0.1, 1, T.standard_gaussian(1))
    assert xe[0] == pytest.approx(0.995, abs=1e-15)
    assert re[0] == pytest.approx(-0.05 - 0.05 * 0.995, abs=1e-15)


@pytest.mark.parametrize("target", [T.standard_gaussian(3), T.Funnel(3),
                                    T.DoubleWell(2)], ids=["gauss", "funnel", "well"])
def test_leapfrog_reversible_and_volume_preserving(target):
    rng = np.random.default_rng(0)
    dim = target.dim
    x, r = 0.5 * rng.standard_normal(dim), rng.standard_normal(dim)
    minv = np.linspace(0.5, 1.5, dim)
    xe, re = leapfrog(x, r, 0.05, 10, target, minv)
    xb, rb = leapfrog(xe, -re, 0.05, 10, target, minv)
    assert np.max(np.abs(xb - x)) < 1e-10
    assert np.max(np.abs(rb + r)) < 1e-10

    def flow_map(v):
        a, b = leapfrog(v[:dim], v[dim:], 0.05, 10, target, minv)
        return np.concatenate([a, b])

    jac = fd_jacobian(flow_map, np.concatenate([x, r]), h=1e-6)
    assert abs(abs(np.linalg.det(jac)) - 1.0) < 1e-6


def test_leapfrog_errors():
    with pytest.raises(InputError):
        leapfrog(np.zeros(1), np.zeros(1), 0.0, 1, T.standard_gaussian(1))
    with pytest.raises(InputError):
        leapfrog(np.zeros(1), np.zeros(1), 0.1, 0, T.standard_gaussian(1))
    with pytest.raises(DivergentTrajectory):
        leapfrog(np.array([3.0, 3.0]), np.zeros(2), 5.0, 20, T.DoubleWell(2))


def test_hmc_small_step_accepts_almost_always():
    pool = ChainPool.create(100, 5, seed=2)
    target = T.standard_gaussian(5)
    probs = [hmc_step(pool, target, np.ones(5), 1e-3).mean_accept_prob for _ in range(20)]
    assert np.mean(probs) > 0.99


def test_hmc_large_energy_error_is_rejected():
    pool = ChainPool.create(50, 2, seed=3)
    before = pool.states.copy()
    stats = hmc_step(pool, T.standard_gaussian(2), np.ones(2), 40.0, n_leapfrog=1)
    rejected = ~stats.accepted
    assert rejected.sum() > 40
    np.testing.assert_array_equal(pool.states[rejected], before[rejected])


def test_hmc_divergence_is_rejected_and_counted():
    pool = ChainPool(np.full((4, 2), 3.0), [np.random.default_rng(i) for i in range(4)])
    stats = hmc_step(pool, T.DoubleWell(2), np.ones(2), 5.0, n_leapfrog=20)
    assert stats.invalid == 4 and not np.any(stats.accepted)
    np.testing.assert_array_equal(pool.states, 3.0)


def test_hmc_ten_dimensional_gaussian_moments():
    cfg = SamplerConfig("hmc", n_chains=50)
    res = run_sampler(cfg, T.standard_gaussian(10), seed=4,
                      budget=Budget(warmup_steps=300, sampling_steps=1000))
    assert np.max(np.abs(np.array(res.second_moment) - 1.0)) < 0.05


# -- adaptation ---------------------------------------------------------------


def test_dual_averaging_fixed_point():
    state = DualAveragingState(target=0.65, initial_step=0.1)
    logs = []
    for _ in range(50):
        dual_averaging_update(state, 0.65)
        logs.append(state.log_step)
    np.testing.assert_array_equal(np.diff(logs), 0.0)
    assert state.step_size > 0


@pytest.mark.parametrize("observed,sign", [(0.0, -1), (1.0, 1)])
def test_dual_averaging_monotone(observed, sign):
    state = DualAveragingState(target=0.65, initial_step=0.1)
    sizes = []
    for _ in range(100):
        dual_averaging_update(state, observed)
        sizes.append(state.step_size)
    assert np.all(sign * np.diff(sizes) > 0)
    assert min(sizes) > 0 and state.final_step_size > 0


def test_dual_averaging_converges_to_target_rate():
    # acceptance model a(h) = exp(-h): the target rate 0.65 is reached at h = -log 0.65
    state = DualAveragingState(target=0.65, initial_step=1.0)
    for _ in range(3000):
        dual_averaging_update(state, np.exp(-state.step_size))
    assert state.final_step_size == pytest.approx(-np.log(0.65), rel=0.05)


def test_inverse_mass_examples():
    cur = np.array([1.0, 2.0])
    np.testing.assert_array_equal(adapt_inverse_mass(cur, np.ones((5, 2)), 0), cur)
    s = np.sqrt(2.0)
    states = np.array([[s, -s], [-s, s]])  # cross-chain variance 4 (ddof 1)
    np.testing.assert_allclose(adapt_inverse_mass(cur, states, 0), cur + 2.0)
    t = int(np.ceil(np.log(1e-6 / 2.0) / np.log(0.999))) + 1
    assert np.max(np.abs(adapt_inverse_mass(cur, states, t) - cur)) < 1e-6
    np.testing.assert_array_equal(adapt_inverse_mass(cur, states[:1], 0), cur)
    assert np.all(adapt_inverse_mass(np.zeros(2), np.zeros((3, 2)), 0) >= 1e-8)


# -- NeuTra density -------------------------------------------------------------


def test_neutra_identity_flow_equals_target():
    target = T.full_rank_gaussian(4, seed=1)
    z = np.random.default_rng(0).standard_normal((100, 4))
    v, g = neutra_log_density(F.identity_flow(4), target, z)
    np.testing.assert_array_equal(v, target.log_density(z))
    np.testing.assert_allclose(g, target.grad_log_density(z), rtol=1e-14, atol=1e-14)


def test_neutra_scaled_flow_by_substitution():
    flow = _affine_flow(1, np.log(2.0))  # latent-to-data map x = 2 z
    target = T.standard_gaussian(1)
    z = np.linspace(-3, 3, 13)[:, None]
    v, g = neutra_log_density(flow, target, z)
    expect = -0.5 * (2 * z[:, 0]) ** 2 - 0.5 * LOG_2PI + np.log(2.0)
    np.testing.assert_allclose(v, expect, rtol=1e-14)
    np.testing.assert_allclose(g[:, 0], -4.0 * z[:, 0], rtol=1e-14)


# -- jumps --------------------------------------------------------------------


def test_jump_perfect_proposal_always_accepts():
    pool = ChainPool.create(100, 3, seed=5)
    flow = F.identity_flow(3).freeze()
    for _ in range(10):
        stats = jump_step(flow, T.standard_gaussian(3), pool)
        assert np.all(stats.accepted)


def test_jump_narrow_proposal_is_sometimes_rejected():
    pool = ChainPool.create(100, 1, seed=6)
    flow = _affine_flow(1, np.log(0.1))
    rates = [jump_step(flow, T.standard_gaussian(1), pool).accept_fraction
             for _ in range(100)]
    assert np.mean(rates) < 0.99


def test_jump_balances_symmetric_modes():
    target = T.GaussianMixture([[-5.0], [5.0]], [1.0, 1.0], [0.5, 0.5])
    flow = _affine_flow(1, np.log(8.0))
    pool = ChainPool.create(100, 1, seed=7)
    right = []
    for t in range(2000):
        jump_step(flow, target, pool)
        if t >= 100:
            right.append(np.mean(pool.states[:, 0] > 0))
    assert abs(np.mean(right) - 0.5) < 0.05


def test_jump_rejects_unsupported_current_state():
    flow = _affine_flow(2, -720.0)  # forward overflows: log q(x) is not finite
    pool = ChainPool.create(8, 2, seed=8)
    before = pool.states.copy()
    stats = jump_step(flow, T.standard_gaussian(2), pool)
    assert stats.invalid == 8 and not np.any(stats.accepted)
    np.testing.assert_array_equal(pool.states, before)


# -- discrete detailed balance -----------------------------------------------------


PI = np.array([0.2, 0.3, 0.5])
Q = np.array([0.5, 0.3, 0.2])


def _simulate(kind, n_chains=2000, n_steps=500, seed=0):
    rng = np.random.default_rng(seed)
    state = rng.choice(3, size=n_chains, p=PI)
    counts = np.zeros((3, 3))
    for _ in range(n_steps):
        if kind == "mh":
            prop = (state + rng.integers(1, 3, size=n_chains)) % 3
            log_alpha = mh_log_alpha(np.log(PI[prop]), np.log(PI[state]))
        else:
            prop = rng.choice(3, size=n_chains, p=Q)
            log_alpha = jump_log_alpha(np.log(PI[prop]), np.log(PI[state]),
                                       np.log(Q[prop]), np.log(Q[state]))
        accept = metropolis_accept(log_alpha, np.log(rng.random(n_chains)))
        new = np.where(accept, prop, state)
        np.add.at(counts, (state, new), 1)
        state = new
    return counts


@pytest.mark.parametrize("kind", ["mh", "jump"])
def test_detailed_balance_on_three_states(kind):
    counts = _simulate(kind)
    n = counts.sum()
    assert n == 1_000_000
    flux = counts / n
    for i in range(3):
        for j in range(i + 1, 3):
            se = np.sqrt((flux[i, j] + flux[j, i]) / n)
            assert abs(flux[i, j] - flux[j, i]) < 3 * se
    # visit frequencies follow the target
    np.testing.assert_allclose(flux.sum(axis=1), PI, atol=3 * np.sqrt(0.25 / n) * 10)


# -- pool invariants ------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["mh", "hmc", "jump"]), st.integers(0, 10_000),
       st.floats(0.01, 20.0))
def test_rejected_chains_are_untouched(kind, seed, step):
    target = T.Rosenbrock(2)
    pool = ChainPool.create(30, 2, seed=seed)
    before = pool.states.copy()
    if kind == "mh":
        stats = mh_step(pool, target, np.ones(2), step)
    elif kind == "hmc":
        stats = hmc_step(pool, target, np.ones(2), step / 20, n_leapfrog=3)
    else:
        stats = jump_step(_affine_flow(2, np.log(step)), target, pool)
    assert 0.0 <= stats.accept_fraction <= 1.0
    assert np.all((stats.accept_prob >= 0) & (stats.accept_prob <= 1))
    rejected = ~stats.accepted
    assert pool.states[rejected].tobytes() == before[rejected].tobytes()


def test_chains_do_not_read_each_other():
    target = T.Funnel(3)
    big = ChainPool.create(6, 3, seed=9)
    small = ChainPool(big.states[:3].copy(),
                      [np.random.default_rng(s) for s in np.random.SeedSequence(9).spawn(6)[:3]])
    # rebuild big from fresh streams so both pools start identically
    big = ChainPool.create(6, 3, seed=9)
    small.rngs[:] = [np.random.default_rng(s) for s in np.random.SeedSequence(9).spawn(6)[:3]]
    for g in small.rngs:
        g.standard_normal(3)  # initial draw consumed by create
    for _ in range(50):
        mh_step(big, target, np.ones(3), 0.5)
        mh_step(small, target, np.ones(3), 0.5)
    assert big.states[:3].tobytes() == small.states.tobytes()


# -- configuration and run_sampler ---------------------------------------------


def test_sampler_config_rules():
    assert SamplerConfig("imh").jump_interval == 1
    with pytest.raises(SpecError):
        SamplerConfig("imh", jump_interval=5)
    with pytest.raises(SpecError):
        SamplerConfig("jump_mh", jump_interval=1)
    with pytest.raises(SpecError):
        SamplerConfig("nuts")
    with pytest.raises(SpecError):
        SamplerConfig("mh", jump_interval=0)
    with pytest.raises(SpecError):
        Budget(warmup_steps=10)
    with pytest.raises(SpecError):
        run_sampler(SamplerConfig("mh"), T.standard_gaussian(2), flow=F.identity_flow(2),
                    budget=Budget(warmup_steps=1, sampling_steps=1))
    with pytest.raises(SpecError):
        run_sampler(SamplerConfig("jump_mh"), T.standard_gaussian(2),
                    budget=Budget(warmup_steps=1, sampling_steps=1))


def _small_run(kind, seed=0, flow=None, **kw):
    cfg = SamplerConfig(kind, n_chains=10, **kw)
    return run_sampler(cfg, T.diagonal_gaussian(3), flow=flow, seed=seed,
                       budget=Budget(warmup_steps=50, sampling_steps=60, fit_steps=30,
                                     refit_steps=30))


@pytest.mark.parametrize("kind", ["mh", "hmc", "jump_hmc", "neutra_mh", "imh"])
def test_run_sampler_is_reproducible(kind):
    def go():
        flow = F.build_flow("realnvp", 3, seed=1) if kind in (
            "jump_hmc", "neutra_mh", "imh") else None
        res = _small_run(kind, seed=11, flow=flow)
        res.warmup_seconds = res.sampling_seconds = None
        return res.to_json()
    assert go() == go()


def test_run_sampler_jump_schedule():
    res = _small_run("jump_mh", flow=F.build_flow("realnvp", 3), jump_interval=4)
    assert res.n_steps == 60
    assert res.accept_rate_jump is not None and res.accept_rate_local is not None
    assert res.diagnostics["svi"]["steps"] == 30
    assert res.diagnostics["mle"]["steps"] == 30


def test_neutra_identity_flow_matches_plain_sampler():
    for local in ("mh", "hmc"):
        plain = _small_run(local, seed=3)
        neutra = _small_run(f"neutra_{local}", seed=3, flow=F.identity_flow(3),
                            svi_fraction=0.0)
        # the identity flow has no parameters, so the SVI phase is a no-op
        assert plain.second_moment == neutra.second_moment
        assert plain.first_moment == neutra.first_moment


def test_run_result_round_trip(tmp_path):
    res = _small_run("mh")
    path = tmp_path / "res.json"
    res.save(path)
    raw = json.loads(path.read_text())
    for key in ("second_moment", "first_moment", "n_steps", "accept_rate_local",
                "accept_rate_jump", "warmup_seconds", "sampling_seconds", "divergences"):
        assert key in raw
    assert RunResult.from_dict(raw) == res
