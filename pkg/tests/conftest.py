import numpy as np
import pytest

CRITERIA = {
    1: "gradient suite (targets 1e-5, flow parameters 1e-4)",
    2: "bijectivity at dims 2, 4, 10",
    3: "change of variables: 2-D densities integrate to 1",
    4: "log-det estimator correctness",
    5: "sampler exactness (b2, leapfrog reversibility, detailed balance)",
    6: "NeuTra identity equivalence",
    7: "perfect-proposal IMH",
    8: "multimodal jump vs plain MH",
    9: "whitening NeuTra gradient",
    10: "metrics exactness",
    11: "determinism of experiment reports",
}

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: long-running statistical test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        ok = rep.passed and not hasattr(rep, "wasxfail")
        if rep.skipped and not hasattr(rep, "wasxfail"):
            ok = None
        prev = _outcomes.get(n, True)
        if ok is None:
            _outcomes.setdefault(n, None)
        else:
            _outcomes[n] = (prev is not False) and ok


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in _outcomes:
            continue
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[_outcomes[n]]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {CRITERIA[n]}")


# -- shared helpers -----------------------------------------------------------


def fd_gradient(f, x, h=1e-5):
    """Central differences of a batched scalar function ``f: (n, d) -> (n,)``."""
    x = np.atleast_2d(x)
    n, dim = x.shape
    eye = np.eye(dim) * h
    plus = (x[:, None, :] + eye).reshape(-1, dim)
    minus = (x[:, None, :] - eye).reshape(-1, dim)
    return ((f(plus) - f(minus)) / (2 * h)).reshape(n, dim)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def fd_jacobian(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def perturb(flow, rng, scale=0.3):
    p = flow.get_parameters()
    flow.set_parameters(p + scale * rng.standard_normal(p.size))
    return flow


@pytest.fixture
def german_credit_data():
    from nfmc.targets import PosteriorDataset

    rng = np.random.default_rng(7)
    x = rng.standard_normal((60, 25))
    y = (rng.random(60) < 0.4).astype(float)
    return PosteriorDataset("german_credit", {"x": x, "y": y})


@pytest.fixture
def eight_schools_data():
    from nfmc.targets import PosteriorDataset

    return PosteriorDataset("eight_schools", {
        "y": [28, 8, -3, 7, -1, 1, 18, 12],
        "sigma": [15, 10, 16, 11, 9, 11, 10, 18]})
