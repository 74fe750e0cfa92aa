"""Architecture registry, hyperparameter grid and checkpoints."""

import itertools
import json
from pathlib import Path

import numpy as np

from ..errors import DataError, SpecError
from .base import FlowModel
from .continuous import ContinuousFlow
from .contractive import ContractiveResidual
from .coupling import (CouplingLayer, ElementwiseAffine, MaskedAutoregressiveInverse,
                       Permutation, random_permutation)
from .residual import Planar, Radial, Sylvester

AUTOREGRESSIVE = {
    "nice": ("coupling", "shift"),
    "realnvp": ("coupling", "affine"),
    "c_rq_nsf": ("coupling", "rational_quadratic_spline"),
    "iaf": ("iaf", "affine"),
    "ia_rq_nsf": ("iaf", "rational_quadratic_spline"),
}
RESIDUAL = ("planar", "sylvester", "radial")
CONTRACTIVE = {"iresnet": "power_series", "resflow": "roulette"}
CONTINUOUS = {
    "cnf_euler": {"solver": "euler", "time_dependent": False, "regularization": 0.0},
    "cnf_rk": {"solver": "rk4", "time_dependent": True, "regularization": 0.0},
    "cnf_rk_r": {"solver": "rk4", "time_dependent": True, "regularization": 0.01},
}
ARCHITECTURES = (tuple(AUTOREGRESSIVE) + RESIDUAL + tuple(CONTRACTIVE)
                 + tuple(CONTINUOUS))
EXTRA_ARCHITECTURES = ("identity", "elementwise_affine")

# grid axes; the first combination of each is the default set
_LAYERS = (2, 5, 10)
_CONDITIONERS = ((10, 2), (100, 5))
_CNF_DEPTHS = (1, 5, 10)
_CNF_WIDTHS = (10, 100)

# optional knobs that are not part of the grid
_EXTRA_KEYS = {
    "contractive": {"coefficient", "n_terms", "p_stop", "tolerance", "max_iterations"},
    "continuous": {"steps", "regularization"},
}


def hyperparameter_grid(architecture):
    """All grid entries for ``architecture`` in canonical order."""
    if architecture in AUTOREGRESSIVE:
        return [{"n_layers": l, "hidden_size": h, "n_hidden_layers": k}
                for l, (h, k) in itertools.product(_LAYERS, _CONDITIONERS)]
    if architecture in RESIDUAL or architecture in CONTRACTIVE:
        return [{"n_layers": l} for l in _LAYERS]
    if architecture in CONTINUOUS:
        return [{"n_hidden_layers": k, "hidden_size": h}
                for k, h in itertools.product(_CNF_DEPTHS, _CNF_WIDTHS)]
    if architecture in EXTRA_ARCHITECTURES:
        return [{}]
    raise SpecError(f"unknown architecture {architecture!r}")


def resolve_hyperparameters(architecture, hyperparameters=None):
    """Return ``(full hyperparameter dict, grid index)``."""
    grid = hyperparameter_grid(architecture)
    if hyperparameters in (None, "default"):
        return dict(grid[0]), 0
    if isinstance(hyperparameters, int):
        if not 0 <= hyperparameters < len(grid):
            raise SpecError(f"hyperparameter id {hyperparameters} out of range")
        return dict(grid[hyperparameters]), hyperparameters
    hp = dict(hyperparameters)
    grid_keys = set(grid[0])
    family = ("contractive" if architecture in CONTRACTIVE else
              "continuous" if architecture in CONTINUOUS else None)
    extra = _EXTRA_KEYS.get(family, set())
    unknown = set(hp) - grid_keys - extra
    if unknown:
        raise SpecError(f"unknown hyperparameters for {architecture}: "
                        f"{sorted(unknown)}")
    core = {k: hp.get(k, grid[0][k]) for k in grid[0]}
    for i, entry in enumerate(grid):
        if entry == core:
            full = dict(core)
            full.update({k: hp[k] for k in hp if k in extra})
            return full, i
    raise SpecError(f"hyperparameters {core} are not on the grid for {architecture}")


def build_flow(architecture, dim, hyperparameters=None, seed=0):
    """Identity-initialized flow for one grid entry of ``architecture``."""
    if dim < 1:
        raise SpecError("dimension must be positive")
    hp, index = resolve_hyperparameters(architecture, hyperparameters)
    rng = np.random.default_rng(seed)
    layers = []
    if architecture in AUTOREGRESSIVE:
        family, transformer = AUTOREGRESSIVE[architecture]
        cls = CouplingLayer if family == "coupling" else MaskedAutoregressiveInverse
        total = np.arange(dim)
        for i in range(hp["n_layers"]):
            if i > 0:
                perm = random_permutation(dim, rng)
                total = total[perm]
                layers.append(Permutation(dim, perm))
            layers.append(cls(dim, transformer, hp["hidden_size"],
                              hp["n_hidden_layers"]))
        if hp["n_layers"] > 1:
            # undo the accumulated reordering so the initial flow is the identity
            layers.append(Permutation(dim, np.argsort(total)))
    elif architecture == "planar":
        layers = [Planar(dim) for _ in range(hp["n_layers"])]
    elif architecture == "radial":
        layers = [Radial(dim) for _ in range(hp["n_layers"])]
    elif architecture == "sylvester":
        m = max(1, dim // 2)
        for _ in range(hp["n_layers"]):
            q, _ = np.linalg.qr(rng.standard_normal((dim, m)))
            layers.append(Sylvester(dim, q))
    elif architecture in CONTRACTIVE:
        opts = {k: hp[k] for k in _EXTRA_KEYS["contractive"] if k in hp}
        for i in range(hp["n_layers"]):
            layers.append(ContractiveResidual(
                dim, estimator=CONTRACTIVE[architecture],
                seed=int(rng.integers(2 ** 31)), **opts))
    elif architecture in CONTINUOUS:
        opts = dict(CONTINUOUS[architecture])
        if "regularization" in hp:
            opts["regularization"] = hp["regularization"]
        layers = [ContinuousFlow(dim, hp["hidden_size"], hp["n_hidden_layers"],
                                 steps=hp.get("steps"), **opts)]
    elif architecture == "elementwise_affine":
        layers = [ElementwiseAffine(dim)]
    flow = FlowModel(dim, layers, architecture=architecture, hyperparameters=hp,
                     seed=seed, params=[l.init_params(rng) for l in layers])
    flow.hyperparam_id = index
    flow.refresh(50)
    return flow


def identity_flow(dim):
    return build_flow("identity", dim)


def save_checkpoint(flow, path):
    Path(path).write_text(json.dumps(flow.to_checkpoint(), sort_keys=True))


def load_checkpoint(source):
    """Rebuild a flow from a checkpoint dict or JSON file path."""
    if isinstance(source, (str, Path)):
        try:
            source = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read flow checkpoint: {exc}") from exc
    try:
        flow = build_flow(source["architecture"], int(source["dim"]),
                          source.get("hyperparameters"), int(source.get("seed", 0)))
        flow.set_parameters(np.asarray(source["parameters"], dtype=float),
                            power_iterations=0)
    except KeyError as exc:
        raise DataError(f"checkpoint missing {exc.args[0]!r}") from exc
    if source.get("buffers"):
        flow.set_buffers(source["buffers"])
    else:
        flow.refresh(50)
    return flow
