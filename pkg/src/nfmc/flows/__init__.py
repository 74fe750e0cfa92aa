"""Normalizing-flow bijections, flow container and builders."""

import numpy as np

from .base import Bijection, FlowContext, FlowModel, implicit_inverse, solve_monotone
from .build import (ARCHITECTURES, build_flow, hyperparameter_grid, identity_flow,
                    load_checkpoint, resolve_hyperparameters, save_checkpoint)
from .continuous import ContinuousFlow, LinearField, VelocityField, cnf_integrate
from .contractive import (ContractiveResidual, LinearResidual, SpectralMLP,
                          contractive_inverse, contractive_logdet, hutchinson_trace,
                          power_iteration, spectral_normalize)
from .coupling import (CouplingLayer, ElementwiseAffine, FixedAffine,
                       MaskedAutoregressiveInverse, Permutation)
from .nets import MADE, MLP, made_masks
from .residual import Planar, Radial, Sylvester
from .spline import rational_quadratic_spline


def flow_forward(flow, x, rng=None):
    return flow.forward(x, rng=rng)


def flow_inverse(flow, z, rng=None):
    return flow.inverse(z, rng=rng)


def flow_log_density(flow, x, rng=None):
    """Log density and whether it is exact (``False`` for estimator layers)."""
    return flow.log_prob(x, rng=rng), flow.deterministic_logdet


def flow_sample(flow, rng, n):
    return flow.sample(rng, n)


def whitening_flow(covariance, mean=None):
    """Fixed affine flow ``z = L^{-1} (x - mean)`` with ``L L^T = covariance``."""
    chol = np.linalg.cholesky(np.asarray(covariance, dtype=float))
    inv = np.linalg.inv(chol)
    shift = None if mean is None else -inv @ np.asarray(mean, dtype=float)
    return FlowModel(chol.shape[0], [FixedAffine(inv, shift)], params=[{}],
                     architecture="whitening")
