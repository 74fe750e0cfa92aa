"""Normalizing-flow-assisted MCMC: targets, flows, samplers and benchmarks."""

from . import diff, flows, metrics, samplers, targets, training
from .errors import NFMCError

__version__ = "0.1.0"
