"""Streaming moments, squared bias of the second moment, and rank tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateRanks, InputError


class RunningMoments:
    """Running averages of ``x`` and ``x**2`` over a stream of points.

    ``transform`` (optional) maps a batch of points to the space in which
    moments are wanted, e.g. a flow inverse for preconditioned samplers.
    Transformed points that are not finite are dropped and counted in
    ``dropped``.
    """

    def __init__(self, dim, transform=None):
        self.dim = int(dim)
        self.transform = transform
        self.n = 0
        self.mean = np.zeros(self.dim)
        self.mean_sq = np.zeros(self.dim)
        self.dropped = 0

    @property
    def nbytes(self):
        return self.mean.nbytes + self.mean_sq.nbytes

    def update(self, batch):
        batch = np.asarray(batch, dtype=float)
        if batch.ndim == 1:
            batch = batch[None, :]
        if batch.shape[0] == 0:
            raise InputError("empty batch")
        if batch.shape[1] != self.dim:
            raise InputError(f"batch width {batch.shape[1]} != {self.dim}")
        if self.transform is not None:
            with np.errstate(all="ignore"):
                batch = np.asarray(self.transform(batch), dtype=float)
        ok = np.all(np.isfinite(batch), axis=1)
        if not np.all(ok):
            self.dropped += int(np.sum(~ok))
            batch = batch[ok]
        if batch.shape[0] == 0:
            return self
        self._merge(batch.shape[0], batch.mean(axis=0), np.mean(batch ** 2, axis=0))
        return self

    def _merge(self, k, mean, mean_sq):
        m = self.n
        n = m + k
        a = m / n
        b = k / n
        self.mean = a * self.mean + b * mean
        self.mean_sq = a * self.mean_sq + b * mean_sq
        self.n = n

    def merge(self, other: "RunningMoments"):
        if other.dim != self.dim:
            raise InputError("cannot merge accumulators of different dimension")
        self.dropped += other.dropped
        if other.n:
            self._merge(other.n, other.mean, other.mean_sq)
        return self

    @property
    def first_moment(self):
        return self.mean.copy()

    @property
    def second_moment(self):
        return self.mean_sq.copy()

    @property
    def variance(self):
        return self.mean_sq - self.mean ** 2


def update_running_moments(acc: RunningMoments, batch) -> RunningMoments:
    return acc.update(batch)


def merge_all(accumulators):
    accumulators = list(accumulators)
    out = RunningMoments(accumulators[0].dim)
    for acc in accumulators:
        out.merge(acc)
    return out


def squared_bias(estimated_second, true_second, true_variance) -> float:
    """max_d (est_d - true_d)^2 / var_d."""
    est = np.asarray(estimated_second, dtype=float)
    true = np.asarray(true_second, dtype=float)
    var = np.asarray(true_variance, dtype=float)
    if est.shape != true.shape or true.shape != var.shape or est.ndim != 1:
        raise InputError("second moments and variances must be equal-length vectors")
    if np.any(var <= 0):
        raise InputError("variances must be positive")
    return float(np.max((est - true) ** 2 / var))


def standardize_ranks(values) -> np.ndarray:
    """Average ranks (ascending), centered and scaled by the sample sd."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size < 2:
        raise DegenerateRanks("need at least two methods to rank")
    ranks = rankdata(values, method="average")
    sd = np.std(ranks, ddof=1)
    if sd == 0:
        raise DegenerateRanks("all methods tied")
    return (ranks - ranks.mean()) / sd


@dataclass
class RankTable:
    target: str
    values: dict = field(default_factory=dict)

    @property
    def methods(self):
        return sorted(self.values)

    def standardized(self) -> dict:
        methods = self.methods
        sr = standardize_ranks([self.values[m] for m in methods])
        return dict(zip(methods, sr))


def aggregate_ranks(tables) -> dict:
    """Per method ``(mean rank, standard error or None)`` over targets."""
    tables = list(tables)
    if not tables:
        raise InputError("no rank tables to aggregate")
    methods = tables[0].methods
    for t in tables[1:]:
        if t.methods != methods:
            raise InputError(f"target {t.target!r} has a different method set")
    ranks = np.array([[t.standardized()[m] for m in methods] for t in tables])
    b = len(tables)
    out = {}
    for j, m in enumerate(methods):
        mean = float(ranks[:, j].mean())
        se = None if b == 1 else float(np.std(ranks[:, j], ddof=1) / np.sqrt(b))
        out[m] = (mean, se)
    return out
