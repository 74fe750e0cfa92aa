"""Coupling, inverse-autoregressive, permutation and elementwise layers."""

import numpy as np

from .. import diff as d
from .base import Bijection, lead_shape, zeros_logdet
from .nets import MADE, MLP
from .spline import n_spline_params, rational_quadratic_spline


# transformers act elementwise on (..., m) with parameters (..., m, P)

class ShiftTransformer:
    name = "shift"
    n_params = 1

    def forward(self, x, theta):
        return x + theta[..., 0], zeros_logdet(x[..., :1])

    def inverse(self, y, theta):
        return y - theta[..., 0], zeros_logdet(y[..., :1])


class AffineTransformer:
    name = "affine"
    n_params = 2

    def forward(self, x, theta):
        log_s = theta[..., 0]
        return x * d.exp(log_s) + theta[..., 1], d.sum_(log_s, axis=-1)

    def inverse(self, y, theta):
        log_s = theta[..., 0]
        return (y - theta[..., 1]) * d.exp(-log_s), -d.sum_(log_s, axis=-1)


class SplineTransformer:
    name = "rational_quadratic_spline"

    def __init__(self, n_bins=8, bound=10.0):
        self.n_bins = n_bins
        self.bound = bound
        self.n_params = n_spline_params(n_bins)

    def forward(self, x, theta):
        y, ld = rational_quadratic_spline(x, theta, False, self.n_bins, self.bound)
        return y, d.sum_(ld, axis=-1)

    def inverse(self, y, theta):
        x, ld = rational_quadratic_spline(y, theta, True, self.n_bins, self.bound)
        return x, d.sum_(ld, axis=-1)


TRANSFORMERS = {
    "shift": ShiftTransformer,
    "affine": AffineTransformer,
    "rational_quadratic_spline": SplineTransformer,
}


def make_transformer(name):
    return TRANSFORMERS[name]()


class CouplingLayer(Bijection):
    """First ``d // 2`` coordinates frozen, the rest transformed."""

    kind = "coupling"

    def __init__(self, dim, transformer="affine", hidden_size=10,
                 n_hidden_layers=2):
        super().__init__(dim)
        self.split = dim // 2
        self.transformer = make_transformer(transformer)
        self.n_free = dim - self.split
        self.net = MLP([self.split, *[hidden_size] * n_hidden_layers,
                        self.n_free * self.transformer.n_params])

    def param_shapes(self):
        return self.net.param_shapes()

    def init_params(self, rng):
        return self.net.init_params(rng)

    def _theta(self, frozen, p):
        out = self.net(frozen, p)
        return d.reshape(out, lead_shape(frozen) + (self.n_free,
                                                    self.transformer.n_params))

    def forward(self, x, p, ctx):
        xa, xb = x[..., :self.split], x[..., self.split:]
        yb, ld = self.transformer.forward(xb, self._theta(xa, p))
        return d.concat([xa, yb], axis=-1), ld

    def inverse(self, y, p, ctx):
        ya, yb = y[..., :self.split], y[..., self.split:]
        xb, ld = self.transformer.inverse(yb, self._theta(ya, p))
        return d.concat([ya, xb], axis=-1), ld

    def describe(self):
        return {"kind": self.kind, "transformer": self.transformer.name}


class MaskedAutoregressiveInverse(Bijection):
    """Inverse autoregressive layer.

    The latent-to-data direction ``x_i = tau(z_i; theta(z_<i))`` is a single
    MADE pass; the data-to-latent direction is solved coordinate by
    coordinate, which takes ``dim`` passes.
    """

    kind = "masked_autoregressive_inverse"

    def __init__(self, dim, transformer="affine", hidden_size=10,
                 n_hidden_layers=2):
        super().__init__(dim)
        self.transformer = make_transformer(transformer)
        self.net = MADE(dim, [hidden_size] * n_hidden_layers,
                        self.transformer.n_params)

    def param_shapes(self):
        return self.net.param_shapes()

    def init_params(self, rng):
        return self.net.init_params(rng)

    def _theta(self, z, p):
        out = self.net(z, p)
        return d.reshape(out, lead_shape(z) + (self.dim, self.transformer.n_params))

    def inverse(self, z, p, ctx):
        return self.transformer.forward(z, self._theta(z, p))

    def forward(self, x, p, ctx):
        # after pass k the first k coordinates of z are exact
        z = np.zeros(np.shape(d.value(x)))
        ld = None
        for _ in range(self.dim):
            z, ld = self.transformer.inverse(x, self._theta(z, p))
        return z, ld

    def describe(self):
        return {"kind": self.kind, "transformer": self.transformer.name}


class Permutation(Bijection):
    kind = "permutation"

    def __init__(self, dim, perm):
        super().__init__(dim)
        self.perm = np.asarray(perm, dtype=int)
        self.inv = np.argsort(self.perm)

    def forward(self, x, p, ctx):
        return x[..., self.perm], zeros_logdet(x)

    def inverse(self, y, p, ctx):
        return y[..., self.inv], zeros_logdet(y)

    def describe(self):
        return {"kind": self.kind, "perm": self.perm.tolist()}


def random_permutation(dim, rng):
    """Seeded permutation, re-drawn while it leaves the frozen block (the
    first ``dim // 2`` coordinates) unchanged as a set."""
    k = dim // 2
    perm = rng.permutation(dim)
    if dim > 1 and k > 0:
        for _ in range(100):
            if set(perm[:k]) != set(range(k)):
                break
            perm = rng.permutation(dim)
    return perm


class FixedAffine(Bijection):
    """Non-trainable ``z = A x + c``."""

    kind = "fixed_affine"

    def __init__(self, matrix, shift=None):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        super().__init__(matrix.shape[0])
        self.matrix = matrix
        self.inv_matrix = np.linalg.inv(matrix)
        self.shift = np.zeros(self.dim) if shift is None else np.asarray(shift, float)
        self.logdet = float(np.linalg.slogdet(matrix)[1])

    def forward(self, x, p, ctx):
        return d.matvec(self.matrix, x) + self.shift, zeros_logdet(x) + self.logdet

    def inverse(self, y, p, ctx):
        return d.matvec(self.inv_matrix, y - self.shift), zeros_logdet(y) - self.logdet


class ElementwiseAffine(Bijection):
    """Trainable ``z = (x - loc) * exp(-log_scale)``; identity at zero."""

    kind = "elementwise_affine"

    def param_shapes(self):
        return {"loc": (self.dim,), "log_scale": (self.dim,)}

    def forward(self, x, p, ctx):
        z = (x - p["loc"]) * d.exp(-p["log_scale"])
        return z, zeros_logdet(x) - d.sum_(p["log_scale"])

    def inverse(self, z, p, ctx):
        x = z * d.exp(p["log_scale"]) + p["loc"]
        return x, zeros_logdet(z) + d.sum_(p["log_scale"])
