"""Residual layers with closed-form determinants: planar, Sylvester, radial."""

import numpy as np

from .. import diff as d
from .base import Bijection, implicit_inverse, solve_monotone

_LOG_E_MINUS_1 = float(np.log(np.e - 1.0))


class Planar(Bijection):
    """``y = x + u_hat * tanh(w.x + b)``.

    ``u_hat = v + (m(w.v) - w.v) w / |w|^2`` with
    ``m(a) = -1 + softplus(a + log(e - 1))`` keeps ``w.u_hat > -1`` so the
    map is invertible, and ``v = 0`` gives ``u_hat = 0``.
    """

    kind = "planar"

    def param_shapes(self):
        return {"v": (self.dim,), "w": (self.dim,), "b": ()}

    def init_params(self, rng):
        return {"v": np.zeros(self.dim),
                "w": rng.normal(0.0, 1.0 / np.sqrt(self.dim), self.dim),
                "b": np.zeros(())}

    @staticmethod
    def u_hat(p):
        v, w = p["v"], p["w"]
        wv = d.sum_(w * v)
        m = d.softplus(wv + _LOG_E_MINUS_1) - 1.0
        return v + (m - wv) * w / d.sum_(d.square(w))

    def _act(self, x, p):
        return d.tanh(d.sum_(x * p["w"], axis=-1) + p["b"])

    def map(self, x, p):
        h = self._act(x, p)
        return x + d.reshape(h, np.shape(d.value(h)) + (1,)) * self.u_hat(p)

    def forward(self, x, p, ctx):
        u = self.u_hat(p)
        h = self._act(x, p)
        y = x + d.reshape(h, np.shape(d.value(h)) + (1,)) * u
        ld = d.log(1.0 + (1.0 - d.square(h)) * d.sum_(u * p["w"]))
        return y, ld

    def jacobian(self, x, p):
        u = self.u_hat(p)
        h = self._act(x, p)
        eye = np.eye(self.dim)
        return eye + ((1.0 - h * h)[:, None, None] * u[None, :, None]
                      * p["w"][None, None, :])

    def _solve(self, y, p):
        u = self.u_hat(p)
        w = p["w"]
        # t = w.x solves t + (w.u) tanh(t + b) = w.y
        t = solve_monotone(np.sum(w * u), 1.0, p["b"], y @ w)
        return y - np.tanh(t + p["b"])[:, None] * u

    def inverse(self, y, p, ctx):
        pv = {k: d.value(v) for k, v in p.items()}
        x_star = self._solve(d.value(y), pv)
        if d.is_traced(y, *p.values()):
            x = implicit_inverse(self, y, p, ctx, x_star, self.jacobian(x_star, pv))
        else:
            x = x_star
        _, ld = self.forward(x, p, ctx)
        return x, -ld


def _triangular_index(m):
    """Index map scattering a flat strictly-upper vector into (m, m)."""
    idx = np.zeros((m, m), dtype=int)
    rows, cols = np.triu_indices(m, k=1)
    idx[rows, cols] = np.arange(1, len(rows) + 1)
    return idx


class Sylvester(Bijection):
    """``y = x + Q R1 tanh(R2 Q^T x + b)`` with a fixed orthonormal ``Q``.

    ``R1``, ``R2`` are upper triangular with ``tanh``-bounded diagonals, so
    ``1 + R1_ii R2_ii h'`` stays positive and the determinant is the product
    of those diagonal terms.
    """

    kind = "sylvester"

    def __init__(self, dim, q):
        super().__init__(dim)
        self.q = np.asarray(q, dtype=float)
        self.m = self.q.shape[1]
        self.index = _triangular_index(self.m)
        self.n_upper = self.m * (self.m - 1) // 2

    def param_shapes(self):
        return {"r1_diag": (self.m,), "r1_upper": (self.n_upper,),
                "r2_diag": (self.m,), "r2_upper": (self.n_upper,),
                "b": (self.m,)}

    def init_params(self, rng):
        scale = 1.0 / np.sqrt(self.m)
        return {"r1_diag": np.zeros(self.m), "r1_upper": np.zeros(self.n_upper),
                "r2_diag": rng.normal(0.0, 1.0, self.m),
                "r2_upper": rng.normal(0.0, scale, self.n_upper),
                "b": np.zeros(self.m)}

    def _r(self, p, which):
        padded = d.concat([np.zeros(1), p[f"{which}_upper"]], axis=-1)
        upper = d.getitem(padded, self.index)
        return upper + d.tanh(p[f"{which}_diag"]) * np.eye(self.m)

    def _hidden(self, x, p, r2):
        a = d.matvec(self.q.T, x)
        return d.tanh(d.matvec(r2, a) + p["b"])

    def map(self, x, p):
        r1, r2 = self._r(p, "r1"), self._r(p, "r2")
        h = self._hidden(x, p, r2)
        return x + d.matvec(self.q, d.matvec(r1, h))

    def forward(self, x, p, ctx):
        r1, r2 = self._r(p, "r1"), self._r(p, "r2")
        h = self._hidden(x, p, r2)
        y = x + d.matvec(self.q, d.matvec(r1, h))
        diag = d.tanh(p["r1_diag"]) * d.tanh(p["r2_diag"])
        ld = d.sum_(d.log(1.0 + (1.0 - d.square(h)) * diag), axis=-1)
        return y, ld

    def jacobian(self, x, p):
        r1, r2 = self._r(p, "r1"), self._r(p, "r2")
        h = self._hidden(x, p, r2)
        left = self.q @ r1                       # (d, m)
        right = r2 @ self.q.T                    # (m, d)
        mid = (1.0 - h * h)[:, :, None] * right[None]
        return np.eye(self.dim) + left[None] @ mid

    def _solve(self, y, p):
        r1, r2 = self._r(p, "r1"), self._r(p, "r2")
        c = y @ self.q                           # (n, m) = Q^T y
        a = np.zeros_like(c)
        h = np.zeros_like(c)
        # back-substitution: unknown a_i given a_{>i}
        for i in range(self.m - 1, -1, -1):
            e = a[:, i + 1:] @ r2[i, i + 1:] + p["b"][i]
            known = h[:, i + 1:] @ r1[i, i + 1:]
            a[:, i] = solve_monotone(r1[i, i], r2[i, i], e, c[:, i] - known)
            h[:, i] = np.tanh(r2[i, i] * a[:, i] + e)
        return y - (c - a) @ self.q.T

    def inverse(self, y, p, ctx):
        pv = {k: d.value(v) for k, v in p.items()}
        x_star = self._solve(d.value(y), pv)
        if d.is_traced(y, *p.values()):
            x = implicit_inverse(self, y, p, ctx, x_star, self.jacobian(x_star, pv))
        else:
            x = x_star
        _, ld = self.forward(x, p, ctx)
        return x, -ld


class Radial(Bijection):
    """``y = x + beta (x - x0) / (alpha + |x - x0|)``.

    ``alpha = softplus(alpha_raw)``, ``beta = -alpha + softplus(beta_raw)``
    keeps ``beta > -alpha`` (invertible); equal raw values give ``beta = 0``.
    """

    kind = "radial"

    def param_shapes(self):
        return {"x0": (self.dim,), "alpha_raw": (), "beta_raw": ()}

    def init_params(self, rng):
        return {"x0": rng.normal(0.0, 1.0, self.dim), "alpha_raw": np.zeros(()),
                "beta_raw": np.zeros(())}

    @staticmethod
    def _ab(p):
        alpha = d.softplus(p["alpha_raw"])
        beta = d.softplus(p["beta_raw"]) - alpha
        return alpha, beta

    def forward(self, x, p, ctx):
        alpha, beta = self._ab(p)
        diff = x - p["x0"]
        r = d.sqrt(d.sum_(d.square(diff), axis=-1))
        h = 1.0 / (alpha + r)
        bh = beta * h
        y = x + d.reshape(bh, np.shape(d.value(bh)) + (1,)) * diff
        # h'(r) r = -r / (alpha + r)^2
        ld = ((self.dim - 1) * d.log(1.0 + bh)
              + d.log(1.0 + bh - beta * r * d.square(h)))
        return y, ld

    def inverse(self, y, p, ctx):
        alpha, beta = self._ab(p)
        dy = y - p["x0"]
        ry = d.sqrt(d.sum_(d.square(dy), axis=-1))
        # r solves r^2 + (alpha + beta - ry) r - alpha ry = 0, r >= 0
        bcoef = alpha + beta - ry
        disc = d.sqrt(d.square(bcoef) + 4.0 * alpha * ry)
        r_small = 2.0 * alpha * ry / (disc + d.maximum(bcoef, 0.0))
        r_large = 0.5 * (disc - d.minimum(bcoef, 0.0))
        r = d.where(d.value(bcoef) > 0, r_small, r_large)
        scale = 1.0 / (1.0 + beta / (alpha + r))
        x = p["x0"] + d.reshape(scale, np.shape(d.value(scale)) + (1,)) * dy
        _, ld = self.forward(x, p, ctx)
        return x, -ld
