"""Monotone rational-quadratic splines on [-B, B] with identity tails."""

import numpy as np

from .. import diff as d

N_BINS = 8
BOUND = 10.0
MIN_WIDTH = 1e-3
MIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(_DERIV_SHIFT) + MIN_DERIVATIVE == 1, so zero raw parameters give
# unit interior derivatives and the spline is the identity.
_DERIV_SHIFT = float(np.log(np.expm1(1.0 - MIN_DERIVATIVE)))


def n_spline_params(n_bins=N_BINS):
    return 3 * n_bins - 1


def _knots(raw, n_bins, minimum, bound):
    sizes = minimum + (1.0 - minimum * n_bins) * d.softmax(raw, axis=-1)
    cum = d.cumsum(sizes, axis=-1)
    zero = np.zeros(d.value(raw).shape[:-1] + (1,))
    cum = d.concat([zero, cum], axis=-1)
    return 2.0 * bound * cum - bound, 2.0 * bound * sizes


def spline_knots(params, n_bins=N_BINS, bound=BOUND):
    """Knot x/y positions, bin widths/heights and knot derivatives."""
    K = n_bins
    xs, widths = _knots(params[..., :K], K, MIN_WIDTH, bound)
    ys, heights = _knots(params[..., K:2 * K], K, MIN_HEIGHT, bound)
    inner = MIN_DERIVATIVE + d.softplus(params[..., 2 * K:] + _DERIV_SHIFT)
    one = np.ones(d.value(params).shape[:-1] + (1,))
    derivs = d.concat([one, inner, one], axis=-1)
    return xs, ys, widths, heights, derivs


def rational_quadratic_spline(u, params, inverse=False, n_bins=N_BINS,
                              bound=BOUND):
    """Elementwise monotone spline and its log-derivative.

    ``params`` has shape ``u.shape + (3 * n_bins - 1,)``: unnormalized bin
    widths, bin heights and interior knot derivatives.  Outside
    ``[-bound, bound]`` the map is the identity.  With ``inverse=True`` the
    inverse map is applied and the returned log-derivative is that of the
    inverse.
    """
    xs, ys, widths, heights, derivs = spline_knots(params, n_bins, bound)
    uc = d.clip(u, -bound, bound)
    inside = d.between(u, -bound, bound)
    knots = ys if inverse else xs
    idx = d.bin_index(d.stop_gradient(knots), uc)
    xk = d.take(xs, idx)
    yk = d.take(ys, idx)
    wk = d.take(widths, idx)
    hk = d.take(heights, idx)
    dk = d.take(derivs, idx)
    dk1 = d.take(derivs, idx + 1)
    s = hk / wk
    if not inverse:
        xi = d.clip((uc - xk) / wk, 0.0, 1.0)
        t = xi * (1.0 - xi)
        den = s + (dk1 + dk - 2.0 * s) * t
        out = yk + hk * (s * d.square(xi) + dk * t) / den
        num = d.square(s) * (dk1 * d.square(xi) + 2.0 * s * t + dk * d.square(1.0 - xi))
        logd = d.log(num) - 2.0 * d.log(den)
    else:
        dy = uc - yk
        c2 = dk1 + dk - 2.0 * s
        a = hk * (s - dk) + dy * c2
        b = hk * dk - dy * c2
        c = -s * dy
        disc = d.maximum(d.square(b) - 4.0 * a * c, 0.0)
        xi = d.clip((2.0 * c) / (-b - d.sqrt(disc)), 0.0, 1.0)
        out = xk + xi * wk
        t = xi * (1.0 - xi)
        den = s + c2 * t
        num = d.square(s) * (dk1 * d.square(xi) + 2.0 * s * t + dk * d.square(1.0 - xi))
        logd = 2.0 * d.log(den) - d.log(num)
    value = d.where(inside, out, u)
    logd = d.where(inside, logd, 0.0)
    return value, logd
