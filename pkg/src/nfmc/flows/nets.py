"""Small tanh networks used as conditioners and vector fields."""

import numpy as np

from .. import diff as d


class MLP:
    """Fully connected tanh network with a linear output layer.

    Parameters live in the owning layer's dict under ``{prefix}W{i}`` and
    ``{prefix}b{i}``.  Optional ``masks`` (one per weight matrix) are
    multiplied into the weights, which is how MADE is built.
    """

    def __init__(self, sizes, prefix="", masks=None, zero_last=True):
        self.sizes = [int(s) for s in sizes]
        self.prefix = prefix
        self.masks = masks
        self.zero_last = zero_last

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def param_shapes(self):
        shapes = {}
        for i in range(self.n_layers):
            shapes[f"{self.prefix}W{i}"] = (self.sizes[i + 1], self.sizes[i])
            shapes[f"{self.prefix}b{i}"] = (self.sizes[i + 1],)
        return shapes

    def init_params(self, rng):
        p = {}
        for i in range(self.n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            last = i == self.n_layers - 1
            if last and self.zero_last:
                w = np.zeros((fan_out, fan_in))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(max(fan_in, 1)), (fan_out, fan_in))
            p[f"{self.prefix}W{i}"] = w
            p[f"{self.prefix}b{i}"] = np.zeros(fan_out)
        return p

    def weight(self, p, i):
        w = p[f"{self.prefix}W{i}"]
        if self.masks is not None:
            w = w * self.masks[i]
        return w

    def __call__(self, x, p):
        h = x
        for i in range(self.n_layers):
            h = d.affine(h, self.weight(p, i), p[f"{self.prefix}b{i}"])
            if i < self.n_layers - 1:
                h = d.tanh(h)
        return h

    def linearize(self, x, p, weights=None):
        """Output at ``x`` and a function computing Jacobian-vector products.

        ``weights`` optionally overrides the (masked) weight matrices, e.g.
        with spectrally normalized versions.  Tangents may carry extra
        leading axes (several probes at once).
        """
        ws = weights or [self.weight(p, i) for i in range(self.n_layers)]
        h = x
        slopes = []
        for i in range(self.n_layers):
            h = d.affine(h, ws[i], p[f"{self.prefix}b{i}"])
            if i < self.n_layers - 1:
                h = d.tanh(h)
                slopes.append(1.0 - d.square(h))

        def jvp(v):
            for i in range(self.n_layers):
                v = d.matvec(ws[i], v)
                if i < self.n_layers - 1:
                    v = slopes[i] * v
            return v

        return h, jvp


def made_degrees(dim, hidden_sizes, order=None):
    order = np.arange(1, dim + 1) if order is None else np.asarray(order) + 1
    degrees = [order]
    top = max(1, dim - 1)
    for h in hidden_sizes:
        degrees.append(np.arange(h) % top + 1)
    return degrees


def made_masks(dim, hidden_sizes, order=None, n_params=1):
    """Masks making output ``j`` depend only on inputs earlier in ``order``.

    ``order`` is a permutation of ``range(dim)`` giving each input's
    position; outputs are laid out coordinate-major (``j * n_params + k``).
    Returns one mask per weight matrix, shaped like the weights.
    """
    degrees = made_degrees(dim, hidden_sizes, order)
    masks = []
    for prev, cur in zip(degrees[:-1], degrees[1:]):
        masks.append((cur[:, None] >= prev[None, :]).astype(float))
    out_deg = np.repeat(degrees[0], n_params)
    masks.append((out_deg[:, None] > degrees[-1][None, :]).astype(float))
    return masks


class MADE(MLP):
    def __init__(self, dim, hidden_sizes, n_params, order=None, prefix=""):
        self.dim = dim
        self.n_out = n_params
        masks = made_masks(dim, hidden_sizes, order, n_params)
        super().__init__([dim, *hidden_sizes, dim * n_params], prefix=prefix,
                         masks=masks)
