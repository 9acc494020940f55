"""Vector-neuron layers that commute with similarity transforms.

A vector feature is an array of shape (..., D, 3): D channels, each a 3-vector
stored as a row. A similarity g = (s, R, t) acts on every row, so
``g . V = s * V @ R.T + t``.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Module, Parameter, Tensor

NORM_EPS = 1e-8


def project_rows_to_affine(weights):
    """Shift each row uniformly so it sums to one.

    Works on numpy arrays and on tensors (the projection is then part of the graph,
    which is how layers keep the constraint exact through training).
    """
    if isinstance(weights, Tensor):
        d_in = weights.shape[-1]
        return weights + (1.0 - weights.sum(axis=-1, keepdims=True)) / d_in
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[-1] < 1:
        raise ValueError("need at least one input column")
    return w + (1.0 - w.sum(axis=-1, keepdims=True)) / w.shape[-1]


class VnLinear(Module):
    """Channel mixing ``W @ V`` with rows of W summing to one.

    ``weight`` holds an unconstrained matrix; the forward pass always uses its
    affine projection. An optional bias ``bias_norm * dir / ||dir||`` breaks exact
    equivariance by a controlled amount.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias_norm: float = 0.0):
        if d_in < 1 or d_out < 1:
            raise ValueError("channel counts must be positive")
        self.d_in = d_in
        self.d_out = d_out
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (d_out, d_in)))
        if bias_norm < 0:
            raise ValueError("bias_norm must be non-negative")
        self.bias_norm = float(bias_norm)
        self.bias_scale = 1.0
        if bias_norm > 0:
            self.bias_direction = Parameter(rng.standard_normal((d_out, 3)))

    @property
    def has_bias(self) -> bool:
        return self.bias_norm > 0

    def effective_weight(self):
        return project_rows_to_affine(self.weight)

    def bias(self):
        direction = self.bias_direction
        return direction * (self.bias_norm * self.bias_scale / ag.vnorm(direction.reshape(-1), axis=0))

    def bias_term(self):
        """The bias tensor, or None when it is absent or switched off."""
        if self.has_bias and self.bias_scale != 0.0:
            return self.bias()
        return None

    def __call__(self, v):
        width = ag.as_array(v).shape[-2]
        if width != self.d_in:
            raise ValueError(f"VN-Linear expects {self.d_in} input channels, got {width}")
        out = ag.channel_mix(self.effective_weight(), v)
        if self.has_bias and self.bias_scale != 0.0:
            out = out + self.bias()
        return out


def vn_relu_gate(f, f_o, b_o):
    """Per channel: keep ``f`` where <f_o, b_o> >= 0, else remove the projection onto b_o."""
    dot = (f_o * b_o).sum(axis=-1, keepdims=True)
    sq = (b_o * b_o).sum(axis=-1, keepdims=True)
    keep = (dot.data >= 0) | (sq.data < NORM_EPS**2)
    coef = ag.where(keep, 0.0, dot / ag.clamp_min(sq, NORM_EPS**2))
    return f - coef * b_o


class VnNonlinear(Module):
    """VN-ReLU (alpha = 0) and VN-LeakyReLU: ``alpha * V + (1 - alpha) * ReLU(V)``."""

    def __init__(self, d: int, rng: np.random.Generator, leaky_alpha: float = 0.0, bias_norm: float = 0.0):
        if not 0.0 <= leaky_alpha < 1.0:
            raise ValueError("leaky_alpha must lie in [0, 1)")
        self.feature_map = VnLinear(d, d, rng, bias_norm)
        self.direction_map = VnLinear(d, d, rng, bias_norm)
        self.origin_map = VnLinear(d, d, rng, bias_norm)
        self.leaky_alpha = float(leaky_alpha)

    def stacked_weight(self):
        """Feature, direction and origin maps as one (3D, D) matrix."""
        maps = (self.feature_map, self.direction_map, self.origin_map)
        return ag.concat([m.effective_weight() for m in maps], axis=0)

    def stacked_bias(self):
        maps = (self.feature_map, self.direction_map, self.origin_map)
        terms = [m.bias_term() for m in maps]
        if all(t is None for t in terms):
            return None
        d = self.feature_map.d_out
        return ag.concat([np.zeros((d, 3)) if t is None else t for t in terms], axis=0)

    def gate(self, fbo):
        """ReLU from stacked (..., 3D, 3) map outputs."""
        d = self.feature_map.d_out
        cut = lambda i: ag.getitem(fbo, (Ellipsis, slice(i * d, (i + 1) * d), slice(None)))
        return ag.vn_gate(cut(0), cut(2), cut(1), NORM_EPS)

    def relu(self, v):
        fbo = ag.channel_mix(self.stacked_weight(), v)
        bias = self.stacked_bias()
        if bias is not None:
            fbo = fbo + bias
        return self.gate(fbo)

    def blend(self, v, relu_out):
        if self.leaky_alpha == 0.0:
            return relu_out
        return self.leaky_alpha * v + (1.0 - self.leaky_alpha) * relu_out

    def branch_mask(self, v) -> np.ndarray:
        """True where a channel passes through unchanged."""
        v = ag.as_array(v)
        f = self.feature_map(v).data
        b = self.direction_map(v).data
        o = self.origin_map(v).data
        return np.sum((f - o) * (b - o), axis=-1) >= 0

    def __call__(self, v):
        return self.blend(v, self.relu(v))


class VnMax(Module):
    """Per-channel selection of the token most aligned with its learned direction."""

    def __init__(self, d: int, rng: np.random.Generator, bias_norm: float = 0.0):
        self.direction_map = VnLinear(d, d, rng, bias_norm)
        self.origin_map = VnLinear(d, d, rng, bias_norm)

    def select(self, vs, axis: int = -3) -> np.ndarray:
        """Winning token index per channel; shape is ``vs`` without the pooled axis and the 3-axis."""
        arr = ag.as_array(vs)
        b = self.direction_map(arr).data
        o = self.origin_map(arr).data
        score = np.sum((arr - o) * (b - o), axis=-1)
        # np.argmax returns the first maximum, i.e. ties go to the lowest token index
        return np.argmax(score, axis=axis + 1 if axis < 0 else axis)

    def __call__(self, vs, axis: int = -3):
        if ag.as_array(vs).shape[axis] == 0:
            raise ValueError("VN-Max needs at least one token")
        idx = self.select(vs, axis)
        ax = axis if axis >= 0 else ag.as_array(vs).ndim + axis
        gathered = ag.take_along_axis(vs, np.expand_dims(np.expand_dims(idx, ax), -1), ax)
        return ag.squeeze(gathered, ax)


def vn_linear_forward(layer: VnLinear, v):
    return layer(v)


def vn_relu_forward(layer: VnNonlinear, v):
    return layer(v)


def vn_max_forward(layer: VnMax, vs):
    return layer(vs)


def set_bias_scale(module: Module, scale: float) -> None:
    """Multiply every VN-Linear bias inside ``module`` by ``scale`` (0 disables them)."""
    for m in module.modules():
        if isinstance(m, VnLinear):
            m.bias_scale = float(scale)
