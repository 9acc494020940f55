"""Canonicalize -> invariant attention -> restore: the SIM(3)-equivariant transformer block.

Token sets have shape (..., M, D, 3).
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Module, Parameter
from .vn import NORM_EPS, VnLinear, VnNonlinear

LAYERNORM_EPS = 1e-5


class VnLayerNorm(Module):
    """Translation- and scale-invariant, rotation-equivariant normalization of each token.

    Channels are centered on their mean, divided by their norms, and rescaled by a
    vanilla layernorm of the norm vector. The norm vector is first divided by its
    mean so the layernorm epsilon cannot reintroduce a dependence on scale.
    """

    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.offset = Parameter(np.zeros(d))

    def __call__(self, v):
        centered = v - ag.mean(v, axis=-2, keepdims=True)
        norms = ag.vnorm(centered, axis=-1)
        rel = norms / ag.clamp_min(ag.mean(norms, axis=-1, keepdims=True), NORM_EPS)
        mu = ag.mean(rel, axis=-1, keepdims=True)
        dev = rel - mu
        var = ag.mean(dev * dev, axis=-1, keepdims=True)
        scaled = dev / ag.sqrt(var + LAYERNORM_EPS) * self.gain + self.offset
        direction = centered / ag.expand_dims(ag.clamp_min(norms, NORM_EPS), -1)
        return ag.expand_dims(scaled, -1) * direction


def canonicalize(norm: VnLayerNorm, vs):
    return norm(vs)


class VnAttention(Module):
    """Multi-head attention on canonical tokens with Frobenius-product logits."""

    def __init__(self, d: int, head_count: int, rng: np.random.Generator, bias_norm: float = 0.0):
        if head_count < 1 or d % head_count:
            raise ValueError(f"channel width {d} is not divisible by head count {head_count}")
        self.d = d
        self.head_count = head_count
        self.query_map = VnLinear(d, d, rng, bias_norm)
        self.key_map = VnLinear(d, d, rng, bias_norm)
        self.value_map = VnLinear(d, d, rng, bias_norm)

    def _split(self, x):
        shape = x.shape
        return x.reshape(*shape[:-2], self.head_count, self.d // self.head_count, 3)

    def weights(self, queries, keys):
        """Attention weights of shape (..., H, M_q, M_k); rows sum to one."""
        q = self._split(self.query_map(queries))
        k = self._split(self.key_map(keys))
        logits = ag.einsum("...ihdc,...jhdc->...hij", q, k) * (1.0 / np.sqrt(3.0 * (self.d // self.head_count)))
        return ag.softmax(logits, axis=-1)

    def __call__(self, queries, keys):
        a = self.weights(queries, keys)
        values = self._split(self.value_map(keys))
        z = ag.einsum("...hij,...jhdc->...ihdc", a, values)
        return z.reshape(*z.shape[:-3], self.d, 3)


def attention_weights(layer: VnAttention, queries, keys) -> np.ndarray:
    a = layer.weights(queries, keys).data
    return a[..., 0, :, :] if layer.head_count == 1 else a


def scale_statistic(v):
    """Mean over channels of the norm of the token-averaged, channel-centered features."""
    centered = v - ag.mean(v, axis=-2, keepdims=True)
    return ag.mean(ag.vnorm(ag.mean(centered, axis=-3), axis=-1), axis=-1)


class Restoration(Module):
    """Residual ``V + Phi(mu * Z)``: re-injects the input's scale and position."""

    def __init__(self, d: int, rng: np.random.Generator, bias_norm: float = 0.0):
        self.fuse_map = VnLinear(d, d, rng, bias_norm)

    def __call__(self, v, z):
        mu = scale_statistic(v)
        mu = ag.reshape(mu, mu.shape + (1, 1, 1))
        return v + self.fuse_map(mu * z)


class Sim3Block(Module):
    """One layer module: attention sub-path and feed-forward sub-path, each restored."""

    def __init__(
        self,
        d: int,
        head_count: int,
        rng: np.random.Generator,
        mode: str = "self-attention",
        leaky_alpha: float = 0.2,
        bias_norm: float = 0.0,
    ):
        if mode not in ("self-attention", "cross-attention"):
            raise ValueError(f"unknown block mode {mode!r}")
        self.mode = mode
        self.norm1 = VnLayerNorm(d)
        if mode == "cross-attention":
            self.norm_context = VnLayerNorm(d)
        self.attention = VnAttention(d, head_count, rng, bias_norm)
        self.restore1 = Restoration(d, rng, bias_norm)
        self.norm2 = VnLayerNorm(d)
        self.ff_in = VnLinear(d, 2 * d, rng, bias_norm)
        self.ff_act = VnNonlinear(2 * d, rng, leaky_alpha, bias_norm)
        self.ff_out = VnLinear(2 * d, d, rng, bias_norm)
        self.restore2 = Restoration(d, rng, bias_norm)

    def __call__(self, x, context=None):
        if (context is None) == (self.mode == "cross-attention"):
            raise ValueError(f"{self.mode} block: context must be given iff mode is cross-attention")
        q = self.norm1(x)
        k = q if context is None else self.norm_context(context)
        x = self.restore1(x, self.attention(q, k))
        h = self.ff_out(self.ff_act(self.ff_in(self.norm2(x))))
        return self.restore2(x, h)


def block_forward(block: Sim3Block, queries, context=None):
    return block(queries, context)
