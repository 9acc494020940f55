"""A non-equivariant baseline with the same pipeline built from plain scalar layers.

The point-level edge convolutions use three scalar channels per vector channel.
The token width defaults to 1.5x the vector channel count, which keeps the total
parameter count close to the equivariant model's (dense maps grow with width squared).
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Module, Parameter
from .features import farthest_point_sample, gather_tokens, patch_indices
from .geometry import PointCloud
from .model import ModelConfig


class Dense(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (d_out, d_in)))
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x):
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.offset = Parameter(np.zeros(d))

    def __call__(self, x):
        dev = x - ag.mean(x, axis=-1, keepdims=True)
        var = ag.mean(dev * dev, axis=-1, keepdims=True)
        return dev / ag.sqrt(var + 1e-5) * self.gain + self.offset


class Attention(Module):
    def __init__(self, d: int, heads: int, rng):
        self.d, self.heads = d, heads
        self.q, self.k, self.v, self.o = (Dense(d, d, rng) for _ in range(4))

    def __call__(self, x, ctx):
        h, dh = self.heads, self.d // self.heads
        q = self.q(x).reshape(*x.shape[:-1], h, dh)
        k = self.k(ctx).reshape(*ctx.shape[:-1], h, dh)
        v = self.v(ctx).reshape(*ctx.shape[:-1], h, dh)
        a = ag.softmax(ag.einsum("bihd,bjhd->bhij", q, k) * (1.0 / np.sqrt(dh)), axis=-1)
        z = ag.einsum("bhij,bjhd->bihd", a, v)
        return self.o(z.reshape(*z.shape[:-2], self.d))


class Block(Module):
    def __init__(self, d: int, heads: int, rng, cross: bool):
        self.cross = cross
        self.norm1 = LayerNorm(d)
        if cross:
            self.norm_context = LayerNorm(d)
        self.attention = Attention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff_in = Dense(d, 2 * d, rng)
        self.ff_out = Dense(2 * d, d, rng)

    def __call__(self, x, context=None):
        q = self.norm1(x)
        k = q if context is None else self.norm_context(context)
        x = x + self.attention(q, k)
        return x + self.ff_out(ag.relu(self.ff_in(self.norm2(x))))


class EdgeConv(Module):
    def __init__(self, c_in: int, c_out: int, rng):
        self.map = Dense(2 * c_in, c_out, rng)

    def __call__(self, f, nbr):
        fj = gather_tokens(f, nbr)
        fi = ag.expand_dims(f, 2)
        edges = ag.concat([fj - fi, ag.broadcast_to(fi, fj.shape)], axis=-1)
        return ag.max_(ag.relu(self.map(edges)), axis=2)


class ControlModel(Module):
    """Same sampling, patching, attention depth and output layout as CompletionModel, no symmetry."""

    equivariant = False

    def __init__(self, cfg: ModelConfig, width: int | None = None):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        if width is None:
            width = cfg.head_count * max(1, round(1.5 * cfg.channel_width / cfg.head_count))
        if width % cfg.head_count:
            raise ValueError(f"width {width} is not divisible by head count {cfg.head_count}")
        self.width = width
        widths = (3,) + tuple(3 * w for w in cfg.dgcnn_widths)
        self.edges = [EdgeConv(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.widen = Dense(sum(widths[1:]), width, rng)
        self.encoder = [Block(width, cfg.head_count, rng, cross=False) for _ in range(cfg.encoder_depth)]
        self.query_map = Dense(width, cfg.generated_count * width, rng)
        self.anchor_map = Dense(width, 3, rng)
        self.input_lift = Dense(3 + width, width, rng)
        self.decoder = [Block(width, cfg.head_count, rng, cross=True) for _ in range(cfg.decoder_depth)]
        self.head = Dense(width, cfg.upsample_factor * 3, rng)

    def forward(self, points, trace=None):
        cfg = self.config
        pts = ag.as_array(points)
        b = pts.shape[0]
        nbr, _, groups = patch_indices(pts, cfg.patch_settings())
        f = points
        outs = []
        for layer in self.edges:
            f = layer(f, nbr)
            outs.append(f)
        feats = ag.concat(outs, axis=-1)
        tokens = self.widen(ag.max_(gather_tokens(feats, groups), axis=2))
        for block in self.encoder:
            tokens = block(tokens)
        pooled = ag.max_(tokens, axis=1)
        q_g = self.query_map(pooled).reshape(b, cfg.generated_count, self.width)
        anchors_g = self.anchor_map(q_g)
        s = cfg.input_sample_count
        sample_idx = farthest_point_sample(pts, s)
        samples = ag.getitem(points, (np.arange(b)[:, None], sample_idx))
        lifted = self.input_lift(
            ag.concat([samples, ag.broadcast_to(ag.expand_dims(pooled, 1), (b, s, self.width))], axis=-1)
        )
        queries = ag.concat([lifted, q_g], axis=1)
        anchors = ag.concat([samples, anchors_g], axis=1)
        for block in self.decoder:
            queries = block(queries, tokens)
        offsets = self.head(queries).reshape(b, cfg.coarse_count, cfg.upsample_factor, 3)
        dense = (offsets + ag.expand_dims(anchors, 2)).reshape(b, cfg.n_out, 3)
        return anchors, dense

    def complete(self, partial):
        pts = partial.points if isinstance(partial, PointCloud) else np.asarray(partial, dtype=np.float64)
        coarse, dense = self.forward(pts[None])
        return PointCloud(coarse.data[0]), PointCloud(dense.data[0])

    def predict(self, batch, chunk: int = 32):
        cs, ds = [], []
        for i in range(0, len(batch), chunk):
            c, d = self.forward(batch[i : i + chunk])
            cs.append(c.data)
            ds.append(d.data)
        return np.concatenate(cs), np.concatenate(ds)
