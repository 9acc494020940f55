"""The SIM(3)-equivariant completion network: patch embedding, encoder, query generator, decoder, head."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Module
from .features import PatchEmbedding, PatchSettings, farthest_point_sample
from .geometry import PointCloud
from .transformer import Sim3Block
from .vn import VnLinear, VnMax


@dataclass(frozen=True)
class ModelConfig:
    n_in: int = 256
    n_out: int = 1024
    patch_count: int = 32
    channel_width: int = 32
    encoder_depth: int = 3
    decoder_depth: int = 2
    head_count: int = 4
    knn_k: int = 16
    coarse_count: int = 64
    input_sample_count: int = 24
    patch_k: int = 16
    dgcnn_widths: tuple[int, ...] = (16, 32)
    leaky_alpha: float = 0.2
    bias_norm: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dgcnn_widths", tuple(int(w) for w in self.dgcnn_widths))
        if self.n_out % self.coarse_count:
            raise ValueError(f"n_out={self.n_out} must be a multiple of coarse_count={self.coarse_count}")
        if self.channel_width % self.head_count:
            raise ValueError("channel_width must be divisible by head_count")
        if not 0 <= self.input_sample_count < self.coarse_count:
            raise ValueError("input_sample_count must be below coarse_count")
        if self.input_sample_count > self.n_in or self.patch_count > self.n_in:
            raise ValueError("n_in is too small for the configured sampling")

    @property
    def upsample_factor(self) -> int:
        return self.n_out // self.coarse_count

    @property
    def generated_count(self) -> int:
        return self.coarse_count - self.input_sample_count

    @property
    def min_points(self) -> int:
        return max(self.patch_count, self.input_sample_count, 2)

    def patch_settings(self) -> PatchSettings:
        return PatchSettings(self.patch_count, self.patch_k, self.knn_k, self.dgcnn_widths, self.channel_width)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["dgcnn_widths"] = list(self.dgcnn_widths)
        return d

    @classmethod
    def from_json(cls, record: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in record.items() if k in known})

    def digest_text(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


PRESETS = {
    "desk": ModelConfig(),
    "full": ModelConfig(
        n_in=2048,
        n_out=16384,
        patch_count=128,
        channel_width=64,
        encoder_depth=6,
        decoder_depth=8,
        head_count=4,
        coarse_count=512,
        input_sample_count=256,
        dgcnn_widths=(32, 64),
    ),
    "tiny": ModelConfig(
        n_in=64,
        n_out=128,
        patch_count=8,
        channel_width=8,
        encoder_depth=1,
        decoder_depth=1,
        head_count=2,
        knn_k=6,
        coarse_count=16,
        input_sample_count=6,
        patch_k=8,
        dgcnn_widths=(4, 8),
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides)


class QueryGenerator(Module):
    """Q = [Q_I, Q_G]: lifted input samples followed by tokens decoded from the pooled encoder output."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.channel_width
        self.d = d
        self.input_sample_count = cfg.input_sample_count
        self.generated_count = cfg.generated_count
        self.global_pool = VnMax(d, rng, cfg.bias_norm)
        self.query_map = VnLinear(d, cfg.generated_count * d, rng, cfg.bias_norm)
        # input samples are lifted to width d together with the pooled feature
        self.input_lift = VnLinear(1 + d, d, rng, cfg.bias_norm)

    def __call__(self, encoder_out, samples):
        """encoder_out (B, M, D, 3), samples (B, S, 3) -> (tokens (B, S+G, D, 3), anchors (B, S+G, 3))."""
        pooled = self.global_pool(encoder_out, axis=-3)  # (B, D, 3)
        q_g = self.query_map(pooled)
        q_g = q_g.reshape(q_g.shape[0], self.generated_count, self.d, 3)
        parts, anchors = [], []
        if self.input_sample_count:
            s = ag.as_array(samples).shape[1]
            lifted_in = ag.concat(
                [ag.expand_dims(samples, 2), ag.broadcast_to(ag.expand_dims(pooled, 1), (pooled.shape[0], s, self.d, 3))],
                axis=-2,
            )
            parts.append(self.input_lift(lifted_in))
            anchors.append(samples)
        parts.append(q_g)
        anchors.append(q_g[:, :, 0, :])
        tokens = ag.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        anchor = ag.concat(anchors, axis=1) if len(anchors) > 1 else anchors[0]
        return tokens, anchor


class ReconstructionHead(Module):
    """Dense points = VN-Linear(V - mean_channels(V)) + query anchor."""

    def __init__(self, d: int, upsample: int, rng: np.random.Generator, bias_norm: float = 0.0):
        self.upsample = upsample
        self.expand_map = VnLinear(d, upsample, rng, bias_norm)

    def __call__(self, decoder_out, anchors):
        dec = ag.as_array(decoder_out)
        if dec.shape[:-2] != ag.as_array(anchors).shape[:-1]:
            raise ValueError(f"decoder tokens {dec.shape[:-2]} and anchors {ag.as_array(anchors).shape[:-1]} do not align")
        centered = decoder_out - ag.mean(decoder_out, axis=-2, keepdims=True)
        pts = self.expand_map(centered) + ag.expand_dims(anchors, -2)
        return pts.reshape(*pts.shape[:-3], pts.shape[-3] * self.upsample, 3)


def generate_queries(gen: QueryGenerator, encoder_out, partial):
    """Unbatched: encoder tokens (M, D, 3) and the partial cloud -> query tokens (Q, D, 3)."""
    pts = partial.points if isinstance(partial, PointCloud) else np.asarray(partial, dtype=np.float64)
    if len(pts) < gen.input_sample_count:
        raise ValueError(f"partial has {len(pts)} points, fewer than {gen.input_sample_count} query samples")
    samples = pts[farthest_point_sample(pts, gen.input_sample_count)] if gen.input_sample_count else pts[:0]
    tokens, _ = gen(ag.expand_dims(encoder_out, 0), samples[None])
    return ag.squeeze(tokens, 0)


def reconstruct(head: ReconstructionHead, decoder_out, queries) -> PointCloud:
    """Unbatched: ``queries`` are the 3-vector anchors (Q, 3) or query tokens (Q, D, 3) whose channel 0 is the anchor."""
    q = ag.as_array(queries)
    anchors = q[:, 0, :] if q.ndim == 3 else q
    dec = ag.as_array(decoder_out)
    if dec.shape[0] != anchors.shape[0]:
        raise ValueError(f"{dec.shape[0]} decoder tokens for {anchors.shape[0]} queries")
    return PointCloud(head(dec, anchors).data)


class CompletionModel(Module):
    """Partial cloud -> (coarse anchors, dense completion), equivariant to similarity transforms."""

    equivariant = True

    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        b = cfg.bias_norm
        d = cfg.channel_width
        self.embedding = PatchEmbedding(cfg.patch_settings(), rng, cfg.leaky_alpha, b)
        self.encoder = [Sim3Block(d, cfg.head_count, rng, "self-attention", cfg.leaky_alpha, b) for _ in range(cfg.encoder_depth)]
        self.query_generator = QueryGenerator(cfg, rng)
        self.decoder = [Sim3Block(d, cfg.head_count, rng, "cross-attention", cfg.leaky_alpha, b) for _ in range(cfg.decoder_depth)]
        self.head = ReconstructionHead(d, cfg.upsample_factor, rng, b)

    def forward(self, points, trace: dict | None = None):
        """Batched points (B, N, 3) -> (coarse (B, Q, 3), dense (B, n_out, 3)) tensors."""
        pts = ag.as_array(points)
        if pts.ndim != 3 or pts.shape[-1] != 3:
            raise ValueError(f"expected (B, N, 3) points, got {pts.shape}")
        if pts.shape[1] < self.config.min_points:
            raise ValueError(f"need at least {self.config.min_points} input points, got {pts.shape[1]}")
        nbr, _, groups = self.embedding.indices(pts)
        tokens = self.embedding(points, nbr, groups)
        if trace is not None:
            trace["embedding"] = tokens.data
        for i, block in enumerate(self.encoder):
            tokens = block(tokens)
            if trace is not None:
                trace[f"encoder.{i}"] = tokens.data
        s = self.config.input_sample_count
        sample_idx = farthest_point_sample(pts, s) if s else np.zeros((pts.shape[0], 0), dtype=np.int64)
        samples = ag.getitem(points, (np.arange(pts.shape[0])[:, None], sample_idx))
        queries, anchors = self.query_generator(tokens, samples)
        if trace is not None:
            trace["queries"] = queries.data
        for i, block in enumerate(self.decoder):
            queries = block(queries, tokens)
            if trace is not None:
                trace[f"decoder.{i}"] = queries.data
        dense = self.head(queries, anchors)
        if trace is not None:
            trace["coarse"] = anchors.data
            trace["dense"] = dense.data
        return anchors, dense

    def complete(self, partial):
        """One cloud in, (coarse, dense) PointClouds out, in the input's frame."""
        pts = partial.points if isinstance(partial, PointCloud) else np.asarray(partial, dtype=np.float64)
        label = partial.frame_label if isinstance(partial, PointCloud) else ""
        coarse, dense = self.forward(pts[None])
        return PointCloud(coarse.data[0], label), PointCloud(dense.data[0], label)

    def predict(self, batch: np.ndarray, chunk: int = 32) -> tuple[np.ndarray, np.ndarray]:
        coarse, dense = [], []
        for i in range(0, len(batch), chunk):
            c, d = self.forward(batch[i : i + chunk])
            coarse.append(c.data)
            dense.append(d.data)
        return np.concatenate(coarse), np.concatenate(dense)


def complete(model, partial):
    return model.complete(partial)
