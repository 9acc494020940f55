"""k-NN graphs, farthest-point sampling and the VN-DGCNN patch embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Module
from .geometry import PointCloud
from .vn import VnLinear, VnMax, VnNonlinear


@dataclass(frozen=True)
class KnnGraph:
    neighbor_indices: np.ndarray  # (M, k) or (B, M, k)
    k: int
    self_padded: bool = False


def _points(pc) -> np.ndarray:
    return pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...ijk,...ijk->...ij", diff, diff)


def knn_indices(query: np.ndarray, points: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    """Indices of the k nearest ``points`` per query row, ascending distance, ties by index."""
    d2 = pairwise_sq_dists(query, points)
    if exclude_self:
        n = d2.shape[-1]
        d2 = d2 + np.where(np.eye(n, dtype=bool), np.inf, 0.0)
    order = np.argsort(d2, axis=-1, kind="stable")
    return order[..., :k]


def build_knn(pc, k: int, pad: bool = False) -> KnnGraph:
    """Neighbors of every point excluding itself; works on (N, 3) or batched (B, N, 3)."""
    pts = _points(pc)
    n = pts.shape[-2]
    if k < 1:
        raise ValueError("k must be at least 1")
    if n < 2:
        raise ValueError("k-NN graph needs at least two points")
    if k >= n:
        if not pad:
            raise ValueError(f"k={k} needs more than {k} points, cloud has {n}")
        idx = knn_indices(pts, pts, n - 1, exclude_self=True)
        fill = np.broadcast_to(np.arange(n)[:, None], idx.shape[:-1] + (k - (n - 1),))
        return KnnGraph(np.concatenate([idx, fill], axis=-1), k, True)
    return KnnGraph(knn_indices(pts, pts, k, exclude_self=True), k, False)


def farthest_point_sample(points, count: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point order starting at ``start``; batched over leading axes."""
    pts = _points(points)
    n = pts.shape[-2]
    if count > n:
        raise ValueError(f"cannot sample {count} points from {n}")
    lead = pts.shape[:-2]
    flat = pts.reshape(-1, n, 3)
    b = flat.shape[0]
    rows = np.arange(b)
    chosen = np.empty((b, count), dtype=np.int64)
    chosen[:, 0] = start
    d2 = np.full((b, n), np.inf)
    last = flat[rows, start]
    for i in range(1, count):
        diff = flat - last[:, None, :]
        d2 = np.minimum(d2, np.einsum("bij,bij->bi", diff, diff))
        nxt = np.argmax(d2, axis=1)
        chosen[:, i] = nxt
        last = flat[rows, nxt]
    return chosen.reshape(*lead, count)


def resample(points, count: int) -> np.ndarray:
    """Exactly ``count`` points: farthest-point subset, or cyclic repetition if too few.

    Both branches pick indices from distance ratios only, so they commute with
    similarity transforms.
    """
    pts = _points(points)
    n = pts.shape[0]
    if n >= count:
        return pts[farthest_point_sample(pts, count)]
    order = farthest_point_sample(pts, n)
    return pts[np.resize(order, count)]


def gather_tokens(v, idx: np.ndarray):
    """v: (B, N, ...), idx: (B, ...) integer -> v[b, idx[b, ...], ...]."""
    b = idx.shape[0]
    bidx = np.arange(b).reshape((b,) + (1,) * (idx.ndim - 1))
    return ag.getitem(v, (bidx, idx))


class DgcnnLayer(Module):
    """Edge convolution: pool over neighbors of VNLA((V_j + mean(V) - V_i) ++ V_i)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, leaky_alpha: float = 0.2, bias_norm: float = 0.0):
        self.c_in = c_in
        self.c_out = c_out
        self.edge_linear = VnLinear(2 * c_in, c_out, rng, bias_norm)
        self.edge_act = VnNonlinear(c_out, rng, leaky_alpha, bias_norm)
        self.pool = VnMax(c_out, rng, bias_norm)

    def edge_features(self, v, nbr: np.ndarray):
        """(B, N, C, 3) features and (B, N, k) neighbors -> (B, N, k, 2C, 3)."""
        mean = ag.mean(v, axis=1, keepdims=True)
        vj = gather_tokens(v, nbr)
        vi = ag.expand_dims(v, 2)
        diff = vj + ag.expand_dims(mean, 2) - vi
        return ag.concat([diff, ag.broadcast_to(vi, diff.shape)], axis=-2)

    def reference(self, v, nbr: np.ndarray):
        """Direct evaluation on materialized edge features (slow; kept for checking)."""
        edges = self.edge_act(self.edge_linear(self.edge_features(v, nbr)))
        return self.pool(edges, axis=2)

    def __call__(self, v, nbr: np.ndarray):
        if ag.as_array(v).shape[1] != nbr.shape[1]:
            raise ValueError("graph and feature token counts differ")
        # All maps before the gate are linear, so W [v_j + mean - v_i ; v_i] splits into
        # per-point terms W1 v_j + ((W2 - W1) v_i + W1 mean); only the gather is per edge.
        c = self.c_in
        w = self.edge_linear.effective_weight()
        w1 = ag.getitem(w, (slice(None), slice(0, c)))
        w2 = ag.getitem(w, (slice(None), slice(c, 2 * c)))
        mean = ag.mean(v, axis=1, keepdims=True)
        per_nbr = ag.channel_mix(w1, v)
        per_center = ag.channel_mix(w2 - w1, v) + ag.channel_mix(w1, mean)
        bias = self.edge_linear.bias_term()
        if bias is not None:
            per_center = per_center + bias
        act = self.edge_act
        stacked = act.stacked_weight()
        fbo_nbr = ag.channel_mix(stacked, per_nbr)
        fbo_center = ag.channel_mix(stacked, per_center)
        act_bias = act.stacked_bias()
        if act_bias is not None:
            fbo_center = fbo_center + act_bias
        z = gather_tokens(per_nbr, nbr) + ag.expand_dims(per_center, 2)
        fbo = gather_tokens(fbo_nbr, nbr) + ag.expand_dims(fbo_center, 2)
        edges = act.blend(z, act.gate(fbo))
        return self.pool(edges, axis=2)


def dgcnn_forward(layer: DgcnnLayer, vs, graph: KnnGraph):
    """Unbatched convenience wrapper: vs (M, D, 3), graph over the same M tokens."""
    nbr = graph.neighbor_indices
    return ag.squeeze(layer(ag.expand_dims(vs, 0), nbr[None]), 0)


@dataclass(frozen=True)
class PatchSettings:
    patch_count: int = 32
    patch_k: int = 16
    knn_k: int = 16
    dgcnn_widths: tuple[int, ...] = (16, 32)
    channel_width: int = 32


def patch_indices(points: np.ndarray, s: PatchSettings):
    """Point graph (B, N, knn_k), patch centers (B, P) and patch groups (B, P, patch_k) for (B, N, 3) points."""
    n = points.shape[1]
    if n < s.patch_count:
        raise ValueError(f"need at least {s.patch_count} points for {s.patch_count} patches, got {n}")
    nbr = build_knn(points, s.knn_k, pad=True).neighbor_indices
    centers = farthest_point_sample(points, s.patch_count)
    center_pts = np.take_along_axis(points, centers[..., None], axis=1)
    groups = knn_indices(center_pts, points, min(s.patch_k, n))
    return nbr, centers, groups


class PatchEmbedding(Module):
    """Points -> one vector-feature token per farthest-point patch."""

    def __init__(self, settings: PatchSettings, rng: np.random.Generator, leaky_alpha: float = 0.2, bias_norm: float = 0.0):
        self.settings = settings
        widths = (1,) + tuple(settings.dgcnn_widths)
        self.layers = [DgcnnLayer(a, b, rng, leaky_alpha, bias_norm) for a, b in zip(widths[:-1], widths[1:])]
        total = sum(settings.dgcnn_widths)
        self.group_pool = VnMax(total, rng, bias_norm)
        self.widen = VnLinear(total, settings.channel_width, rng, bias_norm)

    def indices(self, points: np.ndarray):
        return patch_indices(points, self.settings)

    def __call__(self, points, nbr=None, groups=None):
        pts = ag.as_array(points)
        if nbr is None or groups is None:
            nbr, _, groups = self.indices(pts)
        v = ag.expand_dims(points, 2)
        outs = []
        for layer in self.layers:
            v = layer(v, nbr)
            outs.append(v)
        feats = ag.concat(outs, axis=-2) if len(outs) > 1 else outs[0]
        grouped = gather_tokens(feats, groups)
        return self.widen(self.group_pool(grouped, axis=2))


def embed_patches(pc, embedding: PatchEmbedding):
    """Single cloud -> (patch_count, channel_width, 3) tokens."""
    pts = _points(pc)[None]
    return ag.squeeze(embedding(pts), 0)
