import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simeq.features import (
    DgcnnLayer,
    PatchEmbedding,
    PatchSettings,
    build_knn,
    dgcnn_forward,
    embed_patches,
    farthest_point_sample,
    knn_indices,
    resample,
)
from simeq.geometry import PointCloud, random_sim3
from simeq.metrics import relative_error

seeds = st.integers(min_value=0, max_value=2**31)


def test_collinear_example():
    pc = PointCloud([[0, 0, 0], [1, 0, 0], [3, 0, 0]])
    g = build_knn(pc, 1)
    np.testing.assert_array_equal(g.neighbor_indices[:, 0], [1, 0, 1])
    assert not g.self_padded


def test_knn_matches_brute_force_sort():
    pts = np.random.default_rng(0).standard_normal((64, 3))
    nbr = build_knn(PointCloud(pts), 8).neighbor_indices
    for i in range(64):
        d = [(np.sum((pts[i] - pts[j]) ** 2), j) for j in range(64) if j != i]
        np.testing.assert_array_equal(nbr[i], [j for _, j in sorted(d)[:8]])


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_knn_invariant_under_similarity(seed):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((40, 3))
    g = random_sim3(rng)
    np.testing.assert_array_equal(build_knn(g.act(pts), 6).neighbor_indices, build_knn(pts, 6).neighbor_indices)


def test_knn_excludes_self_and_stays_in_range():
    pts = np.random.default_rng(1).standard_normal((30, 3))
    nbr = build_knn(pts, 5).neighbor_indices
    assert np.all((nbr >= 0) & (nbr < 30))
    assert not np.any(nbr == np.arange(30)[:, None])


def test_knn_small_clouds():
    pts = np.random.default_rng(2).standard_normal((4, 3))
    with pytest.raises(ValueError):
        build_knn(pts, 4)
    g = build_knn(pts, 6, pad=True)
    assert g.self_padded and g.neighbor_indices.shape == (4, 6)
    np.testing.assert_array_equal(g.neighbor_indices[:, 3:], np.repeat(np.arange(4)[:, None], 3, axis=1))
    with pytest.raises(ValueError):
        build_knn(pts[:1], 1, pad=True)


def test_knn_batched_matches_unbatched():
    pts = np.random.default_rng(3).standard_normal((3, 20, 3))
    batched = build_knn(pts, 4).neighbor_indices
    for b in range(3):
        np.testing.assert_array_equal(batched[b], build_knn(pts[b], 4).neighbor_indices)


def test_fps_properties():
    pts = np.random.default_rng(4).standard_normal((50, 3))
    idx = farthest_point_sample(pts, 10)
    assert idx[0] == 0 and len(set(idx.tolist())) == 10
    np.testing.assert_array_equal(idx, farthest_point_sample(pts, 10))
    # the second pick is the point farthest from the start
    assert idx[1] == np.argmax(np.linalg.norm(pts - pts[0], axis=1))
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 51)


def test_resample_counts():
    pts = np.random.default_rng(5).standard_normal((10, 3))
    assert resample(pts, 6).shape == (6, 3)
    up = resample(pts, 25)
    assert up.shape == (25, 3)
    assert {tuple(p) for p in up} == {tuple(p) for p in pts}


def test_dgcnn_hand_formula_one_channel():
    rng = np.random.default_rng(6)
    layer = DgcnnLayer(1, 1, rng, leaky_alpha=0.2)
    layer.edge_linear.weight.data = np.array([[0.7, 0.1]])  # projects to [0.8, 0.2]
    vs = np.array([[[1.0, 2.0, 0.0]], [[-1.0, 0.5, 3.0]]])  # two tokens, one channel
    graph = build_knn(PointCloud(vs[:, 0]), 1)
    out = dgcnn_forward(layer, vs, graph).data
    mean = vs.mean(axis=0)
    for i, j in enumerate(graph.neighbor_indices[:, 0]):
        # one input channel: every VN-Linear inside the activation and pooling projects to [[1]],
        # so F = B = O, the gate keeps F and the activation is the identity
        expected = 0.8 * (vs[j] + mean - vs[i]) + 0.2 * vs[i]
        np.testing.assert_allclose(out[i], expected, atol=1e-14)


def test_dgcnn_fast_path_matches_materialized_edges():
    rng = np.random.default_rng(7)
    for bias in (0.0, 0.3):
        layer = DgcnnLayer(3, 5, rng, 0.2, bias)
        v = rng.standard_normal((2, 15, 3, 3))
        nbr = rng.integers(0, 15, (2, 15, 4))
        np.testing.assert_allclose(layer(v, nbr).data, layer.reference(v, nbr).data, atol=1e-12)


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_dgcnn_equivariance(seed):
    rng = np.random.default_rng(seed)
    layer = DgcnnLayer(3, 4, rng)
    vs = rng.standard_normal((16, 3, 3))
    graph = build_knn(vs.mean(axis=1), 5)
    g = random_sim3(rng)
    out = dgcnn_forward(layer, vs, graph).data
    assert relative_error(dgcnn_forward(layer, g.act(vs), graph).data, g.act(out)) < 1e-8


def test_dgcnn_identical_tokens_ignore_graph():
    rng = np.random.default_rng(8)
    layer = DgcnnLayer(2, 3, rng)
    vs = np.repeat(rng.standard_normal((1, 2, 3)), 10, axis=0)
    a = dgcnn_forward(layer, vs, build_knn(rng.standard_normal((10, 3)), 3)).data
    b = dgcnn_forward(layer, vs, build_knn(rng.standard_normal((10, 3)), 3)).data
    np.testing.assert_array_equal(a, b)


def test_dgcnn_rejects_mismatched_graph():
    layer = DgcnnLayer(1, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        layer(np.zeros((1, 5, 1, 3)), np.zeros((1, 4, 2), dtype=int))


def _embedding(seed=0):
    return PatchEmbedding(PatchSettings(4, 8, 6, (4, 8), 16), np.random.default_rng(seed))


def test_embed_patches_shape():
    pts = np.random.default_rng(9).standard_normal((32, 3))
    assert embed_patches(PointCloud(pts), _embedding()).shape == (4, 16, 3)


@given(seeds)
@settings(max_examples=15, deadline=None)
def test_embed_patches_equivariance(seed):
    rng = np.random.default_rng(seed)
    emb = _embedding(seed)
    pts = rng.standard_normal((32, 3))
    g = random_sim3(rng)
    assert relative_error(embed_patches(g.act(pts), emb).data, g.act(embed_patches(pts, emb).data)) < 1e-7


def test_embed_patches_deterministic_and_validates_size():
    pts = np.random.default_rng(10).standard_normal((32, 3))
    emb = _embedding()
    np.testing.assert_array_equal(embed_patches(pts, emb).data, embed_patches(pts, emb).data)
    with pytest.raises(ValueError):
        embed_patches(pts[:3], emb)


def test_knn_indices_ties_by_index():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    np.testing.assert_array_equal(knn_indices(pts[:1], pts, 4, exclude_self=False)[0], [0, 1, 2, 3])
