import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simeq.geometry import PointCloud, Sim3Transform, TransformDistribution, random_sim3, self_normalize
from simeq.metrics import (
    MetricsReport,
    ProtocolConfig,
    audit_equivariance,
    chamfer_l1,
    evaluate_sample,
    f_score,
    fidelity,
    mmd,
    nearest_neighbors,
    relative_error,
    run_protocol,
)
from simeq.model import CompletionModel, preset
from simeq.training import default_toy_specs, generate_toy_dataset
from simeq.vn import VnLinear

seeds = st.integers(min_value=0, max_value=2**31)


def brute_nn(a, b):
    return np.array([min(np.sqrt(np.sum((p - q) ** 2)) for q in b) for p in a])


def test_f_score_examples():
    gt = np.random.default_rng(0).standard_normal((20, 3))
    assert f_score(gt, gt) == 1.0
    assert f_score(gt, gt + 100.0) == 0.0
    assert f_score(gt[:10], gt) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        f_score(gt, gt, threshold=0.0)


def test_fidelity_examples():
    pts = np.random.default_rng(1).standard_normal((10, 3))
    assert fidelity(pts[:4], pts) == 0.0
    assert fidelity([[0, 0, 0]], [[0, 0, 2]]) == 2.0


def test_mmd_examples():
    rng = np.random.default_rng(2)
    refs = [rng.standard_normal((15, 3)) for _ in range(3)]
    pred = rng.standard_normal((12, 3))
    assert mmd(refs[1], refs) == 0.0
    assert mmd(pred, refs[:1]) == chamfer_l1(pred, refs[0])
    assert mmd(pred, refs) == min(chamfer_l1(pred, r) for r in refs)
    with pytest.raises(ValueError):
        mmd(pred, [])


def test_chamfer_examples():
    assert chamfer_l1([[0, 0, 0]], [[3, 4, 0]]) == 5.0
    a = np.random.default_rng(3).standard_normal((9, 3))
    assert chamfer_l1(a, a) == 0.0
    with pytest.raises(ValueError):
        chamfer_l1(np.zeros((0, 3)), a)


@given(seeds)
@settings(max_examples=25, deadline=None)
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((int(rng.integers(1, 60)), 3)) * 0.05
    b = rng.standard_normal((int(rng.integers(1, 60)), 3)) * 0.05
    dab, dba = brute_nn(a, b), brute_nn(b, a)
    assert abs(chamfer_l1(a, b) - 0.5 * (dab.mean() + dba.mean())) <= 1e-12
    assert abs(fidelity(a, b) - dab.mean()) <= 1e-12
    p, r = np.mean(dab <= 0.01), np.mean(dba <= 0.01)
    assert f_score(a, b) == pytest.approx(0.0 if p + r == 0 else 2 * p * r / (p + r), abs=1e-12)


def test_kdtree_and_brute_agree():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((700, 3)), rng.standard_normal((600, 3))
    d1, i1 = nearest_neighbors(a, b, "kdtree")
    d2, i2 = nearest_neighbors(a, b, "brute")
    np.testing.assert_allclose(d1, d2, atol=1e-12)
    np.testing.assert_array_equal(i1, i2)
    assert chamfer_l1(a, b) == pytest.approx(chamfer_l1(a, b, "brute"), abs=1e-12)


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_permutation_invariance_and_covariance(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((30, 3)), rng.standard_normal((25, 3))
    pa, pb = a[rng.permutation(30)], b[rng.permutation(25)]
    assert chamfer_l1(pa, pb) == pytest.approx(chamfer_l1(a, b), abs=1e-13)
    assert f_score(pa, pb, 0.5) == f_score(a, b, 0.5)
    assert fidelity(pa, pb) == pytest.approx(fidelity(a, b), abs=1e-13)
    g = random_sim3(rng)
    assert chamfer_l1(g.act(a), g.act(b)) == pytest.approx(g.scale * chamfer_l1(a, b), rel=1e-9)
    assert fidelity(g.act(a), g.act(b)) == pytest.approx(g.scale * fidelity(a, b), rel=1e-9)
    # scale the threshold with the transform; the test avoids distances sitting on the boundary
    tau = 0.7
    dists = np.concatenate([brute_nn(a, b), brute_nn(b, a)])
    if np.min(np.abs(dists - tau)) > 1e-6:
        assert f_score(g.act(a), g.act(b), g.scale * tau) == f_score(a, b, tau)


class _Oracle:
    """Returns the ground truth in whatever frame the input arrived in."""

    def __init__(self, partial, gt):
        self.partial, self.gt = partial, gt

    def complete(self, points):
        # recover the similarity from the first four points (non-degenerate by construction)
        src, dst = self.partial[:4], points[:4]
        s = np.linalg.norm(dst[1] - dst[0]) / np.linalg.norm(src[1] - src[0])
        a, b = (src[1:] - src[0]).T, (dst[1:] - dst[0]).T / s
        r = b @ np.linalg.inv(a)
        return None, s * self.gt @ r.T + (dst[0] - s * src[0] @ r.T)


def test_perfect_model_scores_zero():
    rng = np.random.default_rng(5)
    gt = rng.standard_normal((80, 3))
    partial = gt[:40]
    for group in ("identity", "sim3"):
        cfg = ProtocolConfig(test_group=TransformDistribution.preset(group))
        rep = run_protocol(_Oracle(partial, gt), [(partial, gt)], cfg)
        assert rep.cd_l1_x1000 == pytest.approx(0.0, abs=1e-9)
        assert rep.f1_at_1pct == 1.0


def test_identity_protocol_is_plain_evaluation():
    model = CompletionModel(preset("tiny"))
    data = generate_toy_dataset(default_toy_specs(), 3, 0, n_gt=96)
    rep = run_protocol(model, data, ProtocolConfig())
    for (partial, gt), s in zip(data, rep.per_sample):
        norm, back = self_normalize(partial)
        pred = back.act(model.complete(norm.points)[1].points)
        assert s.cd_l1_x1000 == pytest.approx(1000 * chamfer_l1(pred, gt.points), rel=1e-12)


def test_equivariant_model_identity_equals_sim3():
    model = CompletionModel(preset("tiny"))
    data = generate_toy_dataset(default_toy_specs(), 4, 1, n_gt=96)
    ident = run_protocol(model, data, ProtocolConfig(n_in=64))
    sim3 = run_protocol(model, data, ProtocolConfig(test_group=TransformDistribution.preset("sim3"), n_in=64))
    assert abs(ident.cd_l1_x1000 - sim3.cd_l1_x1000) < 1e-5


class _FixedCloud:
    def __init__(self, cloud):
        self.cloud = cloud

    def complete(self, points):
        return None, self.cloud


def test_fixed_cloud_stub_degrades_under_sim3():
    partial, gt = generate_toy_dataset(default_toy_specs()[:1], 1, 2, n_gt=96)[0]
    # the stub memorized the answer in the normalized identity-pose frame
    _, back = self_normalize(partial)
    stub = _FixedCloud(back.inverse().act(gt.points))
    data = [(partial, gt)] * 8
    ident = run_protocol(stub, data, ProtocolConfig())
    sim3 = run_protocol(stub, data, ProtocolConfig(test_group=TransformDistribution.preset("sim3")))
    assert ident.cd_l1_x1000 == pytest.approx(0.0, abs=1e-9)
    assert sim3.cd_l1_x1000 > 10.0


def test_evaluate_sample_returns_canonical_prediction():
    rng = np.random.default_rng(6)
    gt = rng.standard_normal((50, 3))
    g = Sim3Transform(2.0, np.eye(3), [1.0, 0, 0])
    sm, pred = evaluate_sample(_Oracle(gt[:20], gt), gt[:20], gt, g)
    np.testing.assert_allclose(pred, gt, atol=1e-9)
    assert sm.fidelity == pytest.approx(0.0, abs=1e-6)


def test_threads_do_not_change_results():
    model = CompletionModel(preset("tiny"))
    data = generate_toy_dataset(default_toy_specs(), 4, 3, n_gt=64)
    cfg = ProtocolConfig(test_group=TransformDistribution.preset("sim3"))
    a = run_protocol(model, data, cfg, references=[d[1] for d in data])
    b = run_protocol(model, data, cfg, references=[d[1] for d in data], threads=3)
    assert a.to_json() == b.to_json()
    assert a.mmd is not None


def test_report_serialization(tmp_path):
    rep = MetricsReport(1.5, 0.5, per_sample=[])
    rep.write_json(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["cd_l1_x1000"] == 1.5
    model = CompletionModel(preset("tiny"))
    rep = run_protocol(model, generate_toy_dataset(default_toy_specs(), 2, 0, n_gt=64), ProtocolConfig())
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0][0] == "index" and len(rows) == 3


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.ones(3) * 1e-13, np.zeros(3)) == pytest.approx(np.sqrt(3) * 1e-13 / 1e-12)


def test_audit_identity_is_exact():
    model = CompletionModel(preset("tiny", bias_norm=0.3))
    rep = audit_equivariance(model, TransformDistribution.preset("identity"), 3, input_shape=(64, 3))
    assert rep.end_to_end_error == (0.0, 0.0)
    assert all(v == (0.0, 0.0) for v in rep.per_layer_error.values())


def test_audit_layer_callable_and_report(tmp_path):
    layer = VnLinear(4, 3, np.random.default_rng(0))
    dist = TransformDistribution.preset("sim3", scale_range=(0.1, 10.0), translation_range=5.0)
    rep = audit_equivariance(lambda x: layer(x), dist, 50, input_shape=(6, 4, 3))
    assert rep.end_to_end_error[1] < 1e-9 and rep.trials == 50
    rep.write_json(tmp_path / "a.json")
    rep.write_plot_csv(tmp_path / "a.csv")
    assert len(list(csv.reader(open(tmp_path / "a.csv")))) == 51
    with pytest.raises(ValueError):
        audit_equivariance(layer, dist, 0)


def test_bias_sweep_is_monotone():
    model = CompletionModel(preset("tiny", bias_norm=0.5))
    x = [np.random.default_rng(7).standard_normal((64, 3))]
    dist = TransformDistribution.preset("sim3", scale_range=(0.1, 10.0), translation_range=5.0)
    rep = audit_equivariance(model, dist, 10, inputs=x, bias_scales=[1.0, 0.1, 0.01, 0.0])
    errs = [rep.bias_sweep[k] for k in ("1.0", "0.1", "0.01", "0.0")]
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-6 < errs[0]
    # the sweep restores the original biases
    assert rep.end_to_end_error[1] == audit_equivariance(model, dist, 10, inputs=x).end_to_end_error[1]


def test_point_cloud_arguments():
    pc = PointCloud(np.random.default_rng(8).standard_normal((10, 3)))
    assert chamfer_l1(pc, pc) == 0.0 and f_score(pc, pc) == 1.0
