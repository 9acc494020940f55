"""Completion metrics, the de-biased evaluation protocol and the equivariance audit."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .features import resample
from .geometry import PointCloud, Sim3Transform, TransformDistribution, sample_transform, self_normalize

KDTREE_THRESHOLD = 512
FSCORE_THRESHOLD = 0.01
REL_FLOOR = 1e-12


def _pts(x) -> np.ndarray:
    arr = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or len(arr) == 0:
        raise ValueError(f"expected a non-empty (N, 3) point set, got shape {arr.shape}")
    return arr


def nearest_neighbors(query: np.ndarray, ref: np.ndarray, method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    """(distance, index) of the nearest ``ref`` point for every ``query`` point.

    Brute force picks the lowest index among equidistant neighbors. ``auto`` switches
    to a KD-tree once either set exceeds 512 points.
    """
    if method == "auto":
        method = "kdtree" if max(len(query), len(ref)) > KDTREE_THRESHOLD else "brute"
    if method == "kdtree":
        dist, idx = cKDTree(ref).query(query, k=1)
        return np.asarray(dist, dtype=np.float64), np.asarray(idx, dtype=np.int64)
    diff = query[:, None, :] - ref[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    idx = np.argmin(d2, axis=1)
    return np.sqrt(d2[np.arange(len(query)), idx]), idx


def chamfer_l1(a, b, method: str = "auto") -> float:
    """Mean of the two directed mean nearest-neighbor Euclidean distances (unscaled)."""
    a, b = _pts(a), _pts(b)
    dab, _ = nearest_neighbors(a, b, method)
    dba, _ = nearest_neighbors(b, a, method)
    return 0.5 * (float(dab.mean()) + float(dba.mean()))


def f_score(pred, gt, threshold: float = FSCORE_THRESHOLD) -> float:
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    pred, gt = _pts(pred), _pts(gt)
    precision = float(np.mean(nearest_neighbors(pred, gt)[0] <= threshold))
    recall = float(np.mean(nearest_neighbors(gt, pred)[0] <= threshold))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def fidelity(input_partial, pred) -> float:
    """Mean distance from each observed point to its nearest predicted point."""
    return float(nearest_neighbors(_pts(input_partial), _pts(pred))[0].mean())


def mmd(pred, reference_set) -> float:
    refs = list(reference_set)
    if not refs:
        raise ValueError("reference set is empty")
    return min(chamfer_l1(pred, r) for r in refs)


@dataclass
class SampleMetrics:
    cd_l1_x1000: float
    f1_at_1pct: float
    fidelity: float | None = None
    mmd: float | None = None


@dataclass
class MetricsReport:
    cd_l1_x1000: float
    f1_at_1pct: float
    fidelity: float | None = None
    mmd: float | None = None
    per_sample: list[SampleMetrics] = field(default_factory=list)
    test_group: str = ""

    def to_json(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "cd_l1_x1000", "f1_at_1pct", "fidelity", "mmd"])
            for i, s in enumerate(self.per_sample):
                w.writerow([i, s.cd_l1_x1000, s.f1_at_1pct, s.fidelity, s.mmd])


@dataclass(frozen=True)
class ProtocolConfig:
    test_group: TransformDistribution = field(default_factory=lambda: TransformDistribution.preset("identity"))
    train_group: TransformDistribution = field(default_factory=lambda: TransformDistribution.preset("identity"))
    n_in: int | None = None
    threshold: float = FSCORE_THRESHOLD
    eval_frame: str = "canonical-unit-scale"


def _complete_dense(model, points: np.ndarray) -> np.ndarray:
    out = model.complete(points)
    dense = out[1] if isinstance(out, tuple) else out
    return _pts(dense)


def evaluate_sample(model, partial, gt, g: Sim3Transform, n_in: int | None = None, threshold=FSCORE_THRESHOLD, references=None):
    """Transform, self-normalize the input, predict, map back to the canonical frame, score.

    Returns (SampleMetrics, prediction in the canonical frame).
    """
    partial, gt = _pts(partial), _pts(gt)
    sensor_in = g.act(partial)
    if n_in is not None:
        sensor_in = resample(sensor_in, n_in)
    normalized, back = self_normalize(PointCloud(sensor_in))
    pred_norm = _complete_dense(model, normalized.points)
    pred_canonical = g.inverse().act(back.act(pred_norm))
    sm = SampleMetrics(
        cd_l1_x1000=1000.0 * chamfer_l1(pred_canonical, gt),
        f1_at_1pct=f_score(pred_canonical, gt, threshold),
        fidelity=1000.0 * fidelity(partial, pred_canonical),
        mmd=None if references is None else 1000.0 * mmd(pred_canonical, references),
    )
    return sm, pred_canonical


def run_protocol(model, dataset, cfg: ProtocolConfig, references=None, threads: int = 1, group_name: str = "") -> MetricsReport:
    """De-biased evaluation: normalization statistics come from the transformed partial only."""
    pairs = list(dataset)

    def one(i):
        partial, gt = pairs[i]
        g = sample_transform(cfg.test_group, i)
        return evaluate_sample(model, partial, gt, g, cfg.n_in, cfg.threshold, references)[0]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_sample = list(pool.map(one, range(len(pairs))))
    else:
        per_sample = [one(i) for i in range(len(pairs))]

    def avg(key):
        vals = [getattr(s, key) for s in per_sample]
        return None if any(v is None for v in vals) else float(np.mean(vals))

    return MetricsReport(
        cd_l1_x1000=avg("cd_l1_x1000"),
        f1_at_1pct=avg("f1_at_1pct"),
        fidelity=avg("fidelity"),
        mmd=avg("mmd"),
        per_sample=per_sample,
        test_group=group_name,
    )


# --- equivariance audit ---------------------------------------------------------------


def relative_error(actual: np.ndarray, expected: np.ndarray, floor: float = REL_FLOOR) -> float:
    return float(np.linalg.norm(actual - expected) / max(np.linalg.norm(expected), floor))


@dataclass
class EquivarianceAuditReport:
    per_layer_error: dict[str, tuple[float, float]]
    end_to_end_error: tuple[float, float]
    bias_sweep: dict[str, float]
    trials: int
    seed: int
    magnitudes: list[tuple[float, float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "per_layer_error": {k: {"mean": v[0], "max": v[1]} for k, v in self.per_layer_error.items()},
            "end_to_end_error": {"mean": self.end_to_end_error[0], "max": self.end_to_end_error[1]},
            "bias_sweep": self.bias_sweep,
            "trials": self.trials,
            "seed": self.seed,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def write_plot_csv(self, path) -> None:
        """Rows of (scale, rotation angle in degrees, end-to-end relative error)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scale", "rotation_deg", "relative_error"])
            w.writerows(self.magnitudes)


def _rotation_angle_deg(r: np.ndarray) -> float:
    return math.degrees(math.acos(float(np.clip((np.trace(r) - 1) / 2, -1.0, 1.0))))


def _trace_outputs(subject, x: np.ndarray) -> tuple[dict, np.ndarray]:
    """Named equivariant intermediates plus the final output for one input."""
    if hasattr(subject, "forward") and getattr(subject, "equivariant", False) and hasattr(subject, "config"):
        trace: dict = {}
        subject.forward(x[None], trace=trace)
        named = {k: v[0] for k, v in trace.items()}
        return named, named["dense"]
    out = subject(x)
    out = out.data if hasattr(out, "data") else np.asarray(out)
    return {}, out


def audit_equivariance(subject, dist: TransformDistribution, trials: int, inputs=None, input_shape=(256, 3),
                       bias_scales=None) -> EquivarianceAuditReport:
    """Measure ||f(g.x) - g.f(x)|| / max(||g.f(x)||, 1e-12) over sampled transforms.

    ``subject`` is a completion model (per-layer errors come from its trace) or any
    callable on arrays whose last axis holds 3-vectors. ``inputs`` is a list of
    arrays cycled over trials; random Gaussian inputs are used when omitted.
    ``bias_scales`` runs the whole audit again with all VN-Linear biases rescaled.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    from .vn import set_bias_scale

    def run(collect_magnitudes):
        rng = np.random.default_rng([dist.seed, 7919])
        per_layer: dict[str, list[float]] = {}
        end: list[float] = []
        mags = []
        cache = {}
        for i in range(trials):
            if inputs is not None:
                key = i % len(inputs)
                x = np.asarray(inputs[key], dtype=np.float64)
                if key not in cache:
                    cache[key] = _trace_outputs(subject, x)
                named, out = cache[key]
            else:
                x = rng.standard_normal(input_shape)
                named, out = _trace_outputs(subject, x)
            g = sample_transform(dist, i)
            named_g, out_g = _trace_outputs(subject, g.act(x))
            for name, val in named.items():
                per_layer.setdefault(name, []).append(relative_error(named_g[name], g.act(val)))
            err = relative_error(out_g, g.act(out))
            end.append(err)
            if collect_magnitudes:
                mags.append((g.scale, _rotation_angle_deg(g.rotation), err))
        stats = {k: (float(np.mean(v)), float(np.max(v))) for k, v in per_layer.items()}
        return stats, (float(np.mean(end)), float(np.max(end))), mags

    per_layer, end, mags = run(True)
    sweep = {}
    if bias_scales and hasattr(subject, "modules"):
        for scale in bias_scales:
            set_bias_scale(subject, scale)
            try:
                sweep[repr(float(scale))] = run(False)[1][1]
            finally:
                set_bias_scale(subject, 1.0)
    return EquivarianceAuditReport(per_layer, end, sweep, trials, dist.seed, mags)
