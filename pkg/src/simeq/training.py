"""Chamfer loss, Adam with decoupled weight decay, toy data and the training loop."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tape
from .features import farthest_point_sample, resample
from .geometry import PointCloud, TransformDistribution, read_xyz, sample_transform, self_normalize, write_xyz
from .metrics import chamfer_l1, nearest_neighbors
from .serialization import atomic_write_json, load_arrays, save_arrays


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss


# --- loss -----------------------------------------------------------------------------


def chamfer_l1_tensor(a, b, method: str = "auto"):
    """Differentiable Chamfer-L1 for single clouds (N, 3) or batches (B, N, 3); batch mean.

    Nearest-neighbor assignments are taken from the current values and held fixed.
    """
    a_arr, b_arr = ag.as_array(a), ag.as_array(b)
    batched = a_arr.ndim == 3
    if not batched:
        a, b = ag.expand_dims(a, 0), ag.expand_dims(b, 0)
        a_arr, b_arr = a_arr[None], b_arr[None]
    idx_ab = np.stack([nearest_neighbors(x, y, method)[1] for x, y in zip(a_arr, b_arr)])
    idx_ba = np.stack([nearest_neighbors(y, x, method)[1] for x, y in zip(a_arr, b_arr)])
    rows = np.arange(len(a_arr))[:, None]
    d_ab = ag.vnorm(a - ag.getitem(b, (rows, idx_ab)), axis=-1)
    d_ba = ag.vnorm(b - ag.getitem(a, (rows, idx_ba)), axis=-1)
    per_sample = 0.5 * (ag.mean(d_ab, axis=-1) + ag.mean(d_ba, axis=-1))
    return ag.mean(per_sample)


def completion_loss(coarse, dense, gt, coarse_target=None):
    """Chamfer(coarse, FPS(gt)) + Chamfer(dense, gt)."""
    gt_arr = ag.as_array(gt)
    if coarse_target is None:
        n = ag.as_array(coarse).shape[-2]
        idx = farthest_point_sample(gt_arr, n)
        coarse_target = np.take_along_axis(gt_arr, idx[..., None], axis=-2)
    return chamfer_l1_tensor(coarse, coarse_target) + chamfer_l1_tensor(dense, gt)


def loss(coarse, dense, gt) -> float:
    """Scalar two-term loss on PointClouds or arrays."""
    c = coarse.points if isinstance(coarse, PointCloud) else coarse
    d = dense.points if isinstance(dense, PointCloud) else dense
    g = gt.points if isinstance(gt, PointCloud) else gt
    return float(completion_loss(c, d, g).data)


# --- optimizer ------------------------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``."""

    def __init__(self, params, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = p.data - lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, state: dict) -> None:
        self.t = int(state["t"][0])
        self.m = [np.array(state[f"m.{i}"]) for i in range(len(self.params))]
        self.v = [np.array(state[f"v.{i}"]) for i in range(len(self.params))]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.9
    lr_decay_every: int = 15
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr_decay_every, batch_size must be positive and epochs non-negative")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


# --- toy shapes -----------------------------------------------------------------------

FAMILIES = ("sphere-cap", "box", "cylinder", "two-box composite")


@dataclass(frozen=True)
class ToyShapeSpec:
    """A shape family with dimensions; any dimension or the keep fraction may be a [lo, hi] range.

    ``view`` is ``"random"`` (uniform direction per sample) or a 3-vector whose
    components may themselves be [lo, hi] ranges, e.g. a cone of sensor positions.
    """

    family: str
    params: dict = field(default_factory=dict)
    view: object = "random"
    keep_fraction: object = 0.6

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        lo, hi = _as_range(self.keep_fraction)
        if not (0 < lo <= hi <= 1):
            raise ValueError("keep_fraction must lie in (0, 1]")

    @classmethod
    def from_json(cls, record: dict) -> "ToyShapeSpec":
        return cls(record["family"], dict(record.get("params", {})), record.get("view", "random"),
                   record.get("keep_fraction", 0.6))

    def to_json(self) -> dict:
        return {"family": self.family, "params": self.params, "view": self.view, "keep_fraction": self.keep_fraction}


def _as_range(v):
    if isinstance(v, (list, tuple)):
        return float(v[0]), float(v[1])
    return float(v), float(v)


def _draw(v, rng):
    lo, hi = _as_range(v)
    return lo if lo == hi else float(rng.uniform(lo, hi))


DEFAULT_PARAMS = {
    "sphere-cap": {"radius": 0.8, "cap_angle_deg": 120.0},
    "box": {"size": [1.2, 0.8, 0.5]},
    "cylinder": {"radius": 0.4, "height": 1.2},
    "two-box composite": {"size_a": [1.0, 0.4, 0.4], "size_b": [0.4, 0.4, 0.8], "offset": [0.3, 0.0, 0.4]},
}


def default_toy_specs() -> list[ToyShapeSpec]:
    return [
        ToyShapeSpec("sphere-cap", {"radius": [0.6, 0.9], "cap_angle_deg": [90.0, 150.0]}, "random", [0.4, 0.7]),
        ToyShapeSpec("box", {"size": [[0.6, 1.4], [0.4, 1.0], [0.3, 0.8]]}, "random", [0.4, 0.7]),
        ToyShapeSpec("cylinder", {"radius": [0.25, 0.5], "height": [0.8, 1.4]}, "random", [0.4, 0.7]),
        ToyShapeSpec(
            "two-box composite",
            {"size_a": [[0.8, 1.2], 0.4, 0.4], "size_b": [0.4, 0.4, [0.6, 1.0]], "offset": [0.3, 0.0, 0.4]},
            "random",
            [0.4, 0.7],
        ),
    ]


def _vec(v, rng):
    if isinstance(v, (list, tuple)) and len(v) == 3:
        return np.array([_draw(c, rng) for c in v])
    s = _draw(v, rng)
    return np.array([s, s, s])


def _box_surface(size, n, rng):
    a, b, c = size
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, (n, 3)) * size
    axis = face // 2
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    u[np.arange(n), axis] = sign * np.asarray(size)[axis]
    return u


def sample_surface(family: str, params: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    p = {**DEFAULT_PARAMS[family], **params}
    if family == "sphere-cap":
        r = _draw(p["radius"], rng)
        cos_max = math.cos(math.radians(_draw(p["cap_angle_deg"], rng)))
        z = rng.uniform(cos_max, 1.0, n)
        phi = rng.uniform(0, 2 * math.pi, n)
        rho = np.sqrt(np.clip(1 - z * z, 0, None))
        pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
        return r * pts / np.linalg.norm(pts, axis=1, keepdims=True)
    if family == "box":
        return _box_surface(_vec(p["size"], rng), n, rng)
    if family == "cylinder":
        r, h = _draw(p["radius"], rng), _draw(p["height"], rng)
        side, cap = 2 * math.pi * r * h, math.pi * r * r
        part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        phi = rng.uniform(0, 2 * math.pi, n)
        rad = np.where(part == 0, r, r * np.sqrt(rng.random(n)))
        z = np.where(part == 0, rng.uniform(-h / 2, h / 2, n), np.where(part == 1, h / 2, -h / 2))
        return np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)
    size_a, size_b = _vec(p["size_a"], rng), _vec(p["size_b"], rng)
    offset = _vec(p["offset"], rng)
    area_a = 2 * (size_a[0] * size_a[1] + size_a[1] * size_a[2] + size_a[0] * size_a[2])
    area_b = 2 * (size_b[0] * size_b[1] + size_b[1] * size_b[2] + size_b[0] * size_b[2])
    n_a = int(rng.binomial(n, area_a / (area_a + area_b)))
    pts = np.concatenate([_box_surface(size_a, n_a, rng) - offset / 2, _box_surface(size_b, n - n_a, rng) + offset / 2])
    return pts[rng.permutation(n)]


def crop(points: np.ndarray, view, keep_fraction: float) -> np.ndarray:
    """Keep the ``keep_fraction`` of points lying nearest along ``-view`` (the near side of a plane)."""
    if keep_fraction >= 1.0:
        return points
    view = np.asarray(view, dtype=np.float64)
    proj = points @ (view / np.linalg.norm(view))
    keep = max(1, int(round(keep_fraction * len(points))))
    order = np.argsort(proj, kind="stable")[:keep]
    return points[np.sort(order)]


def generate_toy_dataset(specs, n: int, seed: int, n_gt: int = 1024) -> list[tuple[PointCloud, PointCloud]]:
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one shape spec")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        spec = specs[i % len(specs)]
        gt = sample_surface(spec.family, spec.params, n_gt, rng)
        view = rng.standard_normal(3) if isinstance(spec.view, str) else _vec(spec.view, rng)
        partial = crop(gt, view, _draw(spec.keep_fraction, rng))
        out.append((PointCloud(partial, f"toy-{i}-partial"), PointCloud(gt, f"toy-{i}-gt")))
    return out


def save_dataset(directory, dataset, meta: dict | None = None) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (partial, gt) in enumerate(dataset):
        for kind, pc in (("partial", partial), ("gt", gt)):
            path = directory / f"{i:05d}_{kind}.xyz"
            write_xyz(path, pc)
            files.append(path)
    atomic_write_json(directory / "dataset.json", {"count": len(dataset), **(meta or {})})
    return files


def load_dataset(directory) -> list[tuple[PointCloud, PointCloud]]:
    directory = Path(directory)
    with open(directory / "dataset.json") as fh:
        count = json.load(fh)["count"]
    return [
        (read_xyz(directory / f"{i:05d}_partial.xyz"), read_xyz(directory / f"{i:05d}_gt.xyz"))
        for i in range(count)
    ]


# --- training -------------------------------------------------------------------------


def prepare_pairs(dataset, n_in: int, coarse_count: int, group: TransformDistribution | None = None):
    """Resample and self-normalize each partial; map gt with the same transform.

    Returns arrays (inputs (N, n_in, 3), gts (N, G, 3), coarse targets (N, coarse_count, 3)).
    """
    xs, gts, coarse = [], [], []
    for i, (partial, gt) in enumerate(dataset):
        p = partial.points if isinstance(partial, PointCloud) else np.asarray(partial)
        y = gt.points if isinstance(gt, PointCloud) else np.asarray(gt)
        if group is not None:
            g = sample_transform(group, i)
            p, y = g.act(p), g.act(y)
        x, back = self_normalize(PointCloud(resample(p, n_in)))
        y = back.inverse().act(y)
        xs.append(x.points)
        gts.append(y)
        coarse.append(y[farthest_point_sample(y, coarse_count)])
    return np.stack(xs), np.stack(gts), np.stack(coarse)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_cd_l1_x1000: float
    wall_seconds: float


@dataclass
class TrainingReport:
    records: list[EpochRecord] = field(default_factory=list)
    initial_val_cd_l1_x1000: float | None = None

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(dataclasses.asdict(r)) + "\n")


def validation_cd(model, inputs: np.ndarray, gts: np.ndarray, chunk: int = 16) -> float:
    """Mean CD-L1 x1000 over prepared (normalized-frame) pairs."""
    vals = []
    for i in range(0, len(inputs), chunk):
        _, dense = model.forward(inputs[i : i + chunk])
        vals.extend(chamfer_l1(d, g) for d, g in zip(dense.data, gts[i : i + chunk]))
    return 1000.0 * float(np.mean(vals))


def train_step(model, optimizer: Adam, x, gt, coarse_target, lr: float) -> float:
    params = model.parameters()
    with Tape(params) as tape:
        coarse, dense = model.forward(x)
        total = completion_loss(coarse, dense, gt, coarse_target)
    value = float(total.data)
    if not math.isfinite(value):
        return value
    tape.backward(total)
    optimizer.step(lr)
    return value


def train(model, dataset, cfg: TrainConfig, val_dataset=None, optimizer: Adam | None = None, start_epoch: int = 0,
          on_epoch_end=None, train_group: TransformDistribution | None = None, log=None) -> TrainingReport:
    """Minimize the two-term Chamfer loss with Adam and a step learning-rate decay.

    ``on_epoch_end(epoch, record, optimizer)`` runs after every epoch (checkpointing).
    Raises :class:`TrainingDiverged` if the loss stops being finite.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    mc = model.config
    x, gt, ct = prepare_pairs(dataset, mc.n_in, mc.coarse_count, train_group)
    val = val_dataset if val_dataset is not None else list(dataset)[: min(len(dataset), 16)]
    vx, vgt, _ = prepare_pairs(val, mc.n_in, mc.coarse_count)
    optimizer = optimizer or Adam(model.parameters(), weight_decay=cfg.weight_decay)
    report = TrainingReport()
    if start_epoch == 0:
        report.initial_val_cd_l1_x1000 = validation_cd(model, vx, vgt)
    n = len(x)
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            value = train_step(model, optimizer, x[idx], gt[idx], ct[idx], lr)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, step, value)
            losses.append(value * len(idx))
        record = EpochRecord(epoch, lr, float(np.sum(losses) / n), validation_cd(model, vx, vgt), time.perf_counter() - t0)
        report.records.append(record)
        if log is not None:
            log(record)
        if on_epoch_end is not None:
            on_epoch_end(epoch, record, optimizer)
    return report


# --- checkpoints ----------------------------------------------------------------------


def save_checkpoint(directory, model, optimizer: Adam | None = None, epoch: int = 0) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_arrays(directory / "params", model.state_dict())
    atomic_write_json(directory / "config.json", {"schema_version": 1, "model": model.config.to_json(),
                                                  "kind": type(model).__name__, "epoch": epoch})
    if optimizer is not None:
        save_arrays(directory / "optimizer", optimizer.state_arrays())


def load_checkpoint(directory, with_optimizer: bool = False, weight_decay: float = 0.0):
    from .control import ControlModel
    from .model import CompletionModel, ModelConfig

    directory = Path(directory)
    with open(directory / "config.json") as fh:
        meta = json.load(fh)
    cfg = ModelConfig.from_json(meta["model"])
    cls = ControlModel if meta.get("kind") == "ControlModel" else CompletionModel
    model = cls(cfg)
    model.load_state_dict(load_arrays(directory / "params"))
    if not with_optimizer:
        return model
    opt = Adam(model.parameters(), weight_decay=weight_decay)
    if (directory / "optimizer.bin").exists():
        opt.load_state_arrays(load_arrays(directory / "optimizer"))
    return model, opt, int(meta.get("epoch", 0))
