"""Similarity transforms, their action on points and vector features, and point-cloud I/O."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROTATION_MODES = ("identity", "uniform-SO3")


@dataclass(frozen=True)
class Sim3Transform:
    """g = (s, R, t) acting on a row of coordinates p as ``s * R @ p + t``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls()

    def act(self, x):
        """Apply to any array whose last axis holds 3-vectors (points or vector-neuron rows)."""
        x = np.asarray(x, dtype=np.float64)
        return self.scale * (x @ self.rotation.T) + self.translation

    def inverse(self) -> "Sim3Transform":
        inv_s = 1.0 / self.scale
        rt = self.rotation.T
        return Sim3Transform(inv_s, rt, -inv_s * (rt @ self.translation))

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        """self ∘ other: apply ``other`` first."""
        return compose(self, other)

    def allclose(self, other: "Sim3Transform", atol: float = 1e-9) -> bool:
        return (
            abs(self.scale - other.scale) <= atol
            and np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def to_json(self) -> dict:
        return {
            "scale": self.scale,
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_json(cls, record: dict) -> "Sim3Transform":
        rotation = np.asarray(record["rotation"], dtype=np.float64)
        translation = np.asarray(record["translation"], dtype=np.float64)
        if rotation.size != 9 or translation.size != 3:
            raise ValueError("transform record needs 9 rotation and 3 translation entries")
        return cls(float(record["scale"]), rotation.reshape(3, 3), translation)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    frame_label: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 3:
            pts = pts.reshape(1, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class TransformDistribution:
    rotation_mode: str = "uniform-SO3"
    scale_range: tuple[float, float] = (0.5, 2.0)
    translation_range: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rotation_mode not in ROTATION_MODES:
            raise ValueError(f"rotation_mode must be one of {ROTATION_MODES}")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"invalid scale_range {self.scale_range}")
        if self.translation_range < 0:
            raise ValueError("translation_range must be non-negative")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))

    @classmethod
    def preset(cls, group: str, seed: int = 0, scale_range=(0.5, 2.0), translation_range=1.0):
        """Named transform groups: identity, so3, se3, sim3."""
        group = group.lower()
        if group in ("identity", "i"):
            return cls("identity", (1.0, 1.0), 0.0, seed)
        if group == "so3":
            return cls("uniform-SO3", (1.0, 1.0), 0.0, seed)
        if group == "se3":
            return cls("uniform-SO3", (1.0, 1.0), translation_range, seed)
        if group == "sim3":
            return cls("uniform-SO3", tuple(scale_range), translation_range, seed)
        raise ValueError(f"unknown transform group {group!r}")


def apply_transform(g: Sim3Transform, pc: PointCloud) -> PointCloud:
    if len(pc) == 0:
        raise ValueError("cannot transform an empty point cloud")
    return PointCloud(g.act(pc.points), pc.frame_label)


def compose(g1: Sim3Transform, g2: Sim3Transform) -> Sim3Transform:
    return Sim3Transform(
        g1.scale * g2.scale,
        g1.rotation @ g2.rotation,
        g1.scale * (g1.rotation @ g2.translation) + g1.translation,
    )


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform on SO(3): normalized quaternion of four standard normals."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.standard_normal(4)
    return quaternion_to_matrix(q)


def sample_transform(dist: TransformDistribution, index: int) -> Sim3Transform:
    # per-(seed, index) stream so sampling never depends on call order
    rng = np.random.default_rng([dist.seed & 0xFFFFFFFFFFFFFFFF, int(index)])
    rotation = random_rotation(rng) if dist.rotation_mode == "uniform-SO3" else np.eye(3)
    lo, hi = dist.scale_range
    u = rng.random()
    scale = lo if lo == hi else float(np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo))))
    translation = rng.uniform(-1.0, 1.0, 3) * dist.translation_range
    return Sim3Transform(scale, rotation, translation)


def self_normalize(pc: PointCloud) -> tuple[PointCloud, Sim3Transform]:
    """Center on the centroid and scale so the farthest point sits on the unit sphere.

    Returns the normalized cloud and the transform that maps it back onto ``pc``.
    """
    pts = pc.points
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    radius = float(np.sqrt((centered**2).sum(axis=1)).max()) if len(pc) else 0.0
    if radius <= 0.0:
        raise ValueError("degenerate point cloud: zero extent, cannot normalize")
    normalized = PointCloud(centered / radius, pc.frame_label)
    return normalized, Sim3Transform(radius, np.eye(3), centroid)


def rot_x(deg: float) -> np.ndarray:
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_z(deg: float) -> np.ndarray:
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def random_sim3(rng: np.random.Generator, scale_range=(0.1, 10.0), max_translation=10.0) -> Sim3Transform:
    """Log-uniform scale, uniform rotation, translation uniform in a ball of radius ``max_translation``."""
    lo, hi = scale_range
    scale = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    translation = direction * max_translation * rng.random() ** (1 / 3)
    return Sim3Transform(scale, random_rotation(rng), translation)


# --- file formats -------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_xyz(path, pc: PointCloud) -> None:
    lines = [" ".join(repr(float(c)) for c in p) for p in pc.points]
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_xyz(path, frame_label: str = "") -> PointCloud:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
            rows.append([float(v) for v in parts])
    if not rows:
        raise ValueError(f"{path}: no points")
    return PointCloud(np.array(rows), frame_label or str(path))


def write_ply(path, pc: PointCloud) -> None:
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pc)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    body = [" ".join(repr(float(c)) for c in p) for p in pc.points]
    _atomic_write_text(path, "\n".join(header + body) + "\n")


def read_ply(path, frame_label: str = "") -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    end = None
    for i, line in enumerate(lines[1:], 1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
            elif int(tok[2]) != 0:
                raise ValueError(f"{path}: only vertex elements are supported")
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            end = i
            break
    if end is None or n_vertex is None or not {"x", "y", "z"} <= set(props):
        raise ValueError(f"{path}: malformed PLY header")
    cols = [props.index(c) for c in "xyz"]
    rows = []
    for line in lines[end + 1 : end + 1 + n_vertex]:
        vals = line.split()
        if len(vals) != len(props):
            raise ValueError(f"{path}: malformed vertex line {line!r}")
        rows.append([float(vals[c]) for c in cols])
    if len(rows) != n_vertex or n_vertex == 0:
        raise ValueError(f"{path}: expected {n_vertex} vertices, found {len(rows)}")
    return PointCloud(np.array(rows), frame_label or str(path))


def read_points(path, frame_label: str = "") -> PointCloud:
    if str(path).lower().endswith(".ply"):
        return read_ply(path, frame_label)
    return read_xyz(path, frame_label)


def write_points(path, pc: PointCloud) -> None:
    if str(path).lower().endswith(".ply"):
        write_ply(path, pc)
    else:
        write_xyz(path, pc)


def write_transform(path, g: Sim3Transform) -> None:
    _atomic_write_text(path, json.dumps(g.to_json(), indent=2) + "\n")


def read_transform(path) -> Sim3Transform:
    with open(path) as fh:
        return Sim3Transform.from_json(json.load(fh))
