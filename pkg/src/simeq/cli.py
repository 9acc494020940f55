"""``simeq`` command line: gen, train, complete, eval, audit.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure, 4 threshold gate.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .features import resample
from .geometry import PointCloud, TransformDistribution, read_points, self_normalize, write_points
from .metrics import ProtocolConfig, audit_equivariance, run_protocol
from .model import PRESETS, CompletionModel, ModelConfig, preset
from .serialization import atomic_write_json, file_digest, text_digest
from .training import (
    TrainConfig,
    ToyShapeSpec,
    TrainingDiverged,
    default_toy_specs,
    generate_toy_dataset,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    train,
)
from .vn import set_bias_scale

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_GATE = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int | None
    tool_version: str = __version__
    input_digests: dict[str, str] = field(default_factory=dict)
    output_digests: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""

    def write(self, path) -> None:
        atomic_write_json(path, dataclasses.asdict(self))


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _digests(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for child in sorted(p.iterdir()):
                if child.is_file() and child.name != "manifest.json":
                    out[str(child)] = file_digest(child)
        elif p.is_file():
            out[str(p)] = file_digest(p)
    return out


def _manifest(command: str, config: dict, seed, inputs, started: str) -> RunManifest:
    digest = text_digest(json.dumps(config, sort_keys=True, default=str))
    return RunManifest(command, digest, seed, input_digests=_digests(inputs), started=started)


def _finish(manifest: RunManifest, outputs, path) -> None:
    manifest.output_digests = _digests(outputs)
    manifest.finished = _now()
    manifest.write(path)


def load_config(path) -> dict:
    """A JSON object carrying ``schema_version``; an absent path gives an empty config."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must be a JSON object")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CliError(f"config {path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    return cfg


def _pick(flag, cfg: dict, key: str, default):
    """Flag value if given, else config value, else default."""
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _threads(value) -> int:
    if value is not None:
        return value
    env = os.environ.get("SIMEQ_THREADS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError as exc:
        raise CliError(f"SIMEQ_THREADS must be an integer, got {env!r}") from exc
    if n < 1:
        raise CliError("SIMEQ_THREADS must be positive")
    return n


def _load_model(path):
    path = Path(path)
    if not (path / "config.json").is_file() or not (path / "params.bin").is_file():
        raise CliError(f"no checkpoint at {path}")
    try:
        return load_checkpoint(path)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"corrupt checkpoint {path}: {exc}") from exc


def _load_data(path):
    path = Path(path)
    if not (path / "dataset.json").is_file():
        raise CliError(f"no dataset at {path}")
    return load_dataset(path)


# --- gen ----------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    started = _now()
    cfg = load_config(args.spec)
    n = _pick(args.n, cfg, "n", None)
    if n is None or n <= 0:
        raise CliError("--n must be a positive pair count")
    seed = _pick(args.seed, cfg, "seed", 0)
    n_gt = _pick(args.n_gt, cfg, "n_gt", 1024)
    try:
        specs = [ToyShapeSpec.from_json(r) for r in cfg["shapes"]] if "shapes" in cfg else default_toy_specs()
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid shape spec: {exc}") from exc
    if not specs:
        raise CliError("shape spec list is empty")
    resolved = {"n": n, "seed": seed, "n_gt": n_gt, "shapes": [s.to_json() for s in specs]}
    manifest = _manifest("gen", resolved, seed, [args.spec] if args.spec else [], started)
    data = generate_toy_dataset(specs, n, seed, n_gt)
    out = Path(args.out)
    try:
        save_dataset(out, data, {"seed": seed, "n_gt": n_gt, "shapes": resolved["shapes"]})
    except OSError as exc:
        raise CliError(f"cannot write dataset to {out}: {exc}") from exc
    _finish(manifest, [out], out / "manifest.json")
    print(f"wrote {n} pairs to {out}")
    return EXIT_OK


# --- train --------------------------------------------------------------------------------


def _train_config(args, cfg: dict, base: dict) -> TrainConfig:
    section = {**base, **cfg.get("train", {})}
    values = {
        "learning_rate": _pick(args.lr, section, "learning_rate", 1e-4),
        "weight_decay": _pick(args.weight_decay, section, "weight_decay", 5e-4),
        "epochs": _pick(args.epochs, section, "epochs", 30),
        "batch_size": _pick(args.batch_size, section, "batch_size", 8),
        "seed": _pick(args.seed, section, "seed", 0),
        "lr_decay_factor": section.get("lr_decay_factor", 0.9),
        "lr_decay_every": section.get("lr_decay_every", 15),
    }
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from exc


def _build_model(args, cfg: dict, seed: int):
    from .control import ControlModel

    name = _pick(args.preset, cfg, "preset", "desk")
    if name not in PRESETS:
        raise CliError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    try:
        mc = preset(name, **{**cfg.get("model", {}), "seed": seed})
    except TypeError as exc:
        raise CliError(f"invalid model config: {exc}") from exc
    kind = _pick(args.model, cfg, "kind", "equivariant")
    if kind not in ("equivariant", "control"):
        raise CliError("--model must be 'equivariant' or 'control'")
    return (ControlModel if kind == "control" else CompletionModel)(mc)


def cmd_train(args) -> int:
    started = _now()
    cfg = load_config(args.config)
    out = Path(args.out)
    if args.resume:
        resume = Path(args.resume)
        if not (resume / "config.json").is_file():
            raise CliError(f"no checkpoint to resume at {resume}")
        base = json.loads((resume / "train.json").read_text()) if (resume / "train.json").is_file() else {}
        tc = _train_config(args, cfg, base)
        model, opt, start_epoch = load_checkpoint(resume, with_optimizer=True, weight_decay=tc.weight_decay)
    else:
        tc = _train_config(args, cfg, {})
        model, opt, start_epoch = _build_model(args, cfg, tc.seed), None, 0
    data = _load_data(args.data)
    val = _load_data(args.val_data) if args.val_data else None
    resolved = {"train": dataclasses.asdict(tc), "model": model.config.to_json(), "kind": type(model).__name__}
    inputs = [args.data] + ([args.config] if args.config else []) + ([args.val_data] if args.val_data else [])
    manifest = _manifest("train", resolved, tc.seed, inputs, started)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "train.json", dataclasses.asdict(tc))
    log_path = out / "train_log.jsonl"
    if start_epoch == 0:
        log_path.write_text("")
        save_checkpoint(out, model, None, 0)

    def on_epoch_end(epoch, record, optimizer):
        with open(log_path, "a") as fh:
            fh.write(json.dumps(dataclasses.asdict(record)) + "\n")
        save_checkpoint(out, model, optimizer, epoch + 1)

    def log(record):
        if not args.quiet:
            print(f"epoch {record.epoch}: loss {record.train_loss:.6f} val CD-L1x1000 {record.val_cd_l1_x1000:.3f}")

    try:
        train(model, data, tc, val_dataset=val, optimizer=opt, start_epoch=start_epoch,
              on_epoch_end=on_epoch_end, log=log)
    except TrainingDiverged as exc:
        _finish(manifest, [out], out / "manifest.json")
        raise CliError(f"{exc}; last good checkpoint kept in {out}", EXIT_NUMERIC) from exc
    _finish(manifest, [out], out / "manifest.json")
    return EXIT_OK


# --- complete -----------------------------------------------------------------------------


def complete_in_sensor_frame(model, points: np.ndarray):
    """Resample to the model's input size, self-normalize, predict, map back; returns (coarse, dense)."""
    x, back = self_normalize(PointCloud(resample(points, model.config.n_in)))
    coarse, dense = model.complete(x)
    return back.act(coarse.points), back.act(dense.points)


def cmd_complete(args) -> int:
    started = _now()
    model = _load_model(args.checkpoint)
    try:
        pc = read_points(args.input)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {args.input}: {exc}") from exc
    if len(pc) < 2:
        raise CliError(f"{args.input} needs at least two points")
    manifest = _manifest("complete", {"model": model.config.to_json()}, model.config.seed,
                         [args.input, args.checkpoint], started)
    try:
        coarse, dense = complete_in_sensor_frame(model, pc.points)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if not (np.all(np.isfinite(dense)) and np.all(np.isfinite(coarse))):
        raise CliError("prediction is not finite", EXIT_NUMERIC)
    outputs = [args.out]
    write_points(args.out, PointCloud(dense, "sensor"))
    if args.coarse_out:
        write_points(args.coarse_out, PointCloud(coarse, "sensor"))
        outputs.append(args.coarse_out)
    _finish(manifest, outputs, str(args.out) + ".manifest.json")
    return EXIT_OK


# --- eval ---------------------------------------------------------------------------------


def cmd_eval(args) -> int:
    started = _now()
    model = _load_model(args.checkpoint)
    data = _load_data(args.data)
    if args.limit is not None:
        data = data[: args.limit]
    try:
        group = TransformDistribution.preset(args.group, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    refs = [gt.points for _, gt in data] if args.mmd else None
    pc = ProtocolConfig(test_group=group, n_in=model.config.n_in, threshold=args.fscore_threshold)
    resolved = {"group": args.group, "seed": args.seed, "threshold": args.fscore_threshold, "mmd": args.mmd,
                "limit": args.limit}
    manifest = _manifest("eval", resolved, args.seed, [args.checkpoint, args.data], started)
    report = run_protocol(model, data, pc, refs, threads=_threads(args.threads), group_name=args.group)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    outputs = [out]
    if args.csv:
        report.write_csv(args.csv)
        outputs.append(args.csv)
    _finish(manifest, outputs, str(out) + ".manifest.json")
    print(f"{args.group}: CD-L1x1000 {report.cd_l1_x1000:.4f} F1 {report.f1_at_1pct:.4f}")
    if not math.isfinite(report.cd_l1_x1000):
        raise CliError("metrics are not finite", EXIT_NUMERIC)
    failures = []
    if args.max_cd is not None and report.cd_l1_x1000 > args.max_cd:
        failures.append(f"CD-L1x1000 {report.cd_l1_x1000:.4f} > {args.max_cd}")
    if args.min_f1 is not None and report.f1_at_1pct < args.min_f1:
        failures.append(f"F1 {report.f1_at_1pct:.4f} < {args.min_f1}")
    if failures:
        raise CliError("; ".join(failures), EXIT_GATE)
    return EXIT_OK


# --- audit --------------------------------------------------------------------------------


def _parse_scales(text: str) -> list[float]:
    try:
        scales = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise CliError(f"--sweep expects comma-separated numbers, got {text!r}") from exc
    if any(s < 0 for s in scales):
        raise CliError("bias scales must be non-negative")
    return scales


def cmd_audit(args) -> int:
    started = _now()
    if args.trials < 1:
        raise CliError("--trials must be at least 1")
    if args.checkpoint:
        model = _load_model(args.checkpoint)
    else:
        if args.preset not in PRESETS:
            raise CliError(f"unknown preset {args.preset!r}")
        model = CompletionModel(preset(args.preset, seed=args.seed, bias_norm=args.bias_norm))
    if not getattr(model, "equivariant", False):
        print("warning: auditing a model that is not designed to be equivariant", file=sys.stderr)
    if args.bias_scale < 0:
        raise CliError("--bias-scale must be non-negative")
    set_bias_scale(model, args.bias_scale)
    try:
        group = TransformDistribution.preset(args.group, seed=args.seed, scale_range=(0.1, 10.0),
                                             translation_range=10.0 / math.sqrt(3.0))
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    sweep = _parse_scales(args.sweep) if args.sweep else None
    resolved = {"trials": args.trials, "group": args.group, "bias_scale": args.bias_scale, "sweep": sweep,
                "bias_norm": args.bias_norm, "preset": None if args.checkpoint else args.preset}
    manifest = _manifest("audit", resolved, args.seed, [args.checkpoint] if args.checkpoint else [], started)
    rng = np.random.default_rng([args.seed, 1])
    inputs = [rng.standard_normal((model.config.n_in, 3)) for _ in range(min(args.trials, 8))]
    report = audit_equivariance(model, group, args.trials, inputs=inputs, bias_scales=sweep)
    set_bias_scale(model, args.bias_scale)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    outputs = [out]
    if args.plot_csv:
        report.write_plot_csv(args.plot_csv)
        outputs.append(args.plot_csv)
    _finish(manifest, outputs, str(out) + ".manifest.json")
    mean_err, max_err = report.end_to_end_error
    print(f"end-to-end relative error: mean {mean_err:.3e} max {max_err:.3e} over {args.trials} trials")
    if not math.isfinite(max_err):
        raise CliError("audit error is not finite", EXIT_NUMERIC)
    if args.max_error is not None and max_err >= args.max_error:
        raise CliError(f"max relative error {max_err:.3e} >= {args.max_error}", EXIT_GATE)
    return EXIT_OK


# --- entry point --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simeq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"simeq {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a toy partial/complete dataset")
    g.add_argument("--spec", help="JSON config with schema_version and a 'shapes' list")
    g.add_argument("--n", type=int, help="number of pairs")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-gt", type=int, help="points per complete shape (default 1024)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a completion model")
    t.add_argument("--data", required=True)
    t.add_argument("--val-data")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--config", help="JSON config with schema_version, optional 'model' and 'train' sections")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--model", choices=("equivariant", "control"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("complete", help="complete one partial scan in its own frame")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--input", required=True, help=".xyz or .ply")
    c.add_argument("--out", required=True)
    c.add_argument("--coarse-out")
    c.set_defaults(func=cmd_complete)

    e = sub.add_parser("eval", help="de-biased evaluation under a transform group")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--group", default="identity", choices=("identity", "so3", "se3", "sim3"))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--csv", help="per-sample CSV path")
    e.add_argument("--mmd", action="store_true", help="score MMD against the dataset's complete shapes")
    e.add_argument("--limit", type=int, help="evaluate only the first N pairs")
    e.add_argument("--fscore-threshold", type=float, default=0.01)
    e.add_argument("--max-cd", type=float, help="fail (exit 4) if CD-L1x1000 exceeds this")
    e.add_argument("--min-f1", type=float, help="fail (exit 4) if F1 falls below this")
    e.add_argument("--threads", type=int, help="worker threads (default $SIMEQ_THREADS or 1)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="measure equivariance error under random transforms")
    a.add_argument("--checkpoint", help="audit a trained model instead of a fresh preset")
    a.add_argument("--preset", default="desk")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--trials", type=int, default=100)
    a.add_argument("--group", default="sim3", choices=("identity", "so3", "se3", "sim3"))
    a.add_argument("--bias-norm", type=float, default=0.0, help="bias magnitude for a fresh preset model")
    a.add_argument("--bias-scale", type=float, default=1.0)
    a.add_argument("--sweep", help="comma-separated bias scales, e.g. 1,0.1,0.01,0")
    a.add_argument("--max-error", type=float, help="fail (exit 4) unless the max error is below this")
    a.add_argument("--out", default="audit.json")
    a.add_argument("--plot-csv")
    a.add_argument("--threads", type=int, help="accepted for symmetry; the audit runs serially")
    a.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"simeq {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"simeq {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
