"""Command-line entry point: ``milcl <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 when an input file or
config is malformed or inconsistent.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import attention_drift, decouple_grid, grad_trace, write_decouple_csv, write_drift_csv, write_gradtrace_csv
from .data import SynthConfig, gen_synthetic, load_dataset
from .experiments import DEFAULT_SYNTH, DEFAULT_TRAIN
from .metrics import AccuracyMatrix, summary
from .model import load_checkpoint
from .numerics import RNG_ALGORITHM
from .trainer import METHODS, SessionLog, StepRecord, TrainConfig, evaluate, run_cl, run_joint
from .validation import FormatError

logger = logging.getLogger("milcl")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
SEED_ENV = "MILCL_SEED"
STEP_FIELDS = ["step", "session", "ce", "attn_kl", "logits_kl", "total", "is_replay",
               "grad_attention", "grad_classifier"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return data


def _section(data: dict, key: str) -> dict:
    """Configs may be flat or split into ``synth`` / ``train`` sections."""
    if "synth" in data or "train" in data:
        return dict(data.get(key, {}))
    return dict(data)


def _seed_override(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _synth_config(args) -> SynthConfig:
    data = _section(_read_json(args.config), "synth")
    seed = _seed_override(args)
    if seed is not None:
        data["seed"] = seed
    try:
        return SynthConfig.from_dict({**DEFAULT_SYNTH.to_dict(), **data})
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{args.config}: {exc}") from None


def _train_config(args) -> TrainConfig:
    data = _section(_read_json(args.config), "train")
    seed = _seed_override(args)
    if seed is not None:
        data["seed"] = seed
    if args.method is not None:
        data["method"] = args.method
    try:
        return TrainConfig.from_dict({**DEFAULT_TRAIN.to_dict(), **data})
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{args.config}: {exc}") from None


def _dataset_digest(data_dir: Path) -> str:
    """sha256 over the manifest and every file it lists, in manifest order."""
    h = hashlib.sha256()
    manifest = data_dir / "manifest.csv"
    h.update(manifest.read_bytes())
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            h.update((data_dir / row["path"]).read_bytes())
    return h.hexdigest()


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_steps(logs, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STEP_FIELDS)
        for log in logs:
            for s in log.steps:
                writer.writerow([s.step, s.session, repr(s.ce), repr(s.attn_kl), repr(s.logits_kl), repr(s.total),
                                 int(s.is_replay), repr(s.grad_attention), repr(s.grad_classifier)])


def _read_steps(path: Path) -> list[SessionLog]:
    if not path.exists():
        raise FormatError(f"{path}: step log not found")
    logs: dict[int, SessionLog] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != STEP_FIELDS:
            raise FormatError(f"{path}: header must be {','.join(STEP_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = StepRecord(int(row["step"]), int(row["session"]), float(row["ce"]), float(row["attn_kl"]),
                                 float(row["logits_kl"]), float(row["total"]), bool(int(row["is_replay"])),
                                 float(row["grad_attention"]), float(row["grad_classifier"]))
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            logs.setdefault(rec.session, SessionLog(session=rec.session)).steps.append(rec)
    return [logs[k] for k in sorted(logs)]


def _load_run(run_dir: Path) -> dict:
    manifest = run_dir / "manifest.json"
    if not manifest.exists():
        raise FormatError(f"{manifest}: run manifest not found")
    return _read_json(manifest)


def _load_models(run_dir: Path, manifest: dict):
    return [load_checkpoint(run_dir / name)[0] for name in manifest["checkpoints"]]


def cmd_gen_data(args) -> int:
    cfg = _synth_config(args)
    out = gen_synthetic(cfg, args.out)
    print(json.dumps({"out": str(out), "seed": cfg.seed, "digest": _dataset_digest(out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    config = _train_config(args)
    data_dir = Path(args.data)
    stream = load_dataset(data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if config.method == "joint":
        result = run_joint(stream, config, out)
        metrics = {"joint_mean": float(np.mean(result.matrix.joint))}
    else:
        result = run_cl(stream, config, out)
        metrics = summary(result.matrix)
    _write_steps(result.logs, out / "steps.csv")
    manifest = {
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "data_digest": _dataset_digest(data_dir),
        "rng": RNG_ALGORITHM,
        "matrix": result.matrix.to_dict(),
        "metrics": metrics,
        "checkpoints": [log.checkpoint for log in result.logs],
        "pools": [log.pool_checkpoint for log in result.logs if log.pool_checkpoint],
        "sessions": [{"session": log.session, "best_epoch": log.best_epoch, "epochs": log.epochs}
                     for log in result.logs],
        "step_log": "steps.csv",
    }
    _write_json(out / "manifest.json", manifest)
    print(json.dumps({"run": str(out), "metrics": metrics}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    manifest = _load_run(run_dir)
    stream = load_dataset(args.data)
    models = _load_models(run_dir, manifest)
    if manifest["config"]["method"] == "joint":
        joint = [evaluate(models[0], task.test) for task in stream.tasks]
        recorded = manifest["matrix"]["joint"]
        report = {"joint": joint, "joint_mean": float(np.mean(joint))}
        consistent = joint == recorded
    else:
        if len(models) != len(stream.tasks):
            raise FormatError(f"{run_dir}: {len(models)} checkpoints for a {len(stream.tasks)}-task dataset")
        rows = [[evaluate(models[t], stream.tasks[j].test) for j in range(t + 1)] for t in range(len(models))]
        joint = None
        if args.joint_run:
            joint = _load_run(Path(args.joint_run))["matrix"]["joint"]
        matrix = AccuracyMatrix(rows, joint)
        report = {"matrix": matrix.to_dict(), **summary(matrix)}
        recorded = manifest["metrics"]["aacc"]
        consistent = report["aacc"] == recorded
    report["matches_manifest"] = consistent
    _write_json(run_dir / "eval.json", report)
    print(json.dumps(report, sort_keys=True))
    if not consistent:
        print(f"error: recomputed accuracies differ from {run_dir / 'manifest.json'}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_decouple(args) -> int:
    run_dir = Path(args.run)
    manifest = _load_run(run_dir)
    if manifest["config"]["method"] == "joint":
        raise FormatError(f"{run_dir}: decoupling needs a class-incremental run, not a joint one")
    stream = load_dataset(args.data)
    models = _load_models(run_dir, manifest)
    track = [row[0] for row in manifest["matrix"]["rows"]]
    try:
        grid = decouple_grid(models, stream.tasks[0].test, expected_diagonal=track)
    except AssertionError as exc:
        raise FormatError(f"{run_dir}: checkpoints do not reproduce the recorded task-1 accuracies ({exc})") from None
    write_decouple_csv(grid, args.out)
    print(json.dumps({"out": args.out, "grid": grid.acc.tolist()}))
    return EXIT_OK


def cmd_grad_trace(args) -> int:
    run_dir = Path(args.run)
    manifest = _load_run(run_dir)
    logs = _read_steps(run_dir / manifest.get("step_log", "steps.csv"))
    records = grad_trace(logs, args.window)
    write_gradtrace_csv(records, args.out)
    print(json.dumps({"out": args.out, "windows": len(records) // 2}))
    return EXIT_OK


def cmd_drift(args) -> int:
    run_dir = Path(args.run)
    manifest = _load_run(run_dir)
    stream = load_dataset(args.data)
    models = _load_models(run_dir, manifest)
    session = args.session if args.session is not None else len(models)
    if not 1 <= session <= len(models):
        raise UsageError(f"--session must lie in [1, {len(models)}]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for bag in stream.tasks[0].test[: args.bags]:
        drift = attention_drift(models[0].attention, models[session - 1].attention, bag)
        written.append(write_drift_csv(drift, out).name)
    print(json.dumps({"out": str(out), "files": written}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="milcl", description="Continual attention-MIL experiments on patch-feature bags.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seeded(p):
        p.add_argument("--seed", type=int, default=None,
                       help=f"override the config seed (falls back to ${SEED_ENV})")
        return p

    p = seeded(sub.add_parser("gen-data", help="write a synthetic class-incremental dataset"))
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = seeded(sub.add_parser("train", help="train one method over the task stream"))
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = seeded(sub.add_parser("eval", help="re-score a run's checkpoints"))
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--joint-run", default=None, help="joint-training run supplying the IM baseline")
    p.set_defaults(func=cmd_eval)

    p = seeded(sub.add_parser("decouple", help="attention/classifier hybrid grid on task-1 test bags"))
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decouple)

    p = seeded(sub.add_parser("grad-trace", help="windowed gradient-norm summaries"))
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=50)
    p.set_defaults(func=cmd_grad_trace)

    p = seeded(sub.add_parser("drift", help="per-patch attention drift on task-1 test bags"))
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--session", type=int, default=None, help="1-based session compared with session 1 (default: last)")
    p.add_argument("--bags", type=int, default=5)
    p.set_defaults(func=cmd_drift)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError, KeyError) as exc:
        # FormatError is a ValueError
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
