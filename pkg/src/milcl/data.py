"""Bag files, dataset manifests and the synthetic class-incremental generator."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .model import Bag
from .numerics import RngStream
from .trainer import TaskDataset, TaskStream
from .validation import FormatError

BAG_MAGIC = b"MILB"
BAG_VERSION = 1
_BAG_HEADER = struct.Struct("<4sIIIii")
MANIFEST_FIELDS = ["path", "label", "task", "split", "bag_id"]
SPLITS = ("train", "val", "test")


def bag_bytes(bag: Bag) -> bytes:
    N, d = bag.features.shape
    header = _BAG_HEADER.pack(BAG_MAGIC, BAG_VERSION, d, N, bag.label, bag.task)
    return header + np.ascontiguousarray(bag.features, dtype="<f8").tobytes()


def write_bag(bag: Bag, path) -> Path:
    path = Path(path)
    path.write_bytes(bag_bytes(bag))
    return path


def read_bag(path, bag_id: str | None = None) -> Bag:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _BAG_HEADER.size:
        raise FormatError(f"{path}: truncated header, {len(raw)} of {_BAG_HEADER.size} bytes (offset {len(raw)})")
    magic, version, d, N, label, task = _BAG_HEADER.unpack_from(raw, 0)
    if magic != BAG_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != BAG_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    expected = _BAG_HEADER.size + 8 * N * d
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)} (offset {min(len(raw), expected)})")
    if N < 1 or d < 1:
        raise FormatError(f"{path}: empty bag (N={N}, d={d}) at offset 8")
    features = np.frombuffer(raw, dtype="<f8", offset=_BAG_HEADER.size).astype(np.float64).reshape(N, d)
    return Bag(features, label, task, bag_id if bag_id is not None else path.stem)


@dataclass
class SynthConfig:
    tasks: int = 3
    classes_per_task: int = 2
    train_per_class: int = 40
    val_per_class: int = 10
    test_per_class: int = 20
    d: int = 16
    n_min: int = 64
    n_max: int = 256
    evidence_fraction: float = 0.1
    separation: float = 4.0
    noise_sigma: float = 0.5
    background_sigma: float = 1.0
    shared_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("tasks", self.tasks >= 1),
            ("classes_per_task", self.classes_per_task >= 1),
            ("train_per_class", self.train_per_class >= 1),
            ("val_per_class", self.val_per_class >= 0),
            ("test_per_class", self.test_per_class >= 1),
            ("d", self.d >= self.tasks * self.classes_per_task + (self.shared_shift != 0)),
            ("n_min", self.n_min >= 2),
            ("n_max", self.n_max >= self.n_min),
            ("evidence_fraction", 0.0 < self.evidence_fraction < 1.0
             and self.evidence_fraction * self.n_min >= 1.0),
            ("separation", self.separation > 0),
            ("noise_sigma", self.noise_sigma >= 0),
            ("background_sigma", self.background_sigma >= 0),
            ("shared_shift", self.shared_shift >= 0),
            ("seed", 0 <= self.seed < 2**64),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid synthetic config field {name!r}: {getattr(self, name)!r}")

    @property
    def n_classes(self) -> int:
        return self.tasks * self.classes_per_task

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def class_means(cfg: SynthConfig) -> np.ndarray:
    """Scaled one-hot means, every pair exactly ``separation`` apart.

    ``shared_shift`` moves all evidence along the last axis (orthogonal to
    every class axis), a component common to evidence of every class.
    """
    means = np.eye(cfg.n_classes, cfg.d) * (cfg.separation / math.sqrt(2.0))
    means[:, -1] += cfg.shared_shift
    return means


def synth_bag(cfg: SynthConfig, label: int, task: int, bag_id: str, rng: RngStream,
              means) -> tuple[Bag, np.ndarray]:
    """One bag and the boolean mask of its evidence patches."""
    g = rng.generator
    N = int(g.integers(cfg.n_min, cfg.n_max + 1))
    n_ev = math.ceil(cfg.evidence_fraction * N)
    evidence = means[label] + cfg.noise_sigma * g.standard_normal((n_ev, cfg.d))
    background = cfg.background_sigma * g.standard_normal((N - n_ev, cfg.d))
    order = g.permutation(N)
    H = np.vstack([evidence, background])[order]
    return Bag(H, label, task, bag_id), order < n_ev


def synth_stream(cfg: SynthConfig) -> tuple[TaskStream, dict[str, np.ndarray]]:
    """In-memory stream plus a per-bag mask of evidence patches (for drift analysis)."""
    rng = RngStream(cfg.seed)
    means = class_means(cfg)
    counts = {"train": cfg.train_per_class, "val": cfg.val_per_class, "test": cfg.test_per_class}
    tasks, evidence = [], {}
    for t in range(cfg.tasks):
        classes = tuple(range(t * cfg.classes_per_task, (t + 1) * cfg.classes_per_task))
        splits = {s: [] for s in SPLITS}
        for c in classes:
            for split in SPLITS:
                for i in range(counts[split]):
                    bag_id = f"t{t}_c{c}_{split}_{i:03d}"
                    bag, evidence[bag_id] = synth_bag(cfg, c, t, bag_id, rng, means)
                    splits[split].append(bag)
        tasks.append(TaskDataset(splits["train"], splits["val"], splits["test"], classes))
    return TaskStream(tasks), evidence


def gen_synthetic(cfg: SynthConfig, out_dir) -> Path:
    """Write bag files under ``out_dir/bags`` plus ``manifest.csv`` and ``synth_config.json``."""
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    stream, _ = synth_stream(cfg)
    rows = []
    for task in stream.tasks:
        for split in SPLITS:
            for bag in getattr(task, split):
                rel = f"bags/{bag.bag_id}.milb"
                write_bag(bag, out / rel)
                rows.append({"path": rel, "label": bag.label, "task": bag.task, "split": split,
                             "bag_id": bag.bag_id})
    write_manifest(rows, out / "manifest.csv")
    (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def write_manifest(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_manifest(path) -> list[dict]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise FormatError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}, got {reader.fieldnames}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if row["split"] not in SPLITS:
                raise FormatError(f"{path}:{lineno}: split must be one of {SPLITS}, got {row['split']!r}")
            try:
                row["label"] = int(row["label"])
                row["task"] = int(row["task"])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            rows.append(row)
    return rows


def load_dataset(data_dir) -> TaskStream:
    """Read ``manifest.csv`` and every bag it lists, cross-checking labels and tasks."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.csv"
    if not manifest.exists():
        raise FormatError(f"{manifest}: manifest not found")
    by_task: dict[int, dict[str, list[Bag]]] = {}
    for row in read_manifest(manifest):
        path = data_dir / row["path"]
        if not path.exists():
            raise FormatError(f"{path}: listed in manifest but missing")
        bag = read_bag(path, row["bag_id"])
        if bag.label != row["label"] or bag.task != row["task"]:
            raise FormatError(
                f"{path}: header says label={bag.label} task={bag.task}, "
                f"manifest says label={row['label']} task={row['task']}"
            )
        by_task.setdefault(row["task"], {s: [] for s in SPLITS})[row["split"]].append(bag)
    if not by_task:
        raise FormatError(f"{manifest}: no bags listed")
    tasks = [TaskDataset(**by_task[t]) for t in sorted(by_task)]
    return TaskStream(tasks)
