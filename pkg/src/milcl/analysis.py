"""Forgetting diagnostics: hybrid attention/classifier grid, gradient trace, attention drift."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import MilModel, forward_attention, pad_head
from .trainer import SessionLog, evaluate


@dataclass
class DecoupleGrid:
    """``acc[r, c]``: accuracy of the classifier from session r on top of the attention from session c."""

    acc: np.ndarray

    def to_rows(self) -> list[dict]:
        T = self.acc.shape[0]
        return [{"row": r + 1, "col": c + 1, "accuracy": float(self.acc[r, c])}
                for r in range(T) for c in range(T)]


def hybrid(attention_model: MilModel, classifier_model: MilModel, n_classes: int | None = None) -> MilModel:
    if attention_model.n_features != classifier_model.n_features:
        raise ValueError("attention and classifier come from models with different feature dimensions")
    head = classifier_model.classifier
    if n_classes is not None:
        head = pad_head(head, n_classes)
    return MilModel(attention_model.attention, head)


def decouple_grid(models: list[MilModel], bags, expected_diagonal=None, atol: float = 1e-12) -> DecoupleGrid:
    """Score every (attention session, classifier session) pairing on ``bags``.

    The classifier of the cell is zero-padded to the head size of the later
    of its two sessions, so unseen-at-the-time classes compete with logit 0
    and diagonal cells are exactly the original session models.
    """
    if not models:
        raise ValueError("need at least one checkpoint")
    d = models[0].n_features
    if any(m.n_features != d for m in models):
        raise ValueError("checkpoints disagree on the feature dimension")
    T = len(models)
    acc = np.zeros((T, T))
    for r in range(T):
        for c in range(T):
            n_classes = max(models[r].n_classes, models[c].n_classes)
            acc[r, c] = evaluate(hybrid(models[c], models[r], n_classes), bags)
    if expected_diagonal is not None:
        expected = np.asarray(expected_diagonal, dtype=np.float64)
        if expected.shape != (T,) or not np.allclose(np.diag(acc), expected, rtol=0.0, atol=atol):
            raise AssertionError(f"grid diagonal {np.diag(acc)} disagrees with the run's track {expected}")
    return DecoupleGrid(acc)


@dataclass(frozen=True)
class TraceRecord:
    window: int
    block: str
    min: float
    q1: float
    median: float
    q3: float
    max: float
    n_steps: int
    partial: bool
    first_step: int
    session: int


def five_number_summary(values) -> tuple[float, float, float, float, float]:
    """min, quartiles and max; quartiles interpolate linearly between closest ranks."""
    v = np.asarray(values, dtype=np.float64)
    q = np.percentile(v, [0, 25, 50, 75, 100], method="linear")
    return tuple(float(x) for x in q)


def grad_trace(logs, window: int = 50) -> list[TraceRecord]:
    """Summaries of per-step gradient norms over consecutive windows of ``window`` steps.

    ``logs`` is one :class:`SessionLog` or a sequence of them (concatenated in
    order). A trailing window shorter than ``window`` is kept and marked partial.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if isinstance(logs, SessionLog):
        logs = [logs]
    steps = [s for log in logs for s in log.steps]
    if not steps:
        raise ValueError("no training steps logged")
    records = []
    for w, start in enumerate(range(0, len(steps), window)):
        chunk = steps[start: start + window]
        for block, attr in (("attention", "grad_attention"), ("classifier", "grad_classifier")):
            stats = five_number_summary([getattr(s, attr) for s in chunk])
            records.append(TraceRecord(w, block, *stats, len(chunk), len(chunk) < window,
                                       chunk[0].step, chunk[0].session))
    return records


@dataclass
class DriftMap:
    bag_id: str
    a_ref: np.ndarray
    a_t: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.a_t - self.a_ref

    def to_rows(self) -> list[dict]:
        return [{"patch": i, "a_ref": float(r), "a_t": float(t), "delta": float(t - r)}
                for i, (r, t) in enumerate(zip(self.a_ref, self.a_t))]


def attention_drift(theta_ref, theta_t, bag) -> DriftMap:
    """Per-patch change of attention between two attention networks on one bag."""
    if theta_ref.n_features != theta_t.n_features:
        raise ValueError("attention networks disagree on the feature dimension")
    a_ref = forward_attention(bag, theta_ref).attention
    a_t = forward_attention(bag, theta_t).attention
    return DriftMap(getattr(bag, "bag_id", ""), a_ref, a_t)


def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def write_decouple_csv(grid: DecoupleGrid, path) -> Path:
    return _write_csv(path, ["row", "col", "accuracy"], grid.to_rows())


def write_gradtrace_csv(records, path) -> Path:
    rows = [{"window": r.window, "block": r.block, "min": r.min, "q1": r.q1, "median": r.median,
             "q3": r.q3, "max": r.max} for r in records]
    return _write_csv(path, ["window", "block", "min", "q1", "median", "q3", "max"], rows)


def write_drift_csv(drift: DriftMap, out_dir) -> Path:
    path = Path(out_dir) / f"drift_{drift.bag_id}.csv"
    return _write_csv(path, ["patch", "a_ref", "a_t", "delta"], drift.to_rows())
