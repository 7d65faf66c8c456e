"""Continual-learning metrics over the lower-triangular accuracy matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AccuracyMatrix:
    """``rows[t][j]`` is the accuracy on task j after session t (0-based, j <= t)."""

    rows: list[list[float]] = field(default_factory=list)
    joint: list[float] | None = None

    def __post_init__(self):
        self.rows = [[float(v) for v in row] for row in self.rows]
        for t, row in enumerate(self.rows):
            if len(row) > t + 1:
                raise ValueError(f"row {t} has {len(row)} entries; at most {t + 1} allowed")
            for v in row:
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"accuracy {v} outside [0, 1]")
        if self.joint is not None:
            self.joint = [float(v) for v in self.joint]

    @property
    def n_tasks(self) -> int:
        return len(self.rows)

    def add_row(self, row) -> None:
        self.rows.append([float(v) for v in row])
        self.__post_init__()

    def __getitem__(self, key):
        t, j = key
        if j > t:
            raise IndexError("accuracy matrix is lower-triangular")
        return self.rows[t][j]

    def diagonal(self) -> np.ndarray:
        return np.array([self.rows[t][t] for t in range(self.n_tasks)])

    def to_array(self) -> np.ndarray:
        """Dense T x T array with NaN above the diagonal."""
        T = self.n_tasks
        out = np.full((T, T), np.nan)
        for t, row in enumerate(self.rows):
            out[t, : len(row)] = row
        return out

    def to_dict(self) -> dict:
        return {"rows": self.rows, "joint": self.joint}

    @classmethod
    def from_dict(cls, data: dict) -> "AccuracyMatrix":
        return cls(data["rows"], data.get("joint"))


def _check_complete(m: AccuracyMatrix) -> None:
    if m.n_tasks == 0:
        raise ValueError("empty accuracy matrix")
    for t, row in enumerate(m.rows):
        if len(row) != t + 1:
            raise ValueError(f"row {t} is incomplete ({len(row)} of {t + 1} entries)")


def aacc(m: AccuracyMatrix) -> float:
    """Mean final-session accuracy over all tasks."""
    if m.n_tasks == 0 or len(m.rows[-1]) != m.n_tasks:
        raise ValueError("final row of the accuracy matrix is incomplete")
    return float(np.mean(m.rows[-1]))


def bwt(m: AccuracyMatrix) -> float:
    """Backward transfer; negative values mean forgetting."""
    if m.n_tasks < 2:
        raise ValueError("backward transfer needs at least two tasks")
    _check_complete(m)
    T = m.n_tasks
    return float(np.mean([m.rows[T - 1][j] - m.rows[j][j] for j in range(T - 1)]))


def im_per_task(m: AccuracyMatrix) -> np.ndarray:
    if m.joint is None or len(m.joint) != m.n_tasks:
        raise ValueError("intransigence needs a joint-training accuracy for every task")
    _check_complete(m)
    return np.asarray(m.joint) - m.diagonal()


def im(m: AccuracyMatrix) -> float:
    """Intransigence: mean gap between joint training and just-trained accuracy."""
    return float(np.mean(im_per_task(m)))


def summary(m: AccuracyMatrix) -> dict:
    out = {"aacc": aacc(m)}
    if m.n_tasks >= 2:
        out["bwt"] = bwt(m)
    if m.joint is not None:
        out["im"] = im(m)
    return out
