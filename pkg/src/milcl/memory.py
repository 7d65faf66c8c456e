"""Pseudo-bag memory pool.

Bags are distilled into a few attention-selected patches plus the teacher's
outputs on them, then kept in per-class reservoirs of equal capacity.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import RngStream
from .validation import FormatError

STRATEGIES = ("Random", "Max", "MaxMin", "MaxRand", "MaxMinRand")


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "MaxMinRand"
    K: int = 256

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose one of {STRATEGIES}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K!r}")

    def split(self) -> tuple[int, int, int]:
        """(n_top, n_bottom, n_random) for a bag with more than K patches."""
        K = self.K
        if self.kind == "Random":
            return 0, 0, K
        if self.kind == "Max":
            return K, 0, 0
        if self.kind == "MaxMin":
            return math.ceil(K / 2), K // 2, 0
        if self.kind == "MaxRand":
            return math.ceil(K / 2), 0, K // 2
        top = math.ceil(K / 4)
        bottom = min(math.ceil(K / 4), K - top)
        return top, bottom, K - top - bottom


@dataclass
class MemoryEntry:
    features: np.ndarray
    label: int
    task: int
    teacher_attn_logits: np.ndarray
    teacher_class_logits: np.ndarray
    bag_id: str = ""

    def __post_init__(self):
        if self.features.shape[0] != self.teacher_attn_logits.shape[0]:
            raise ValueError("teacher attention scores must align with the stored patches")


def select_indices(attention, strategy: SelectionStrategy, rng: RngStream) -> np.ndarray:
    """Indices of the patches kept in a pseudo-bag, ascending.

    Equal attention values rank the lower patch index first, both for the
    top and for the bottom selections.
    """
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("attention must be a non-empty vector")
    N = a.size
    if strategy.K >= N:
        return np.arange(N)
    n_top, n_bottom, n_rand = strategy.split()
    descending = np.argsort(-a, kind="stable")
    chosen = np.zeros(N, dtype=bool)
    chosen[descending[:n_top]] = True
    if n_bottom:
        ascending = np.argsort(a, kind="stable")
        bottom = ascending[~chosen[ascending]][:n_bottom]
        chosen[bottom] = True
    if n_rand:
        rest = np.flatnonzero(~chosen)
        chosen[rng.choice(rest, n_rand)] = True
    return np.flatnonzero(chosen)


def distill(bag, teacher_outputs, teacher_logits, strategy: SelectionStrategy,
            rng: RngStream) -> MemoryEntry:
    """Build a pseudo-bag from ``bag`` using the teacher's attention on it.

    The stored attention payload is the pre-softmax scores of the kept
    patches, so replay compares teacher and student over the same support.
    """
    idx = select_indices(teacher_outputs.attention, strategy, rng)
    return MemoryEntry(
        features=bag.features[idx].copy(),
        label=bag.label,
        task=bag.task,
        teacher_attn_logits=np.array(teacher_outputs.raw_scores[idx], dtype=np.float64),
        teacher_class_logits=np.array(teacher_logits, dtype=np.float64),
        bag_id=bag.bag_id,
    )


def pseudo_bag_feature(features, attention, indices) -> np.ndarray:
    """Bag feature rebuilt from the kept patches with their original (frozen) weights."""
    idx = np.asarray(indices)
    return np.asarray(features)[idx].T @ np.asarray(attention)[idx]


class Reservoir:
    """Uniform reservoir sample (Algorithm R) of a stream."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.items: list = []
        self.seen = 0

    def __len__(self):
        return len(self.items)

    def offer(self, item, rng: RngStream) -> None:
        self.seen += 1
        if len(self.items) < self.capacity:
            self.items.append(item)
        elif self.capacity:
            j = min(int(rng.uniform01() * self.seen), self.seen - 1)
            if j < self.capacity:
                self.items[j] = item

    def offer_many(self, items, rng: RngStream) -> None:
        """Same result and same draws as calling :meth:`offer` on each item in turn."""
        items = list(items)
        i = 0
        while i < len(items) and len(self.items) < self.capacity:
            self.items.append(items[i])
            self.seen += 1
            i += 1
        rest = items[i:]
        if not rest:
            return
        if not self.capacity:
            self.seen += len(rest)
            return
        seen = self.seen + 1 + np.arange(len(rest))
        slots = np.minimum((rng.uniform(len(rest)) * seen).astype(np.int64), seen - 1)
        self.seen += len(rest)
        for k in np.flatnonzero(slots < self.capacity):
            self.items[slots[k]] = rest[k]

    def shrink(self, capacity: int, rng: RngStream) -> None:
        """Lower the capacity, evicting uniformly at random; kept items keep their order."""
        self.capacity = capacity
        if len(self.items) > capacity:
            keep = np.sort(rng.choice(np.arange(len(self.items)), capacity))
            self.items = [self.items[k] for k in keep]


class PseudoBagPool:
    """Class-balanced memory: one reservoir per class, capacity = budget // classes."""

    def __init__(self, budget: int, rng: RngStream):
        if budget < 0:
            raise ValueError("budget must be non-negative")
        self.budget = budget
        self.rng = rng
        self.buckets: dict[int, Reservoir] = {}

    @property
    def capacity(self) -> int:
        return self.budget // len(self.buckets) if self.buckets else self.budget

    def __len__(self):
        return sum(len(b) for b in self.buckets.values())

    def register_class(self, label: int) -> None:
        if label in self.buckets:
            return
        self.buckets[label] = Reservoir(0)
        cap = self.capacity
        for key in sorted(self.buckets):
            self.buckets[key].shrink(cap, self.rng)

    def insert(self, entry: MemoryEntry) -> None:
        self.register_class(entry.label)
        self.buckets[entry.label].offer(entry, self.rng)

    def entries(self) -> list[MemoryEntry]:
        return [e for key in sorted(self.buckets) for e in self.buckets[key].items]

    def seen_counts(self) -> dict[int, int]:
        return {key: self.buckets[key].seen for key in sorted(self.buckets)}

    def iterate(self, rng: RngStream) -> list[MemoryEntry]:
        entries = self.entries()
        if not entries:
            return []
        return [entries[k] for k in rng.permutation(len(entries))]


def pool_insert(pool: PseudoBagPool, entry: MemoryEntry) -> PseudoBagPool:
    pool.insert(entry)
    return pool


def pool_iterate(pool: PseudoBagPool, rng: RngStream) -> list[MemoryEntry]:
    return pool.iterate(rng)


# pool checkpoint: "MILP", u32 version, u32 count, then per entry
# i32 label, i32 task, u32 K', u32 d, u32 C, features (K'*d), attn (K'), logits (C)

POOL_MAGIC = b"MILP"
POOL_VERSION = 1
_POOL_HEADER = struct.Struct("<4sII")
_ENTRY_HEADER = struct.Struct("<iiIII")


def save_pool(pool: PseudoBagPool, path, meta: dict | None = None) -> Path:
    path = Path(path)
    entries = pool.entries()
    chunks = [_POOL_HEADER.pack(POOL_MAGIC, POOL_VERSION, len(entries))]
    for e in entries:
        k, d = e.features.shape
        chunks.append(_ENTRY_HEADER.pack(e.label, e.task, k, d, e.teacher_class_logits.shape[0]))
        for block in (e.features, e.teacher_attn_logits, e.teacher_class_logits):
            chunks.append(np.ascontiguousarray(block, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    sidecar = dict(meta or {})
    sidecar.update(
        budget=pool.budget,
        capacity=pool.capacity,
        seen_counts={str(k): v for k, v in pool.seen_counts().items()},
        bag_ids=[e.bag_id for e in entries],
    )
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_pool_entries(path) -> list[MemoryEntry]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _POOL_HEADER.size:
        raise FormatError(f"truncated pool file at offset {len(raw)}")
    magic, version, count = _POOL_HEADER.unpack_from(raw, 0)
    if magic != POOL_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != POOL_VERSION:
        raise FormatError(f"unsupported pool version {version} at offset 4")
    sidecar = path.with_suffix(".json")
    bag_ids = json.loads(sidecar.read_text()).get("bag_ids", []) if sidecar.exists() else []
    offset = _POOL_HEADER.size
    entries = []
    for i in range(count):
        if offset + _ENTRY_HEADER.size > len(raw):
            raise FormatError(f"truncated entry header at offset {offset}")
        label, task, k, d, c = _ENTRY_HEADER.unpack_from(raw, offset)
        offset += _ENTRY_HEADER.size
        need = 8 * (k * d + k + c)
        if offset + need > len(raw):
            raise FormatError(f"truncated entry payload at offset {offset}")
        flat = np.frombuffer(raw, dtype="<f8", count=k * d + k + c, offset=offset).astype(np.float64)
        offset += need
        entries.append(MemoryEntry(
            features=flat[: k * d].reshape(k, d),
            label=label,
            task=task,
            teacher_attn_logits=flat[k * d: k * d + k],
            teacher_class_logits=flat[k * d + k:],
            bag_id=bag_ids[i] if i < len(bag_ids) else "",
        ))
    if offset != len(raw):
        raise FormatError(f"trailing bytes after offset {offset}")
    return entries
