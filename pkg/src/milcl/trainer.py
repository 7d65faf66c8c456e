"""Class-incremental training loop, baselines and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .losses import cross_entropy
from .memory import PseudoBagPool, SelectionStrategy, distill, save_pool
from .metrics import AccuracyMatrix
from .model import (
    Bag, MilModel, forward_attention, forward_classifier, predict_logits, save_checkpoint, value_and_grad,
)
from .numerics import Adam, RngStream

logger = logging.getLogger(__name__)

METHODS = ("finetune", "er", "ours", "joint")

# spawn keys for independent random streams derived from the run seed
_INIT_KEY, _POOL_KEY = 1, 2
_SHUFFLE_KEY, _DISTILL_KEY, _INSERT_KEY = 100, 200, 300


@dataclass
class TrainConfig:
    method: str = "ours"
    alpha: float = 1.0
    beta: float = 1.0
    temperature: float = 1.0
    strategy: str = "MaxMinRand"
    K: int = 256
    pool_budget: int = 30
    epochs: int = 50
    patience: int = 10
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    hidden: int = 128
    seed: int = 0
    insert_once_per_bag: bool = True
    refresh_teacher_at_task_end: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.patience <= self.epochs:
            raise ValueError("patience must lie in [0, epochs]")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.pool_budget < 0:
            raise ValueError("pool_budget must be non-negative")
        SelectionStrategy(self.strategy, self.K)

    @property
    def selection(self) -> SelectionStrategy:
        return SelectionStrategy(self.strategy, self.K)

    @property
    def uses_pool(self) -> bool:
        return self.method in ("er", "ours")

    @property
    def loss_weights(self) -> tuple[float, float]:
        return (self.alpha, self.beta) if self.method == "ours" else (0.0, 0.0)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class TaskDataset:
    train: list[Bag]
    val: list[Bag]
    test: list[Bag]
    classes: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.classes:
            self.classes = tuple(sorted({b.label for b in self.train + self.val + self.test}))
        self.classes = tuple(int(c) for c in self.classes)
        allowed = set(self.classes)
        for b in self.train + self.val + self.test:
            if b.label not in allowed:
                raise ValueError(f"bag {b.bag_id!r} has label {b.label} outside task classes {self.classes}")


@dataclass
class TaskStream:
    tasks: list[TaskDataset]

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("task stream is empty")
        seen: set[int] = set()
        for t, task in enumerate(self.tasks):
            overlap = seen & set(task.classes)
            if overlap:
                raise ValueError(f"task {t} reuses classes {sorted(overlap)}; class sets must be disjoint")
            seen |= set(task.classes)
        dims = {b.n_features for task in self.tasks for b in task.train + task.val + task.test}
        if len(dims) > 1:
            raise ValueError(f"bags disagree on feature dimension: {sorted(dims)}")

    def __len__(self):
        return len(self.tasks)

    @property
    def n_features(self) -> int:
        return next(b.n_features for task in self.tasks for b in task.train + task.test)

    def n_classes_through(self, t: int) -> int:
        return max(c for task in self.tasks[: t + 1] for c in task.classes) + 1

    @property
    def n_classes(self) -> int:
        return self.n_classes_through(len(self.tasks) - 1)


@dataclass
class StepRecord:
    step: int
    session: int
    ce: float
    attn_kl: float
    logits_kl: float
    total: float
    is_replay: bool
    grad_attention: float
    grad_classifier: float


@dataclass
class SessionLog:
    session: int
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    checkpoint: str | None = None
    pool_checkpoint: str | None = None


def evaluate(model: MilModel, bags, label_space=None) -> float:
    """Balanced accuracy (mean per-class recall) over the classes present in ``bags``.

    ``label_space`` restricts the argmax to the listed classes; by default every
    class of the head competes.
    """
    bags = list(bags)
    if not bags:
        raise ValueError("cannot evaluate on an empty bag set")
    preds = predict_many(model, bags, label_space)
    labels = np.array([b.label for b in bags])
    return balanced_accuracy(labels, preds)


def balanced_accuracy(labels, preds) -> float:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    recalls = [np.mean(preds[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(recalls))


def predict_many(model: MilModel, bags, label_space=None) -> np.ndarray:
    if label_space is None:
        allowed = None
    else:
        allowed = np.asarray(sorted(label_space))
    out = []
    for b in bags:
        z = forward_attention(b, model.attention).bag_feature
        logits = forward_classifier(z, model.classifier)
        if allowed is None:
            out.append(int(np.argmax(logits)))
        else:
            out.append(int(allowed[np.argmax(logits[allowed])]))
    return np.array(out, dtype=np.int64)


def _validation_loss(model: MilModel, bags) -> float:
    return float(np.mean([cross_entropy(predict_logits(b, model), b.label) for b in bags]))


def _replay_step(model, entry, alpha, beta, temperature):
    return value_and_grad(
        model, entry.features, entry.label,
        attn_target=entry.teacher_attn_logits, logits_target=entry.teacher_class_logits,
        alpha=alpha, beta=beta, temperature=temperature,
    )


def train_task(model: MilModel, task: TaskDataset, pool: PseudoBagPool | None, config: TrainConfig,
               rng: RngStream, session: int = 0, step_offset: int = 0):
    """Train on one task with replay from ``pool``; returns ``(model, pool, log)``.

    Current-task bags get cross-entropy only. Replayed pseudo-bags add the
    attention and logit distillation terms against their stored teacher
    payloads. The model is updated in place and ends at the best-validation
    weights.
    """
    if not task.train:
        raise ValueError("task has no training bags")
    if max(task.classes) >= model.n_classes:
        raise ValueError("expand the classifier head to cover the task classes first")
    use_pool = pool is not None and config.uses_pool
    alpha, beta = config.loss_weights
    optimizer = Adam(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
    shuffle_rng = rng.spawn(_SHUFFLE_KEY + session)
    distill_rng = rng.spawn(_DISTILL_KEY + session)
    strategy = config.selection

    log = SessionLog(session=session)
    step = step_offset
    best = (-1.0, np.inf)
    best_model = model.copy()
    stale = 0

    for epoch in range(config.epochs):
        current = set(task.classes)
        replay = [e for e in pool.entries() if e.label not in current] if use_pool else []
        n_cur = len(task.train)
        for k in shuffle_rng.permutation(n_cur + len(replay)):
            if k < n_cur:
                bag = task.train[k]
                breakdown, grads = value_and_grad(model, bag, bag.label)
            else:
                breakdown, grads = _replay_step(model, replay[k - n_cur], alpha, beta, config.temperature)
            optimizer.step(model.parameters(), grads.arrays())
            if use_pool and k < n_cur and not config.insert_once_per_bag:
                out = forward_attention(bag, model.attention)
                logits = forward_classifier(out.bag_feature, model.classifier)
                pool.insert(distill(bag, out, logits, strategy, distill_rng))
            step += 1
            log.steps.append(StepRecord(
                step, session, breakdown.ce, breakdown.attn_kl, breakdown.logits_kl, breakdown.total,
                breakdown.is_replay, grads.attention_norm(), grads.classifier_norm(),
            ))

        if task.val:
            acc = evaluate(model, task.val)
            loss = _validation_loss(model, task.val)
        else:
            acc, loss = 0.0, 0.0
        log.epochs.append({"epoch": epoch, "val_acc": acc, "val_loss": loss})
        # ties on accuracy are broken by validation loss
        if acc > best[0] or (acc == best[0] and loss < best[1]):
            best = (acc, loss)
            best_model = model.copy()
            log.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if task.val and stale >= config.patience:
                logger.debug("session %d: early stop at epoch %d", session, epoch)
                break

    restored = best_model if task.val else model
    model.attention, model.classifier = restored.attention, restored.classifier

    if use_pool:
        if config.insert_once_per_bag:
            insert_rng = rng.spawn(_INSERT_KEY + session)
            for k in insert_rng.permutation(len(task.train)):
                bag = task.train[k]
                out = forward_attention(bag, model.attention)
                logits = forward_classifier(out.bag_feature, model.classifier)
                pool.insert(distill(bag, out, logits, strategy, distill_rng))
        if config.refresh_teacher_at_task_end:
            refresh_teacher(pool, model, task.classes)
    return model, pool, log


def refresh_teacher(pool: PseudoBagPool, model: MilModel, classes) -> None:
    """Recompute the payloads of entries labelled with ``classes`` using ``model``."""
    classes = set(classes)
    for entry in pool.entries():
        if entry.label in classes:
            out = forward_attention(entry.features, model.attention)
            entry.teacher_attn_logits = out.raw_scores.copy()
            entry.teacher_class_logits = forward_classifier(out.bag_feature, model.classifier)


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    models: list[MilModel]
    logs: list[SessionLog]
    pool: PseudoBagPool | None = None


class ContinualLearner:
    """Training state carried from one class-incremental session to the next.

    Each call to :meth:`learn` is one session: the head grows to cover the
    task's classes, the model trains with replay from the pool, and a copy of
    the resulting model is kept.
    """

    def __init__(self, n_features: int, config: TrainConfig):
        if config.method == "joint":
            raise ValueError("use run_joint for joint training")
        self.config = config
        self.n_features = n_features
        self.rng = RngStream(config.seed)
        self.model: MilModel | None = None
        self.pool = PseudoBagPool(config.pool_budget, self.rng.spawn(_POOL_KEY)) if config.uses_pool else None
        self.models: list[MilModel] = []
        self.logs: list[SessionLog] = []
        self.step = 0

    @property
    def session(self) -> int:
        return len(self.models)

    def learn(self, task: TaskDataset) -> SessionLog:
        n_classes = max(task.classes) + 1
        if self.model is None:
            self.model = MilModel.init(self.n_features, self.config.hidden, n_classes, self.rng.spawn(_INIT_KEY))
        elif n_classes > self.model.n_classes:
            self.model.expand(n_classes - self.model.n_classes)
        t = self.session
        self.model, self.pool, log = train_task(self.model, task, self.pool, self.config, self.rng,
                                                session=t, step_offset=self.step)
        self.step = log.steps[-1].step if log.steps else self.step
        self.models.append(self.model.copy())
        self.logs.append(log)
        return log


def run_cl(stream: TaskStream, config: TrainConfig, out_dir=None) -> RunResult:
    """Sequential class-incremental training over ``stream``.

    After session t every task's test set is scored over all classes seen so
    far, filling row t of the accuracy matrix.
    """
    learner = ContinualLearner(stream.n_features, config)
    matrix = AccuracyMatrix()
    for t, task in enumerate(stream.tasks):
        log = learner.learn(task)
        snapshot = learner.models[-1]
        matrix.add_row([evaluate(snapshot, stream.tasks[j].test) for j in range(t + 1)])
        logger.info("session %d: %s", t, np.round(matrix.rows[-1], 4).tolist())
        if out_dir is not None:
            _persist_session(Path(out_dir), t, snapshot, learner.pool, log, config)
    return RunResult(matrix, learner.models, learner.logs, learner.pool)


def run_joint(stream: TaskStream, config: TrainConfig, out_dir=None) -> RunResult:
    """Train once on the union of all tasks with the full head.

    Returns a one-row result whose row holds the per-task joint accuracies.
    """
    merged = TaskDataset(
        train=[b for t in stream.tasks for b in t.train],
        val=[b for t in stream.tasks for b in t.val],
        test=[b for t in stream.tasks for b in t.test],
        classes=tuple(c for t in stream.tasks for c in t.classes),
    )
    rng = RngStream(config.seed)
    model = MilModel.init(stream.n_features, config.hidden, stream.n_classes, rng.spawn(_INIT_KEY))
    model, _, log = train_task(model, merged, None, config, rng, session=0)
    joint = [evaluate(model, task.test) for task in stream.tasks]
    matrix = AccuracyMatrix(joint=joint)
    if out_dir is not None:
        _persist_session(Path(out_dir), 0, model, None, log, config)
    return RunResult(matrix, [model], [log], None)


def _persist_session(out_dir: Path, t: int, model: MilModel, pool, log: SessionLog, config: TrainConfig):
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"seed": config.seed, "session": t, "config_digest": config.digest(), "method": config.method}
    ckpt = out_dir / f"session_{t + 1}.milm"
    save_checkpoint(model, ckpt, meta)
    log.checkpoint = ckpt.name
    if pool is not None:
        pool_path = out_dir / f"pool_session_{t + 1}.milp"
        save_pool(pool, pool_path, meta)
        log.pool_checkpoint = pool_path.name
