"""scikit-learn style wrappers around the bag classifier and the continual learner.

``X`` is a sequence of bags, each an ``(N_i, d)`` array of patch features;
``y`` holds one label per bag.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .model import Bag, predict_logits
from .numerics import stable_softmax
from .trainer import ContinualLearner, TaskDataset, TaskStream, TrainConfig, run_joint
from .validation import check_bags


def _labels(y, n_bags: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_bags:
        raise ValueError(f"expected {n_bags} labels, got shape {y.shape}")
    return y


def _to_bags(X, y, n_features, encode):
    arrays = check_bags(X, n_features)
    labels = _labels(y, len(arrays))
    unknown = set(labels.tolist()) - set(encode)
    if unknown:
        raise ValueError(f"labels {sorted(unknown)} are not among the classes of this session")
    return [Bag(a, encode[v], 0, f"bag{i}") for i, (a, v) in enumerate(zip(arrays, labels.tolist()))]


class _BagClassifierBase(BaseEstimator, ClassifierMixin):

    def _train_config(self, **extra) -> TrainConfig:
        params = {k: v for k, v in self.get_params().items() if k in TrainConfig.__dataclass_fields__}
        params["patience"] = min(params["patience"], params["epochs"])
        return TrainConfig(**{**params, **extra})

    def _models(self):
        raise NotImplementedError

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "classes_")
        model = self._models()
        bags = check_bags(X, self.n_features_in_)
        return np.vstack([predict_logits(b, model) for b in bags])

    def predict_proba(self, X) -> np.ndarray:
        return np.vstack([stable_softmax(row) for row in self.decision_function(X)])

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        # argmax keeps the lowest class id on exact ties
        return np.asarray(self.classes_)[np.argmax(scores, axis=1)]


class MILClassifier(_BagClassifierBase):
    """Gated-attention bag classifier trained on all classes at once.

    With ``validation_fraction > 0`` a seeded slice of the training bags is
    held out for early stopping; otherwise all ``epochs`` run.
    """

    def __init__(self, hidden=128, lr=1e-3, epochs=50, patience=10, weight_decay=1e-5,
                 validation_fraction=0.0, seed=0):
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.patience = patience
        self.weight_decay = weight_decay
        self.validation_fraction = validation_fraction
        self.seed = seed

    def fit(self, X, y):
        labels = _labels(y, len(X))
        self.classes_ = np.unique(labels)
        encode = {c: i for i, c in enumerate(self.classes_.tolist())}
        bags = _to_bags(X, labels, None, encode)
        self.n_features_in_ = bags[0].features.shape[1]
        n_val = int(round(self.validation_fraction * len(bags)))
        order = np.random.default_rng(self.seed).permutation(len(bags))
        val = [bags[i] for i in order[:n_val]]
        train = [bags[i] for i in order[n_val:]]
        task = TaskDataset(train, val, val or train, tuple(range(len(self.classes_))))
        config = self._train_config(method="joint")
        self.model_ = run_joint(TaskStream([task]), config).models[0]
        return self

    def _models(self):
        return self.model_


class ContinualMILClassifier(_BagClassifierBase):
    """Class-incremental learner; every :meth:`partial_fit` call is one session.

    Each session must bring only labels never seen before. ``method`` picks
    fine-tuning, plain replay (``"er"``) or replay with attention and logit
    distillation (``"ours"``).
    """

    def __init__(self, method="ours", alpha=1.0, beta=1.0, temperature=1.0, strategy="MaxMinRand", K=32,
                 pool_budget=30, hidden=128, lr=1e-3, epochs=50, patience=10, weight_decay=1e-5, seed=0):
        self.method = method
        self.alpha = alpha
        self.beta = beta
        self.temperature = temperature
        self.strategy = strategy
        self.K = K
        self.pool_budget = pool_budget
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.patience = patience
        self.weight_decay = weight_decay
        self.seed = seed

    def partial_fit(self, X, y, X_val=None, y_val=None):
        labels = _labels(y, len(X))
        if not hasattr(self, "learner_"):
            d = check_bags(X)[0].shape[1]
            self.classes_ = np.array([], dtype=labels.dtype)
            self.learner_ = ContinualLearner(d, self._train_config())
            self.n_features_in_ = d
        new = np.unique(labels)
        repeated = set(self.classes_.tolist()) & set(new.tolist())
        if repeated:
            raise ValueError(f"labels {sorted(repeated)} were already learned in an earlier session")
        self.classes_ = np.concatenate([self.classes_, new])
        encode = {c: i for i, c in enumerate(self.classes_.tolist())}
        train = _to_bags(X, labels, self.n_features_in_, encode)
        val = _to_bags(X_val, y_val, self.n_features_in_, encode) if X_val is not None else []
        task = TaskDataset(train, val, val or train, tuple(encode[c] for c in new.tolist()))
        self.learner_.learn(task)
        return self

    def fit(self, X, y, X_val=None, y_val=None):
        """Single-session fit; discards any earlier sessions."""
        if hasattr(self, "learner_"):
            del self.learner_
        return self.partial_fit(X, y, X_val, y_val)

    def _models(self):
        return self.learner_.model
