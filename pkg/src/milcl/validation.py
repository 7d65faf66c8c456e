"""Input validation helpers shared by the functional API and the estimators."""

from __future__ import annotations

import numpy as np


class FormatError(ValueError):
    """A binary or tabular file does not match its declared layout."""


def check_features(X, n_features: int | None = None, name: str = "features") -> np.ndarray:
    """Validate one bag's patch matrix and return it as a float64 (N, d) array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2-d (patches x features) array, got shape {X.shape}")
    if X.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one patch")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {n_features}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_bags(bags, n_features: int | None = None) -> list[np.ndarray]:
    """Accept a sequence of bags (``Bag`` objects or 2-d arrays); return arrays.

    All bags must share the feature dimension.
    """
    if isinstance(bags, np.ndarray) and bags.ndim == 3:
        bags = list(bags)
    bags = list(bags)
    if not bags:
        raise ValueError("at least one bag is required")
    out = []
    for i, bag in enumerate(bags):
        X = getattr(bag, "features", bag)
        X = check_features(X, n_features, name=f"bag {i}")
        n_features = X.shape[1]
        out.append(X)
    return out


def check_labels(y, n_bags: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_bags:
        raise ValueError(f"expected {n_bags} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class ids")
        y = y.astype(np.int64)
    if np.any(y < 0):
        raise ValueError("labels must be non-negative class ids")
    return y.astype(np.int64)


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
