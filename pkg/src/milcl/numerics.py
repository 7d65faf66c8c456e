"""Small float64 numerical substrate: activations, softmax, Adam, seeded RNG."""

from __future__ import annotations

import numpy as np

#: Identifier of the bit generator behind :class:`RngStream`.
RNG_ALGORITHM = "numpy-philox4x64-10"


def as_float_array(x, name: str = "array", ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # two-branch form avoids exp overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores must be a non-empty vector")
    shifted = scores - scores.max()
    return shifted - np.log(np.exp(shifted).sum())


def stable_softmax(scores) -> np.ndarray:
    """Softmax with the max-shift trick.

    Finite for any finite input; ``stable_softmax(x + c) == stable_softmax(x)``
    up to rounding.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores must be a non-empty vector")
    e = np.exp(scores - scores.max())
    return e / e.sum()


class Adam:
    """Adam with decoupled weight decay, updating arrays in place.

    ``step`` takes two equal-length sequences of arrays; each parameter array
    is modified in place and also returned.
    """

    def __init__(self, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-5):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params, grads):
        params = list(params)
        grads = list(grads)
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for p, g in zip(params, grads):
            if np.shape(p) != np.shape(g):
                raise ValueError(f"shape mismatch: param {np.shape(p)} vs grad {np.shape(g)}")
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        elif len(self.m) != len(params) or any(m.shape != p.shape for m, p in zip(self.m, params)):
            raise ValueError("parameter shapes changed since the first step")

        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params


def adam_step(state: Adam, params, grads) -> np.ndarray:
    """Functional wrapper: one Adam update on a flat parameter vector."""
    params = np.array(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    state.step([params], [grads])
    return params


class RngStream:
    """Seeded random stream over numpy's Philox-4x64-10 counter-based generator.

    Scalar and vector draws consume the same underlying sequence, so
    ``uniform(n)`` yields exactly the values of ``n`` calls to ``uniform01()``.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self.generator = np.random.Generator(np.random.Philox(seed))

    def uniform01(self) -> float:
        return float(self.generator.random())

    def uniform(self, size: int) -> np.ndarray:
        return self.generator.random(size)

    def standard_normal(self, size=None):
        if size is None:
            return float(self.generator.standard_normal())
        return self.generator.standard_normal(size)

    def index_below(self, n: int) -> int:
        if n < 1:
            raise ValueError("index_below requires n >= 1")
        return int(self.generator.integers(n))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, pool, size: int) -> np.ndarray:
        """``size`` distinct elements of ``pool``, uniformly without replacement."""
        return self.generator.choice(np.asarray(pool), size=size, replace=False)

    def spawn(self, key: int) -> "RngStream":
        """Independent child stream, a pure function of (seed, key)."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0]))


def rng_draw(stream: RngStream, kind: str, n: int | None = None):
    if kind == "uniform01":
        return stream.uniform01()
    if kind == "standard-normal":
        return stream.standard_normal()
    if kind == "index-below":
        if n is None:
            raise ValueError("index-below requires n")
        return stream.index_below(n)
    raise ValueError(f"unknown draw kind {kind!r}")


def uniform_init(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.generator.uniform(-bound, bound, size=shape)
