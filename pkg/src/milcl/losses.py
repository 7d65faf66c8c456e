"""Cross-entropy, KL distillation terms and the combined replay objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import log_softmax, stable_softmax


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    attn_kl: float
    logits_kl: float
    total: float
    alpha: float
    beta: float
    is_replay: bool


def cross_entropy(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    return float(-log_softmax(logits)[label])


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")


def kl_from_logits(teacher_logits, student_logits, temperature: float = 1.0) -> float:
    """KL(softmax(teacher / T) || softmax(student / T)), teacher first."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.ndim != 1 or t.shape != s.shape or t.size == 0:
        raise ValueError(f"logit vectors must be non-empty and equal length, got {t.shape} and {s.shape}")
    _check_temperature(temperature)
    log_p = log_softmax(t / temperature)
    log_q = log_softmax(s / temperature)
    p = np.exp(log_p)
    # clip tiny negative rounding; KL is non-negative
    return max(float(np.dot(p, log_p - log_q)), 0.0)


def kl_grad_student(teacher_logits, student_logits, temperature: float = 1.0) -> np.ndarray:
    """Gradient of :func:`kl_from_logits` with respect to the student logits."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    return (stable_softmax(s / temperature) - stable_softmax(t / temperature)) / temperature


def attn_kl(teacher_scores, student_scores, temperature: float = 1.0) -> float:
    """Attention distillation over the K stored patches.

    Both arguments are pre-softmax attention scores over the same patches in
    the same order; each is normalised over that support only.
    """
    t = np.asarray(teacher_scores, dtype=np.float64)
    s = np.asarray(student_scores, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"attention supports differ: teacher {t.shape}, student {s.shape}")
    return kl_from_logits(t, s, temperature)


def combined_loss(ce: float, attn: float, logits: float, alpha: float, beta: float,
                  is_replay: bool) -> LossBreakdown:
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    if not is_replay:
        return LossBreakdown(ce, 0.0, 0.0, ce, alpha, beta, False)
    return LossBreakdown(ce, attn, logits, ce + alpha * attn + beta * logits, alpha, beta, True)
