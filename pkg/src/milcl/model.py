"""Gated-attention MIL model: forward pass, analytic gradients, checkpoints.

Shapes: a bag is an (N, d) patch matrix ``H``; the attention network holds
``V1``, ``V2`` of shape (D, d) and ``w`` of shape (D,); the classifier holds
``weight`` (C, d) and ``bias`` (C,).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import losses
from .numerics import RngStream, log_softmax, sigmoid, stable_softmax, uniform_init
from .validation import FormatError, check_features


@dataclass
class Bag:
    features: np.ndarray
    label: int
    task: int = 0
    bag_id: str = ""

    def __post_init__(self):
        self.features = check_features(self.features)
        self.label = int(self.label)
        self.task = int(self.task)

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass
class GatedAttention:
    V1: np.ndarray
    V2: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.V1 = np.asarray(self.V1, dtype=np.float64)
        self.V2 = np.asarray(self.V2, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.V1.ndim != 2 or self.V1.shape != self.V2.shape:
            raise ValueError(f"V1 {self.V1.shape} and V2 {self.V2.shape} must be equal 2-d shapes")
        if self.w.shape != (self.V1.shape[0],):
            raise ValueError(f"w must have shape ({self.V1.shape[0]},), got {self.w.shape}")

    @property
    def hidden(self) -> int:
        return self.V1.shape[0]

    @property
    def n_features(self) -> int:
        return self.V1.shape[1]

    def copy(self) -> "GatedAttention":
        return GatedAttention(self.V1.copy(), self.V2.copy(), self.w.copy())


@dataclass
class LinearHead:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"inconsistent head shapes {self.weight.shape}, {self.bias.shape}")
        if self.weight.shape[0] < 1:
            raise ValueError("classifier needs at least one class")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "LinearHead":
        return LinearHead(self.weight.copy(), self.bias.copy())


@dataclass
class MilModel:
    attention: GatedAttention
    classifier: LinearHead

    def __post_init__(self):
        if self.attention.n_features != self.classifier.weight.shape[1]:
            raise ValueError("attention and classifier disagree on the feature dimension")

    @classmethod
    def init(cls, n_features: int, hidden: int, n_classes: int, rng: RngStream) -> "MilModel":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
        V1 = uniform_init(rng, (hidden, n_features), n_features)
        V2 = uniform_init(rng, (hidden, n_features), n_features)
        w = uniform_init(rng, (hidden,), hidden)
        weight = uniform_init(rng, (n_classes, n_features), n_features)
        return cls(GatedAttention(V1, V2, w), LinearHead(weight, np.zeros(n_classes)))

    @property
    def n_features(self) -> int:
        return self.attention.n_features

    @property
    def n_classes(self) -> int:
        return self.classifier.n_classes

    def parameters(self) -> list[np.ndarray]:
        a, c = self.attention, self.classifier
        return [a.V1, a.V2, a.w, c.weight, c.bias]

    def copy(self) -> "MilModel":
        return MilModel(self.attention.copy(), self.classifier.copy())

    def expand(self, n_new: int) -> None:
        self.classifier = expand_head(self.classifier, n_new)


class AttentionOutputs(NamedTuple):
    raw_scores: np.ndarray
    attention: np.ndarray
    bag_feature: np.ndarray


@dataclass
class MilGradients:
    V1: np.ndarray
    V2: np.ndarray
    w: np.ndarray
    weight: np.ndarray
    bias: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.V1, self.V2, self.w, self.weight, self.bias]

    def attention_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in (self.V1, self.V2, self.w))))

    def classifier_norm(self) -> float:
        return float(np.sqrt(np.sum(self.weight**2) + np.sum(self.bias**2)))


def _features_of(bag) -> np.ndarray:
    return bag.features if isinstance(bag, Bag) else np.asarray(bag, dtype=np.float64)


def _attention_forward(H: np.ndarray, theta: GatedAttention):
    if H.ndim != 2 or H.shape[1] != theta.n_features:
        raise ValueError(f"bag has shape {H.shape}, attention expects {theta.n_features} features")
    T = np.tanh(H @ theta.V1.T)
    S = sigmoid(H @ theta.V2.T)
    gated = T * S
    scores = gated @ theta.w
    a = stable_softmax(scores)
    return AttentionOutputs(scores, a, H.T @ a), (T, S, gated)


def forward_attention(bag, theta: GatedAttention) -> AttentionOutputs:
    """Gated attention scores, their softmax, and the attention-pooled bag feature."""
    return _attention_forward(_features_of(bag), theta)[0]


def forward_classifier(z, phi: LinearHead) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (phi.weight.shape[1],):
        raise ValueError(f"bag feature has shape {z.shape}, classifier expects ({phi.weight.shape[1]},)")
    return phi.weight @ z + phi.bias


def predict_logits(bag, model: MilModel) -> np.ndarray:
    return forward_classifier(forward_attention(bag, model.attention).bag_feature, model.classifier)


def predict(bag, theta: GatedAttention, phi: LinearHead) -> int:
    """Argmax class; ties go to the lowest class id."""
    logits = forward_classifier(forward_attention(bag, theta).bag_feature, phi)
    return int(np.argmax(logits))


def expand_head(phi: LinearHead, n_new: int) -> LinearHead:
    """Append ``n_new`` zero-initialised classes; ``n_new == 0`` is the identity."""
    if n_new < 0:
        raise ValueError("cannot shrink the classifier head")
    if n_new == 0:
        return phi.copy()
    d = phi.weight.shape[1]
    return LinearHead(np.vstack([phi.weight, np.zeros((n_new, d))]),
                      np.concatenate([phi.bias, np.zeros(n_new)]))


def pad_head(phi: LinearHead, n_classes: int) -> LinearHead:
    if n_classes < phi.n_classes:
        raise ValueError(f"head has {phi.n_classes} classes, cannot pad to {n_classes}")
    return expand_head(phi, n_classes - phi.n_classes)


def value_and_grad(model: MilModel, bag, label: int, *, attn_target=None, logits_target=None,
                   alpha: float = 0.0, beta: float = 0.0, temperature: float = 1.0):
    """Loss breakdown and exact gradients for one bag.

    Without targets this is plain cross-entropy. With ``attn_target`` (teacher
    raw scores over the same patches) and/or ``logits_target`` (teacher class
    logits, compared over their own length) the sample counts as replay and
    the distillation terms are weighted by ``alpha`` and ``beta``.
    """
    H = _features_of(bag)
    theta, phi = model.attention, model.classifier
    if not 0 <= label < phi.n_classes:
        raise ValueError(f"label {label} out of range for {phi.n_classes} classes")
    out, (T, S, gated) = _attention_forward(H, theta)
    z = out.bag_feature
    logits = phi.weight @ z + phi.bias

    log_p = log_softmax(logits)
    ce = float(-log_p[label])
    d_logits = np.exp(log_p)
    d_logits[label] -= 1.0
    d_scores = np.zeros_like(out.raw_scores)

    is_replay = attn_target is not None or logits_target is not None
    a_kl = l_kl = 0.0
    if attn_target is not None:
        a_kl = losses.attn_kl(attn_target, out.raw_scores, temperature)
        d_scores += alpha * losses.kl_grad_student(attn_target, out.raw_scores, temperature)
    if logits_target is not None:
        logits_target = np.asarray(logits_target, dtype=np.float64)
        c = logits_target.shape[0]
        if c > phi.n_classes:
            raise ValueError("teacher logits longer than the current head")
        l_kl = losses.kl_from_logits(logits_target, logits[:c], temperature)
        d_logits[:c] += beta * losses.kl_grad_student(logits_target, logits[:c], temperature)
    breakdown = losses.combined_loss(ce, a_kl, l_kl, alpha, beta, is_replay)

    a = out.attention
    d_weight = np.outer(d_logits, z)
    d_z = phi.weight.T @ d_logits
    d_a = H @ d_z
    d_scores += a * (d_a - a @ d_a)
    d_w = gated.T @ d_scores
    d_gated = np.outer(d_scores, theta.w)
    d_V1 = (d_gated * S * (1.0 - T * T)).T @ H
    d_V2 = (d_gated * T * S * (1.0 - S)).T @ H
    return breakdown, MilGradients(d_V1, d_V2, d_w, d_weight, d_logits)


def backward(bag, label: int, theta: GatedAttention, phi: LinearHead):
    """Cross-entropy loss and its gradients w.r.t. all five parameter blocks."""
    breakdown, grads = value_and_grad(MilModel(theta, phi), bag, label)
    return breakdown.ce, grads


def numerical_gradients(loss_fn, params: list[np.ndarray], step: float = 1e-4) -> list[np.ndarray]:
    """Central finite differences of ``loss_fn()`` w.r.t. each array in ``params``.

    The arrays are perturbed in place and restored.
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        out.append(g)
    return out


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """max |x - y| / max(|x| + |y|, floor) over all entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


class BinaryGradIdentities(NamedTuple):
    f: float
    z: np.ndarray
    grad_phi: np.ndarray
    grad_a: np.ndarray
    grad_phi_sq: np.ndarray
    grad_a_sq: np.ndarray
    rhs_phi: np.ndarray
    rhs_a: np.ndarray


def binary_loss(H, a, phi, y) -> float:
    """log(1 + exp(-y f)) for the binary analysis model f = phi . (H^T a)."""
    f = float(np.asarray(phi) @ (np.asarray(H).T @ np.asarray(a)))
    return float(np.logaddexp(0.0, -y * f))


def binary_grad_identities(H, a, phi, y) -> BinaryGradIdentities:
    """Chain-rule gradients of the binary analysis model next to their closed forms.

    ``grad_*`` come from differentiating the logistic loss step by step; the
    ``rhs_*`` fields are y^2 sigma(-y f)^2 z_j^2 and y^2 sigma(-y f)^2 (phi . h_i)^2.
    """
    H = np.asarray(H, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if H.ndim != 2 or a.shape != (H.shape[0],) or phi.shape != (H.shape[1],):
        raise ValueError(f"incompatible shapes H {H.shape}, a {a.shape}, phi {phi.shape}")
    if y not in (1, -1):
        raise ValueError("y must be +1 or -1")
    if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-9:
        raise ValueError("attention must be a probability vector")

    z = H.T @ a
    f = float(phi @ z)
    # dL/df = -y e^{-yf} / (1 + e^{-yf}), evaluated in log space
    u = -y * f
    dL_df = -y * np.exp(u - np.logaddexp(0.0, u))
    grad_phi = dL_df * z
    grad_a = dL_df * (H @ phi)

    s = sigmoid(np.array([-y * f]))[0]
    coeff = y * y * s * s
    return BinaryGradIdentities(
        f, z, grad_phi, grad_a, grad_phi**2, grad_a**2, coeff * z**2, coeff * (H @ phi) ** 2,
    )


# checkpoint format: "MILM", u32 version, u32 d, u32 D, u32 C, then
# V1 (D*d), V2 (D*d), w (D), weight (C*d), bias (C) as little-endian f64

CHECKPOINT_MAGIC = b"MILM"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def checkpoint_bytes(model: MilModel) -> bytes:
    a, c = model.attention, model.classifier
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.n_features, a.hidden, c.n_classes)
    return header + b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.parameters())


def model_from_bytes(raw: bytes) -> MilModel:
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated checkpoint: {len(raw)} bytes, header needs {_HEADER.size} (offset 0)")
    magic, version, d, D, C = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    shapes = [(D, d), (D, d), (D,), (C, d), (C,)]
    need = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != need:
        raise FormatError(f"checkpoint length {len(raw)} != expected {need} (offset {min(len(raw), need)})")
    blocks, offset = [], _HEADER.size
    for shape in shapes:
        n = int(np.prod(shape))
        blocks.append(np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape))
        offset += 8 * n
    V1, V2, w, weight, bias = blocks
    return MilModel(GatedAttention(V1, V2, w), LinearHead(weight, bias))


def save_checkpoint(model: MilModel, path, meta: dict | None = None) -> Path:
    """Write the binary checkpoint and a ``.json`` sidecar next to it."""
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    path.with_suffix(".json").write_text(json.dumps(meta or {}, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[MilModel, dict]:
    path = Path(path)
    model = model_from_bytes(path.read_bytes())
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return model, meta
