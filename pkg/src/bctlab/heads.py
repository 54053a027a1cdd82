"""Classifier heads and the losses built on them.

Every loss returns a :class:`LossValue` holding the scalar loss (batch mean)
and gradients keyed by what they are taken with respect to. Losses that
involve a frozen old model only ever return gradients for the new
embeddings; the old head is read, never written.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .nncore import (
    DimensionError,
    EmbeddingModel,
    l2norm_backward,
    l2norm_forward,
)

VARIANTS = ("softmax", "norm_softmax", "cosine_margin")


class UnresolvableClassError(KeyError):
    """A label has no column in the classifier."""


@dataclass
class ClassifierHead:
    """Linear classifier over embeddings.

    ``weights`` is ``K x N``: one column per class, in the order given by
    ``class_ids``. ``softmax`` computes ``z W + b``; the two normalized
    variants compute ``scale * cos`` between the normalized embedding and
    normalized class columns, and ``cosine_margin`` subtracts ``margin``
    from the target cosine when labels are given.
    """

    variant: str
    weights: np.ndarray
    class_ids: list[int]
    bias: Optional[np.ndarray] = None
    scale: float = 16.0
    margin: float = 0.25
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown head variant {self.variant!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] != len(self.class_ids):
            raise DimensionError("weights must be K x N with N == len(class_ids)")
        self.class_ids = [int(c) for c in self.class_ids]
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("duplicate class ids in head")
        if self.variant == "softmax":
            self.bias = (np.zeros(self.num_classes) if self.bias is None
                         else np.asarray(self.bias, dtype=np.float64).reshape(-1))
        else:
            self.bias = None
            if self.scale <= 0:
                raise ValueError("scale must be > 0")
        if self.variant == "cosine_margin" and not 0 <= self.margin < 1:
            raise ValueError("margin must lie in [0, 1)")
        self._index = {c: j for j, c in enumerate(self.class_ids)}

    @classmethod
    def init(cls, variant: str, embed_dim: int, class_ids: Sequence[int], rng: np.random.Generator,
             scale: float = 16.0, margin: float = 0.25) -> "ClassifierHead":
        w = rng.standard_normal((embed_dim, len(class_ids))) / np.sqrt(embed_dim)
        return cls(variant, w, list(class_ids), scale=scale, margin=margin)

    @property
    def embed_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def normalized(self) -> bool:
        return self.variant != "softmax"

    def has_class(self, c: int) -> bool:
        return int(c) in self._index

    def columns(self, labels) -> np.ndarray:
        try:
            return np.array([self._index[int(c)] for c in np.asarray(labels).reshape(-1)], dtype=np.int64)
        except KeyError as e:
            raise UnresolvableClassError(f"class {e.args[0]} has no column in this head") from None

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias] if self.variant == "softmax" else [self.weights]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.variant, self.weights.copy(), list(self.class_ids),
                              None if self.bias is None else self.bias.copy(),
                              self.scale, self.margin)


@dataclass
class LossValue:
    loss: float
    grads: dict[str, np.ndarray]


@dataclass
class _HeadCache:
    z: np.ndarray
    zhat: Optional[np.ndarray] = None
    what: Optional[np.ndarray] = None


def _check_embed(head: ClassifierHead, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.shape[1] != head.embed_dim:
        raise DimensionError(f"embedding dim {z.shape[1]} != head dim {head.embed_dim}")
    return z


def head_forward(head: ClassifierHead, embeddings, labels=None, use_margin: bool = True):
    """Logits and a cache for :func:`head_backward`.

    ``labels`` are class ids; they only matter for the cosine-margin variant,
    where the target cosine is reduced by the margin.
    """
    z = _check_embed(head, embeddings)
    if head.variant == "softmax":
        return z @ head.weights + head.bias, _HeadCache(z)
    zhat = l2norm_forward(z)
    what = l2norm_forward(head.weights.T).T
    cos = zhat @ what
    if head.variant == "cosine_margin" and labels is not None and use_margin and head.margin:
        cols = head.columns(labels)
        cos = cos.copy()
        cos[np.arange(len(cols)), cols] -= head.margin
    return head.scale * cos, _HeadCache(z, zhat, what)


def head_logits(head: ClassifierHead, embeddings, labels=None) -> np.ndarray:
    return head_forward(head, embeddings, labels)[0]


def head_backward(head: ClassifierHead, cache: _HeadCache, grad_logits):
    """Return ``(grad_embeddings, grad_weights, grad_bias or None)``."""
    g = np.asarray(grad_logits, dtype=np.float64)
    if head.variant == "softmax":
        return g @ head.weights.T, cache.z.T @ g, g.sum(axis=0)
    gcos = head.scale * g
    gzhat = gcos @ cache.what.T
    gwhat = cache.zhat.T @ gcos
    gz = l2norm_backward(gzhat, cache.z)
    gw = l2norm_backward(gwhat.T, head.weights.T).T
    return gz, gw, None


# -------------------------------------------------------------------- losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits, labels) -> LossValue:
    """Mean ``-log softmax(logits)[label]``; ``labels`` are column indices."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, n = x.shape
    if y.shape[0] != b:
        raise DimensionError("one label per row required")
    if np.any(y < 0) or np.any(y >= n):
        raise ValueError(f"labels must lie in [0, {n})")
    lsm = log_softmax(x)
    rows = np.arange(b)
    loss = -lsm[rows, y].mean()
    grad = np.exp(lsm)
    grad[rows, y] -= 1.0
    return LossValue(float(max(loss, 0.0)), {"logits": grad / b})


def soft_cross_entropy(logits, targets) -> LossValue:
    """Mean ``-sum_j p_j log q_j`` with soft target rows ``p``."""
    x = np.asarray(logits, dtype=np.float64)
    p = np.asarray(targets, dtype=np.float64)
    if p.shape != x.shape:
        raise DimensionError("targets must match logits")
    lsm = log_softmax(x)
    b = x.shape[0]
    loss = -(p * lsm).sum() / b
    return LossValue(float(loss), {"logits": (np.exp(lsm) * p.sum(axis=1, keepdims=True) - p) / b})


def _fit_to_head(head: ClassifierHead, z: np.ndarray) -> np.ndarray:
    if z.shape[1] < head.embed_dim:
        raise DimensionError(f"embedding dim {z.shape[1]} smaller than old head dim {head.embed_dim}")
    return z[:, : head.embed_dim]


def _pad_grad(g: np.ndarray, width: int) -> np.ndarray:
    if g.shape[1] == width:
        return g
    out = np.zeros((g.shape[0], width))
    out[:, : g.shape[1]] = g
    return out


def influence_loss(new_embeddings, old_head: ClassifierHead, labels) -> LossValue:
    """Cross-entropy of new embeddings through a frozen old classifier.

    Wider embeddings are truncated to their first ``old_head.embed_dim``
    coordinates. Only ``grads["embeddings"]`` is returned.
    """
    z = np.asarray(new_embeddings, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    cols = old_head.columns(labels)
    logits, cache = head_forward(old_head, _fit_to_head(old_head, z), labels)
    ce = cross_entropy(logits, cols)
    gz, _, _ = head_backward(old_head, cache, ce.grads["logits"])
    return LossValue(ce.loss, {"embeddings": _pad_grad(gz, z.shape[1])})


def synthesize_class_weights(old_model: EmbeddingModel, samples, normalize: bool = True) -> np.ndarray:
    """Mean old-model feature over one class's samples."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] == 0:
        raise ValueError("cannot synthesize weights for a class without samples")
    w = old_model.forward(x).mean(axis=0)
    return l2norm_forward(w)[0] if normalize else w


def extend_head(old_head: ClassifierHead, old_model: EmbeddingModel,
                samples_by_class: Mapping[int, np.ndarray]) -> ClassifierHead:
    """Old head plus synthesized columns for classes it does not know.

    New columns are appended in ascending class-id order. Existing columns are
    copied untouched.
    """
    new_ids = sorted(int(c) for c in samples_by_class if not old_head.has_class(c))
    if not new_ids:
        return old_head.copy()
    cols = [synthesize_class_weights(old_model, samples_by_class[c], normalize=old_head.normalized)
            for c in new_ids]
    if old_model.embed_dim != old_head.embed_dim:
        raise DimensionError("old model and old head dims differ")
    w = np.concatenate([old_head.weights, np.stack(cols, axis=1)], axis=1)
    bias = None
    if old_head.variant == "softmax":
        bias = np.concatenate([old_head.bias, np.zeros(len(new_ids))])
    return ClassifierHead(old_head.variant, w, old_head.class_ids + new_ids, bias,
                          old_head.scale, old_head.margin)


def default_kd_temperature(head: ClassifierHead) -> float:
    return head.scale if head.normalized else 1.0


def tempered_logits(head: ClassifierHead, embeddings, temperature: float):
    """Margin-free logits at a distillation temperature, plus a backward closure.

    For normalized heads the cosine similarities are multiplied by the
    temperature, the same role the scale plays inside the head, so the default
    temperature (the head scale) reproduces the head's own margin-free
    output. Softmax heads divide their logits by the temperature.
    """
    logits, cache = head_forward(head, embeddings, None)
    if head.normalized:
        factor = temperature / head.scale
    else:
        factor = 1.0 / temperature

    def backward(g):
        return head_backward(head, cache, g * factor)[0]

    return logits * factor, backward


def kd_influence_loss(new_embeddings, old_embeddings, old_head: ClassifierHead,
                      temperature: Optional[float] = None) -> LossValue:
    """Mean ``KL(p_old || p_new)`` of tempered old-head outputs.

    The old side is treated as a constant target.
    """
    zn = np.asarray(new_embeddings, dtype=np.float64)
    zo = np.asarray(old_embeddings, dtype=np.float64)
    if zn.ndim == 1:
        zn, zo = zn[None, :], zo[None, :]
    if zn.shape[0] != zo.shape[0]:
        raise DimensionError("new and old embeddings must align row for row")
    t = default_kd_temperature(old_head) if temperature is None else float(temperature)
    if t <= 0:
        raise ValueError("temperature must be > 0")
    lo, _ = tempered_logits(old_head, _fit_to_head(old_head, zo), t)
    ln, back = tempered_logits(old_head, _fit_to_head(old_head, zn), t)
    lp = log_softmax(lo)
    lq = log_softmax(ln)
    p = np.exp(lp)
    b = zn.shape[0]
    kl = float((p * (lp - lq)).sum() / b)
    g = back((np.exp(lq) - p) / b)
    return LossValue(max(kl, 0.0), {"embeddings": _pad_grad(g, zn.shape[1])})


def l2_feature_regularizer(new_embeddings, old_embeddings) -> LossValue:
    """Mean of ``0.5 * ||new - old||^2`` over the batch; old side constant."""
    zn = np.asarray(new_embeddings, dtype=np.float64)
    zo = np.asarray(old_embeddings, dtype=np.float64)
    if zn.shape != zo.shape:
        raise DimensionError(f"shape mismatch {zn.shape} vs {zo.shape}")
    if zn.ndim == 1:
        zn, zo = zn[None, :], zo[None, :]
    d = zn - zo
    b = zn.shape[0]
    return LossValue(float(0.5 * (d * d).sum() / b), {"embeddings": d / b})


def lwf_soft_labels(old_model: EmbeddingModel, old_head: ClassifierHead, samples) -> np.ndarray:
    """Old model's class probabilities for ``samples`` (no margin)."""
    return softmax(head_logits(old_head, old_model.forward(samples)))


def lwf_loss(new_embeddings, old_head: ClassifierHead, soft_labels) -> LossValue:
    """Cross-entropy of the old head on new embeddings against soft labels."""
    z = np.asarray(new_embeddings, dtype=np.float64)
    logits, cache = head_forward(old_head, _fit_to_head(old_head, z), None)
    ce = soft_cross_entropy(logits, soft_labels)
    gz, _, _ = head_backward(old_head, cache, ce.grads["logits"])
    return LossValue(ce.loss, {"embeddings": _pad_grad(gz, z.shape[1])})
