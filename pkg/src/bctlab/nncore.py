"""Dense layers with explicit forward/backward passes and plain SGD.

Matrices are float64 numpy arrays with shape ``(rows, cols)``; a vector is a
``1 x K`` matrix or a 1-D array where noted. The layer set is closed:
affine, ReLU and row-wise L2 normalization.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

EPS_NORM = 1e-12


class DimensionError(ValueError):
    """Operand shapes do not chain."""


class DegenerateInputError(ValueError):
    """Input too close to zero to normalize."""


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


# ---------------------------------------------------------------- primitives


def affine_forward(inputs, weights, bias=None) -> np.ndarray:
    x = _as_matrix(inputs, "input")
    w = _as_matrix(weights, "weights")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"cannot multiply {x.shape} by {w.shape}")
    out = x @ w
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64).reshape(-1)
        if b.shape[0] != w.shape[1]:
            raise DimensionError(f"bias length {b.shape[0]} != out_dim {w.shape[1]}")
        out = out + b
    return out


def affine_backward(grad_out, cached_input, weights):
    """Return ``(grad_input, grad_weights, grad_bias)`` of ``x @ W + b``."""
    g = _as_matrix(grad_out, "grad_out")
    x = _as_matrix(cached_input, "cached_input")
    w = _as_matrix(weights, "weights")
    if x.shape[0] != g.shape[0] or x.shape[1] != w.shape[0] or g.shape[1] != w.shape[1]:
        raise DimensionError(
            f"inconsistent shapes grad_out={g.shape} input={x.shape} weights={w.shape}"
        )
    return g @ w.T, x.T @ g, g.sum(axis=0)


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(grad_out, cached_input) -> np.ndarray:
    # Subgradient at exactly zero is 0.
    x = np.asarray(cached_input, dtype=np.float64)
    return np.where(x > 0.0, np.asarray(grad_out, dtype=np.float64), 0.0)


def row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def l2norm_forward(x) -> np.ndarray:
    """Scale every row to unit Euclidean length."""
    a = _as_matrix(x, "input")
    n = row_norms(a)
    if np.any(n <= EPS_NORM):
        bad = np.flatnonzero(n <= EPS_NORM).tolist()
        raise DegenerateInputError(f"rows {bad} have norm <= {EPS_NORM}")
    return a / n[:, None]


def l2norm_backward(grad_out, cached_input) -> np.ndarray:
    a = _as_matrix(cached_input, "cached_input")
    g = _as_matrix(grad_out, "grad_out")
    n = row_norms(a)
    if np.any(n <= EPS_NORM):
        raise DegenerateInputError("cannot differentiate normalization at zero")
    y = a / n[:, None]
    proj = np.einsum("ij,ij->i", y, g)
    return (g - y * proj[:, None]) / n[:, None]


# -------------------------------------------------------------- layer specs


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "affine" | "relu" | "l2norm"
    in_dim: int = 0
    out_dim: int = 0
    has_bias: bool = True

    @staticmethod
    def affine(in_dim: int, out_dim: int, has_bias: bool = True) -> "LayerSpec":
        return LayerSpec("affine", in_dim, out_dim, has_bias)

    @staticmethod
    def relu() -> "LayerSpec":
        return LayerSpec("relu")

    @staticmethod
    def l2norm() -> "LayerSpec":
        return LayerSpec("l2norm")

    def to_dict(self) -> dict:
        if self.kind == "affine":
            return {"kind": "affine", "in_dim": self.in_dim, "out_dim": self.out_dim,
                    "has_bias": self.has_bias}
        return {"kind": self.kind}

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        if d["kind"] == "affine":
            return LayerSpec.affine(int(d["in_dim"]), int(d["out_dim"]), bool(d.get("has_bias", True)))
        if d["kind"] not in ("relu", "l2norm"):
            raise ValueError(f"unknown layer kind {d['kind']!r}")
        return LayerSpec(d["kind"])


def check_chain(specs: Sequence[LayerSpec]) -> int:
    """Validate that affine dims chain; return the output dimension."""
    dim = None
    for i, s in enumerate(specs):
        if s.kind != "affine":
            continue
        if s.in_dim < 1 or s.out_dim < 1:
            raise DimensionError(f"layer {i}: dims must be positive")
        if dim is not None and s.in_dim != dim:
            raise DimensionError(f"layer {i}: in_dim {s.in_dim} != previous out_dim {dim}")
        dim = s.out_dim
    if dim is None:
        raise DimensionError("architecture has no affine layer")
    return dim


def mlp_specs(dims: Sequence[int], relu_on_output: bool = False) -> list[LayerSpec]:
    """Affine layers through ``dims`` with ReLU between them."""
    specs: list[LayerSpec] = []
    for i in range(len(dims) - 1):
        specs.append(LayerSpec.affine(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            specs.append(LayerSpec.relu())
    if relu_on_output:
        specs.append(LayerSpec.relu())
    return specs


# ------------------------------------------------------------------ model


class EmbeddingModel:
    """Feed-forward map from inputs to embeddings.

    Parameters live in ``self.params`` as a flat list ordered layer by layer
    (weights then bias for each affine layer); gradients from ``backward``
    use the same order.
    """

    def __init__(self, specs: Sequence[LayerSpec], params: Optional[list[np.ndarray]] = None):
        self.specs = list(specs)
        self.embed_dim = check_chain(self.specs)
        self.input_dim = next(s.in_dim for s in self.specs if s.kind == "affine")
        if params is None:
            params = [np.zeros(shape) for shape in self.param_shapes()]
        self.params = [np.array(p, dtype=np.float64) for p in params]
        shapes = self.param_shapes()
        if len(self.params) != len(shapes) or any(p.shape != s for p, s in zip(self.params, shapes)):
            raise DimensionError("parameter shapes do not match architecture")

    @classmethod
    def init(cls, specs: Sequence[LayerSpec], rng: np.random.Generator) -> "EmbeddingModel":
        """He-initialized weights, zero biases."""
        params = []
        for s in specs:
            if s.kind == "affine":
                params.append(rng.standard_normal((s.in_dim, s.out_dim)) * np.sqrt(2.0 / s.in_dim))
                if s.has_bias:
                    params.append(np.zeros(s.out_dim))
        return cls(specs, params)

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for s in self.specs:
            if s.kind == "affine":
                shapes.append((s.in_dim, s.out_dim))
                if s.has_bias:
                    shapes.append((s.out_dim,))
        return shapes

    def forward(self, x, keep_cache: bool = False):
        h = _as_matrix(x, "input")
        if h.shape[1] != self.input_dim:
            raise DimensionError(f"input dim {h.shape[1]} != model input dim {self.input_dim}")
        cache = []
        k = 0
        for s in self.specs:
            cache.append(h)
            if s.kind == "affine":
                w = self.params[k]
                b = self.params[k + 1] if s.has_bias else None
                k += 2 if s.has_bias else 1
                h = affine_forward(h, w, b)
            elif s.kind == "relu":
                h = relu_forward(h)
            else:
                h = l2norm_forward(h)
        return (h, cache) if keep_cache else h

    def backward(self, grad_out, cache) -> tuple[np.ndarray, list[np.ndarray]]:
        """Return ``(grad_input, param_grads)`` for a cached forward pass."""
        g = _as_matrix(grad_out, "grad_out")
        grads: list[Optional[np.ndarray]] = [None] * len(self.params)
        k = len(self.params)
        for s, h in zip(reversed(self.specs), reversed(cache)):
            if s.kind == "affine":
                if s.has_bias:
                    k -= 2
                    gi, gw, gb = affine_backward(g, h, self.params[k])
                    grads[k], grads[k + 1] = gw, gb
                else:
                    k -= 1
                    gi, gw, _ = affine_backward(g, h, self.params[k])
                    grads[k] = gw
                g = gi
            elif s.kind == "relu":
                g = relu_backward(g, h)
            else:
                g = l2norm_backward(g, h)
        return g, grads  # type: ignore[return-value]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.specs, [p.copy() for p in self.params])


# -------------------------------------------------------------------- SGD


@dataclass
class SgdConfig:
    learning_rate_schedule: list[tuple[int, float]] = field(
        default_factory=lambda: [(0, 0.1), (30, 0.01), (40, 0.001)]
    )
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 45
    rng_seed: int = 0

    def __post_init__(self):
        self.learning_rate_schedule = [(int(e), float(r)) for e, r in self.learning_rate_schedule]
        epochs = [e for e, _ in self.learning_rate_schedule]
        if not epochs or epochs[0] != 0:
            raise ValueError("schedule must start at epoch 0")
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("schedule epochs must be strictly increasing")
        if any(r <= 0 for _, r in self.learning_rate_schedule):
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def rate(self, epoch: int) -> float:
        lr = self.learning_rate_schedule[0][1]
        for e, r in self.learning_rate_schedule:
            if epoch >= e:
                lr = r
        return lr


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], config: SgdConfig, epoch: int):
    """In-place ``p <- p - lr(epoch) * (g + weight_decay * p)``; returns ``params``."""
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    lr = config.rate(epoch)
    wd = config.weight_decay
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"param {p.shape} vs grad {g.shape}")
        p -= lr * (g + wd * p)
    return params
