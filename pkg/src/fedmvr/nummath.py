"""Numeric core: flat parameter vectors, two small classifiers and their gradients.

Parameters are plain 1-D ``float64`` numpy arrays. The layout is fixed per
model kind:

* ``logistic``: ``W`` (input_dim x num_classes) row-major, then ``b`` (num_classes)
* ``mlp2``: ``W1`` (input_dim x hidden), ``b1``, ``W2`` (hidden x num_classes), ``b2``

The objective is mean softmax cross-entropy plus ``(l2_lambda / 2) * ||params||^2``
(biases included).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

ModelKind = Literal["logistic", "mlp2"]


class DimensionError(ValueError):
    """Raised when a parameter vector does not have the expected length."""

    def __init__(self, expected: int, actual: int, what: str = "params"):
        super().__init__(f"{what} has dimension {actual}, expected {expected}")
        self.expected = expected
        self.actual = actual


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    input_dim: int
    num_classes: int
    hidden_dim: int = 600
    l2_lambda: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp2"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2 or self.hidden_dim < 1:
            raise ValueError("input_dim, hidden_dim must be >= 1 and num_classes >= 2")
        if not self.l2_lambda >= 0:
            raise ValueError(f"l2_lambda must be >= 0, got {self.l2_lambda}")

    @property
    def dim(self) -> int:
        if self.kind == "logistic":
            return (self.input_dim + 1) * self.num_classes
        return (self.input_dim + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.num_classes


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("inputs must be 2-D and labels 1-D")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} input rows but {self.labels.shape[0]} labels"
            )
        if self.labels.shape[0] == 0:
            raise ValueError("empty batch")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class LossReport:
    loss: float
    accuracy: float


def _require_finite(v: np.ndarray, what: str) -> None:
    # a single reduction: any NaN/Inf entry propagates into the sum
    if not np.isfinite(v.sum()):
        raise NonFiniteError(f"{what} has non-finite entries")


def _check(spec: ModelSpec, params: np.ndarray, batch: Batch | None = None) -> None:
    if params.ndim != 1 or params.shape[0] != spec.dim:
        raise DimensionError(spec.dim, params.size)
    if batch is not None:
        if batch.inputs.shape[1] != spec.input_dim:
            raise DimensionError(spec.input_dim, batch.inputs.shape[1], what="batch inputs")
        if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
            raise ValueError(f"labels must lie in [0, {spec.num_classes})")


def unpack(spec: ModelSpec, params: np.ndarray) -> list[np.ndarray]:
    """Split a flat vector into weight/bias views (no copies)."""
    _check(spec, params)
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "logistic":
        return [params[: d * c].reshape(d, c), params[d * c :]]
    o1 = d * h
    o2 = o1 + h
    o3 = o2 + h * c
    return [
        params[:o1].reshape(d, h),
        params[o1:o2],
        params[o2:o3].reshape(h, c),
        params[o3:],
    ]


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    parts = []
    if spec.kind == "logistic":
        fans = [(spec.input_dim, spec.input_dim * spec.num_classes), (spec.input_dim, spec.num_classes)]
    else:
        h = spec.hidden_dim
        fans = [
            (spec.input_dim, spec.input_dim * h),
            (spec.input_dim, h),
            (h, h * spec.num_classes),
            (h, spec.num_classes),
        ]
    for fan_in, size in fans:
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size))
    return np.concatenate(parts)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward(spec: ModelSpec, params: np.ndarray, x: np.ndarray):
    parts = unpack(spec, params)
    if spec.kind == "logistic":
        w, b = parts
        return x @ w + b, None
    w1, b1, w2, b2 = parts
    pre = x @ w1 + b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ w2 + b2, (pre, hidden)


def _reg(spec: ModelSpec, params: np.ndarray) -> float:
    return 0.5 * spec.l2_lambda * float(params @ params)


def eval_loss(spec: ModelSpec, params: np.ndarray, batch: Batch) -> LossReport:
    _check(spec, params, batch)
    logits, _ = _forward(spec, params, batch.inputs)
    logp = _log_softmax(logits)
    n = len(batch)
    ce = -float(logp[np.arange(n), batch.labels].sum()) / n
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    acc = float(np.mean(np.argmax(logits, axis=1) == batch.labels))
    loss = ce + _reg(spec, params)
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")
    return LossReport(loss=loss, accuracy=acc)


def grad(spec: ModelSpec, params: np.ndarray, batch: Batch) -> np.ndarray:
    """Analytic gradient of :func:`eval_loss`'s loss with respect to ``params``."""
    _check(spec, params, batch)
    x, y = batch.inputs, batch.labels
    n = len(batch)
    logits, cache = _forward(spec, params, x)
    err = np.exp(_log_softmax(logits))
    err[np.arange(n), y] -= 1.0
    err /= n

    out = np.empty(spec.dim)
    parts = unpack(spec, out)
    if spec.kind == "logistic":
        np.matmul(x.T, err, out=parts[0])
        err.sum(axis=0, out=parts[1])
    else:
        pre, hidden = cache
        dhidden = err @ unpack(spec, params)[2].T
        dhidden *= pre > 0.0
        np.matmul(x.T, dhidden, out=parts[0])
        dhidden.sum(axis=0, out=parts[1])
        np.matmul(hidden.T, err, out=parts[2])
        err.sum(axis=0, out=parts[3])
    if spec.l2_lambda:
        out += spec.l2_lambda * params
    _require_finite(out, "gradient")
    return out


def finite_diff_grad(spec: ModelSpec, params: np.ndarray, batch: Batch, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient oracle, one coordinate at a time."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    _check(spec, params, batch)
    out = np.empty_like(params, dtype=np.float64)
    probe = np.array(params, dtype=np.float64, copy=True)
    for j in range(probe.size):
        orig = probe[j]
        probe[j] = orig + h
        up = eval_loss(spec, probe, batch).loss
        probe[j] = orig - h
        down = eval_loss(spec, probe, batch).loss
        probe[j] = orig
        out[j] = (up - down) / (2.0 * h)
    return out


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """Largest coordinate-wise ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps near-zero coordinates, where central differences carry
    ~1e-10 absolute noise, from dominating.
    """
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def grad_norm_sq(g: np.ndarray) -> float:
    return float(np.dot(g, g))


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a * x + y`` as a new array."""
    if x.shape != y.shape:
        raise DimensionError(y.size, x.size, what="x")
    out = a * x
    out += y
    _require_finite(out, "axpy result")
    return out
