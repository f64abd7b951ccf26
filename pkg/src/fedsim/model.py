"""Multinomial logistic regression and a one-hidden-layer tanh MLP.

Parameters live in one flat float64 vector.  Losses are mean cross-entropy
over the batch and gradients are exact (hand-derived backprop).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np


class NumericError(ArithmeticError):
    """Non-finite value in parameters, inputs or intermediates."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "logistic"
    input_dim: int = 60
    num_classes: int = 10
    hidden_dim: int = 32

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if min(self.input_dim, self.num_classes, self.hidden_dim) < 1:
            raise ValueError("model dimensions must be positive")

    @property
    def layout(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        """Block name -> (offset, shape)."""
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "logistic":
            shapes = [("W", (c, d)), ("b", (c,))]
        else:
            shapes = [("W1", (h, d)), ("b1", (h,)), ("W2", (c, h)), ("b2", (c,))]
        out, off = {}, 0
        for name, shape in shapes:
            out[name] = (off, shape)
            off += int(np.prod(shape))
        return out

    @property
    def dim(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout.values())

    def unpack(self, w: np.ndarray) -> dict[str, np.ndarray]:
        if w.shape != (self.dim,):
            raise ValueError(f"parameter vector has shape {w.shape}, expected ({self.dim},)")
        return {name: w[off:off + int(np.prod(shape))].reshape(shape)
                for name, (off, shape) in self.layout.items()}


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[0] == 0:
            raise ValueError("batch must be a non-empty 2-D feature matrix")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError("labels must be a vector matching the feature rows")


def init_params(spec: ModelSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Zero for logistic regression; N(0, 1/input_dim) weights for the MLP."""
    w = np.zeros(spec.dim)
    if spec.kind == "mlp":
        if rng is None:
            raise ValueError("MLP initialisation needs an rng")
        blocks = spec.unpack(w)
        scale = 1.0 / np.sqrt(spec.input_dim)
        blocks["W1"][...] = rng.normal(0.0, scale, blocks["W1"].shape)
        blocks["W2"][...] = rng.normal(0.0, scale, blocks["W2"].shape)
    return w


def softmax(logits: np.ndarray) -> np.ndarray:
    """Shift-stable softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax of non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check(w: np.ndarray) -> None:
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite parameters")


def logits(spec: ModelSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    p = spec.unpack(w)
    if spec.kind == "logistic":
        return x @ p["W"].T + p["b"]
    h = np.tanh(x @ p["W1"].T + p["b1"])
    return h @ p["W2"].T + p["b2"]


def loss_and_grad(spec: ModelSpec, w: np.ndarray, x: np.ndarray,
                  y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient, without input validation."""
    n = x.shape[0]
    p = spec.unpack(w)
    grad = np.empty_like(w)
    g = spec.unpack(grad)
    rows = np.arange(n)
    if spec.kind == "logistic":
        z = x @ p["W"].T + p["b"]
        logp = _log_softmax(z)
        delta = np.exp(logp)
        delta[rows, y] -= 1.0
        delta /= n
        g["W"][...] = delta.T @ x
        g["b"][...] = delta.sum(axis=0)
    else:
        h = np.tanh(x @ p["W1"].T + p["b1"])
        z = h @ p["W2"].T + p["b2"]
        logp = _log_softmax(z)
        delta = np.exp(logp)
        delta[rows, y] -= 1.0
        delta /= n
        g["W2"][...] = delta.T @ h
        g["b2"][...] = delta.sum(axis=0)
        dh = (delta @ p["W2"]) * (1.0 - h * h)
        g["W1"][...] = dh.T @ x
        g["b1"][...] = dh.sum(axis=0)
    loss = -float(logp[rows, y].mean())
    return loss, grad


def local_loss(spec: ModelSpec, w: np.ndarray, batch: Batch) -> float:
    _check(w)
    z = logits(spec, w, batch.x)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    logp = _log_softmax(z)
    return -float(logp[np.arange(batch.y.shape[0]), batch.y].mean())


def local_gradient(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    _check(w)
    _, grad = loss_and_grad(spec, w, batch.x, batch.y)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return grad


def predict(spec: ModelSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.argmax(logits(spec, w, x), axis=1)


def accuracy(spec: ModelSpec, w: np.ndarray, batch: Batch) -> float:
    _check(w)
    return float(np.mean(predict(spec, w, batch.x) == batch.y))


def central_difference(fn: Callable[[np.ndarray], float], w: np.ndarray, h: float) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function."""
    if h <= 0:
        raise ValueError("h must be > 0")
    w = np.array(w, dtype=np.float64)
    out = np.empty_like(w)
    for i in range(w.shape[0]):
        orig = w[i]
        w[i] = orig + h
        up = fn(w)
        w[i] = orig - h
        down = fn(w)
        w[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out


def finite_difference_gradient(spec: ModelSpec, w: np.ndarray, batch: Batch,
                               h: float = 1e-5) -> np.ndarray:
    return central_difference(lambda v: local_loss(spec, v, batch), w, h)


# ParamVector wire format: u64 length, then little-endian f64 values.

def params_to_bytes(w: np.ndarray) -> bytes:
    w = np.asarray(w, dtype="<f8")
    return struct.pack("<Q", w.shape[0]) + w.tobytes()


def params_from_bytes(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise ValueError("parameter blob shorter than its length prefix")
    (n,) = struct.unpack("<Q", raw[:8])
    if len(raw) != 8 + 8 * n:
        raise ValueError(f"parameter blob holds {len(raw) - 8} bytes, expected {8 * n}")
    return np.frombuffer(raw, dtype="<f8", offset=8).astype(np.float64)


def gradient(spec: ModelSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean cross-entropy gradient only; the hot path of local SGD."""
    if spec.kind != "logistic":
        return loss_and_grad(spec, w, x, y)[1]
    c, d = spec.num_classes, spec.input_dim
    W = w[:c * d].reshape(c, d)
    z = x @ W.T + w[c * d:]
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    e /= e.sum(axis=1, keepdims=True)
    n = x.shape[0]
    e[np.arange(n), y] -= 1.0
    e /= n
    return np.concatenate([(e.T @ x).ravel(), e.sum(axis=0)])
