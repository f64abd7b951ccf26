"""Inexact local solves of the proximal subproblem.

Device k minimises h_k(w; w_t) = F_k(w) + mu/2 ||w - w_t||^2 with mini-batch
SGD.  The attained inexactness is ||grad h_k(w_out)|| / ||grad h_k(w_t)||,
always measured on the full local training set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from fedsim.data import DeviceShard
from fedsim.model import ModelSpec, NumericError, gradient, loss_and_grad

log = logging.getLogger(__name__)

STATIONARY_TOL = 1e-12


@dataclass
class SolverConfig:
    epochs: int
    learning_rate: float
    batch_size: int
    mu: float
    rng: np.random.Generator
    # linear correction c: the device minimises F_k(w) - <c, w - w_t> + mu/2 ||w - w_t||^2
    correction: np.ndarray | None = None
    # test hook: stop after this many SGD steps
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")


@dataclass
class SolverReport:
    epochs_run: int
    steps_run: int
    final_local_loss: float
    attained_gamma: float
    initial_grad_norm: float
    final_grad_norm: float
    diverged: bool = False


def proximal_gradient(spec: ModelSpec, w: np.ndarray, w_anchor: np.ndarray, mu: float,
                      shard: DeviceShard, correction: np.ndarray | None = None) -> np.ndarray:
    """grad F_k(w) + mu (w - w_anchor) [- correction], F_k over the full train split."""
    grad = gradient(spec, w, shard.train_x, shard.train_y)
    if correction is not None:
        grad = grad - correction
    out = grad + mu * (w - w_anchor)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite proximal gradient")
    return out


def inexactness(grad_h: Callable[[np.ndarray], np.ndarray], w_candidate: np.ndarray,
                w_anchor: np.ndarray) -> float:
    """||grad_h(candidate)|| / ||grad_h(anchor)|| for any subproblem gradient oracle.

    Returns 0 when the anchor is already stationary (denominator below 1e-12).
    """
    if not np.all(np.isfinite(w_candidate)):
        raise NumericError("non-finite candidate")
    denom = np.linalg.norm(grad_h(w_anchor))
    if denom < STATIONARY_TOL:
        return 0.0
    return float(np.linalg.norm(grad_h(w_candidate)) / denom)


def measure_inexactness(spec: ModelSpec, shard: DeviceShard, w_candidate: np.ndarray,
                        w_anchor: np.ndarray, mu: float,
                        correction: np.ndarray | None = None) -> float:
    return inexactness(lambda w: proximal_gradient(spec, w, w_anchor, mu, shard, correction),
                       w_candidate, w_anchor)


def solve_local(spec: ModelSpec, shard: DeviceShard, w_anchor: np.ndarray,
                cfg: SolverConfig) -> tuple[np.ndarray, SolverReport]:
    x, y = shard.train_x, shard.train_y
    n = y.shape[0]
    if n < 1:
        raise ValueError(f"device {shard.device_id} has no training rows")
    lr, mu, bs = cfg.learning_rate, cfg.mu, cfg.batch_size
    corr = cfg.correction
    w = w_anchor.copy()
    steps = 0
    epochs_run = 0
    budget = np.inf if cfg.max_steps is None else cfg.max_steps
    diverged = False
    for _ in range(cfg.epochs):
        if steps >= budget:
            break
        order = cfg.rng.permutation(n)
        for start in range(0, n, bs):
            if steps >= budget:
                break
            idx = order[start:start + bs]
            g = gradient(spec, w, x[idx], y[idx])
            if corr is not None:
                g -= corr
            if mu:
                g += mu * (w - w_anchor)
            w = w - lr * g
            steps += 1
        epochs_run += 1
        if not np.all(np.isfinite(w)):
            diverged = True
            break

    init_norm = float(np.linalg.norm(proximal_gradient(spec, w_anchor, w_anchor, mu, shard, corr)))
    if diverged:
        log.warning("device %d diverged after %d steps", shard.device_id, steps)
        return w, SolverReport(epochs_run, steps, float("nan"), float("nan"),
                               init_norm, float("nan"), diverged=True)
    loss, grad = loss_and_grad(spec, w, x, y)
    if corr is not None:
        grad = grad - corr
    final_norm = float(np.linalg.norm(grad + mu * (w - w_anchor)))
    gamma = measure_inexactness(spec, shard, w, w_anchor, mu, corr)
    return w, SolverReport(epochs_run, steps, loss, gamma, init_norm, final_norm)
