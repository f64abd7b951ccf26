"""Diagnostics: global objective, local dissimilarity, smoothness and theory bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from fedsim.data import FederatedDataset
from fedsim.model import Batch, ModelSpec, NumericError, accuracy, gradient, loss_and_grad

EXCEPTION_TOL = 1e-12
DEFAULT_EPSILON = 1e-10
CONVERGED_DELTA = 1e-4
DIVERGED_RISE = 1.0
DIVERGED_WINDOW = 10


def global_loss(dataset: FederatedDataset, spec: ModelSpec, w: np.ndarray) -> float:
    """f(w) = sum_k p_k F_k(w) over training rows."""
    p = dataset.weights
    total = 0.0
    for pk, s in zip(p, dataset.shards):
        total += pk * loss_and_grad(spec, w, s.train_x, s.train_y)[0]
    if not math.isfinite(total):
        raise NumericError("non-finite global loss")
    return float(total)


def pooled_test_accuracy(dataset: FederatedDataset, spec: ModelSpec, w: np.ndarray) -> float:
    """Accuracy over the pooled test rows of every device (nan if there are none)."""
    xs = [s.test_x for s in dataset.shards if s.test_index.size]
    if not xs:
        return float("nan")
    ys = [s.test_y for s in dataset.shards if s.test_index.size]
    return accuracy(spec, w, Batch(np.concatenate(xs), np.concatenate(ys)))


def device_gradients(dataset: FederatedDataset, spec: ModelSpec, w: np.ndarray) -> np.ndarray:
    """Full-batch local gradients, one row per device, in device order."""
    grads = np.stack([gradient(spec, w, s.train_x, s.train_y) for s in dataset.shards])
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite local gradient")
    return grads


def global_gradient(dataset: FederatedDataset, spec: ModelSpec, w: np.ndarray) -> np.ndarray:
    return dataset.weights @ device_gradients(dataset, spec, w)


@dataclass
class DissimilarityReading:
    B: float
    grad_variance: float
    global_grad_norm_sq: float
    mean_local_grad_norm_sq: float
    exception_triggered: bool
    below_epsilon: bool


def dissimilarity(dataset: FederatedDataset, spec: ModelSpec, w: np.ndarray,
                  epsilon: float = DEFAULT_EPSILON) -> DissimilarityReading:
    """B(w) = sqrt(E_k ||grad F_k||^2 / ||grad f||^2) and the gradient variance."""
    return dissimilarity_from_gradients(device_gradients(dataset, spec, w), dataset.weights, epsilon)


def dissimilarity_from_gradients(grads: np.ndarray, p: np.ndarray,
                                 epsilon: float = DEFAULT_EPSILON) -> DissimilarityReading:
    full = p @ grads
    full_sq = float(full @ full)
    local_sq = float(p @ np.einsum("ij,ij->i", grads, grads))
    dev = grads - full
    variance = float(p @ np.einsum("ij,ij->i", dev, dev))
    exception = abs(local_sq - full_sq) < EXCEPTION_TOL
    if exception:
        B = 1.0
    elif full_sq == 0.0:
        B = math.inf
    else:
        B = math.sqrt(local_sq / full_sq)
    return DissimilarityReading(B, variance, full_sq, local_sq, exception, full_sq <= epsilon)


def bounded_variance_bound(sigma_sq: float, epsilon: float) -> float:
    """Upper bound sqrt(1 + sigma^2 / eps) on B under bounded gradient variance."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    return math.sqrt(1.0 + sigma_sq / epsilon)


# --------------------------------------------------------------------------
# smoothness


def lipschitz_estimate(grad_fn: Callable[[np.ndarray], np.ndarray],
                       points: Sequence[np.ndarray]) -> float:
    """max ||g(u) - g(v)|| / ||u - v|| over all pairs of points."""
    grads = [grad_fn(np.asarray(p, dtype=np.float64)) for p in points]
    best = 0.0
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            gap = np.linalg.norm(np.asarray(points[i]) - np.asarray(points[j]))
            if gap == 0.0:
                continue
            best = max(best, float(np.linalg.norm(grads[i] - grads[j]) / gap))
    return best


def min_curvature(grad_fn: Callable[[np.ndarray], np.ndarray], w: np.ndarray, shift: float,
                  rng: np.random.Generator, iters: int = 100, fd_step: float = 1e-5) -> float:
    """Smallest Hessian eigenvalue at ``w`` via power iteration on shift*I - H.

    Hessian-vector products are central differences of ``grad_fn``.  ``shift``
    must upper-bound the largest eigenvalue (an L estimate works).
    """
    w = np.asarray(w, dtype=np.float64)

    def hvp(v):
        return (grad_fn(w + fd_step * v) - grad_fn(w - fd_step * v)) / (2.0 * fd_step)

    v = rng.standard_normal(w.shape[0])
    v /= np.linalg.norm(v)
    top = 0.0
    for _ in range(iters):
        u = shift * v - hvp(v)
        top = float(v @ u)
        norm = np.linalg.norm(u)
        if norm == 0.0:
            break
        v = u / norm
    return shift - top


def estimate_smoothness_fn(grad_fn: Callable[[np.ndarray], np.ndarray],
                           points: Sequence[np.ndarray], convex: bool = False,
                           rng: np.random.Generator | None = None,
                           iters: int = 100) -> tuple[float, float]:
    """(L, L_minus) for an arbitrary gradient oracle sampled at ``points``."""
    if len(points) < 2:
        raise ValueError("need at least two sample points")
    L = lipschitz_estimate(grad_fn, points)
    if convex:
        return L, 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    shift = max(L, 1.0) * 1.5
    lam_min = min(min_curvature(grad_fn, p, shift, rng, iters) for p in points)
    return L, max(0.0, -lam_min)


def sample_ball(center: np.ndarray, radius: float, count: int,
                rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for _ in range(count):
        d = rng.standard_normal(center.shape[0])
        d *= radius * rng.random() ** (1.0 / center.shape[0]) / np.linalg.norm(d)
        out.append(center + d)
    return out


def estimate_smoothness(dataset: FederatedDataset, spec: ModelSpec,
                        w_samples: Sequence[np.ndarray],
                        rng: np.random.Generator | None = None) -> tuple[float, float]:
    """(L, L_minus) of the global objective; L_minus is 0 for logistic regression."""
    return estimate_smoothness_fn(lambda w: global_gradient(dataset, spec, w), w_samples,
                                  convex=spec.kind == "logistic", rng=rng)


# --------------------------------------------------------------------------
# theory


@dataclass
class TheoryParams:
    L: float
    B: float
    K: int
    mu: float
    gamma: float = 0.0
    L_minus: float = 0.0
    epsilon: float | None = None
    delta: float | None = None

    @property
    def mu_bar(self) -> float:
        return self.mu - self.L_minus


@dataclass
class RhoReport:
    rho: float
    gamma_B_below_one: bool
    B_over_sqrt_K_below_one: bool

    @property
    def positive(self) -> bool:
        return self.rho > 0


def rho_bound(p: TheoryParams) -> RhoReport:
    """Sufficient-decrease constant of one FedProx round."""
    if p.mu <= 0:
        raise ValueError("mu must be > 0")
    if p.mu_bar <= 0:
        raise ValueError(f"mu_bar = mu - L_minus must be > 0, got {p.mu_bar}")
    if p.K < 1:
        raise ValueError("K must be >= 1")
    L, B, K, mu, mb, g = p.L, p.B, p.K, p.mu, p.mu_bar, p.gamma
    rho = (1.0 / mu
           - g * B / mu
           - B * (1 + g) * math.sqrt(2) / (mb * math.sqrt(K))
           - L * B * (1 + g) / (mb * mu)
           - L * (1 + g) ** 2 * B ** 2 / (2 * mb ** 2)
           - L * B ** 2 * (1 + g) ** 2 / (mb ** 2 * K) * (2 * math.sqrt(2 * K) + 2))
    return RhoReport(float(rho), g * B < 1, B / math.sqrt(K) < 1)


def iteration_estimate(p: TheoryParams) -> float:
    """Delta / (rho * eps): order-of-magnitude round count to reach eps."""
    if p.epsilon is None or p.epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if p.delta is None:
        raise ValueError("delta is required")
    rho = rho_bound(p).rho
    if rho <= 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    return p.delta / (rho * p.epsilon)


def detect_convergence(loss_history: Sequence[float]) -> str:
    """'diverged', 'converged' or 'running' from the tail of a loss history."""
    if not loss_history:
        raise ValueError("empty loss history")
    h = loss_history
    if len(h) > DIVERGED_WINDOW and h[-1] - h[-1 - DIVERGED_WINDOW] > DIVERGED_RISE:
        return "diverged"
    if not math.isfinite(h[-1]):
        return "diverged"
    if len(h) >= 2 and abs(h[-1] - h[-2]) < CONVERGED_DELTA:
        return "converged"
    return "running"
