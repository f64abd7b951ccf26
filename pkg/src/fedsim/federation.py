"""Round orchestration for FedAvg, FedProx and FedDane."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from fedsim.data import FederatedDataset
from fedsim.metrics import (DEFAULT_EPSILON, detect_convergence, dissimilarity_from_gradients,
                            device_gradients, global_loss, pooled_test_accuracy)
from fedsim.model import ModelSpec, gradient, init_params
from fedsim.rng import stream
from fedsim.solver import SolverConfig, SolverReport, solve_local

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedprox", "feddane")
# scheme A: sample with probability p_k, simple average
WEIGHTED_SAMPLE_SIMPLE_AVG = "weighted_sample_simple_avg"
# scheme B: sample uniformly, average weighted by n_k
UNIFORM_SAMPLE_WEIGHTED_AVG = "uniform_sample_weighted_avg"
SCHEMES = (WEIGHTED_SAMPLE_SIMPLE_AVG, UNIFORM_SAMPLE_WEIGHTED_AVG)


@dataclass(frozen=True)
class FederationConfig:
    algorithm: str = "fedprox"
    K: int = 10
    T: int = 100
    E: int = 20
    mu: float = 0.0
    learning_rate: float = 0.01
    batch_size: int = 10
    straggler_fraction: float = 0.0
    sampling_scheme: str = UNIFORM_SAMPLE_WEIGHTED_AVG
    adaptive_mu: bool = False
    mu_step: float = 0.1
    mu_patience: int = 5
    master_seed: int = 0
    telemetry_every: int = 1
    feddane_full_participation: bool = False
    threads: int = 1

    def validate(self, num_devices: int | None = None) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.sampling_scheme not in SCHEMES:
            raise ValueError(f"sampling_scheme must be one of {SCHEMES}")
        if self.K < 1 or (num_devices is not None and self.K > num_devices):
            raise ValueError(f"K must be in [1, {num_devices}], got {self.K}")
        if self.T < 0 or self.E < 1 or self.batch_size < 1:
            raise ValueError("need T >= 0, E >= 1, batch_size >= 1")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.algorithm == "fedavg" and (self.mu != 0 or self.adaptive_mu):
            raise ValueError("fedavg requires mu = 0 and no adaptive mu")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.straggler_fraction < 1.0:
            raise ValueError("straggler_fraction must be in [0, 1)")
        if self.telemetry_every < 1 or self.threads < 1:
            raise ValueError("telemetry_every and threads must be >= 1")


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    epochs: list[int]
    stragglers: list[bool]
    gammas: list[float]
    dropped: list[int]
    diverged: list[int]
    mu: float
    aborted: bool = False
    train_loss: float | None = None
    test_accuracy: float | None = None
    B: float | None = None
    grad_variance: float | None = None
    grad_norm_sq: float | None = None
    status: str = "running"

    @property
    def mean_gamma(self) -> float:
        vals = [g for g in self.gammas if math.isfinite(g)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mean_gamma"] = self.mean_gamma
        return out


@dataclass
class MuController:
    """Raise mu after a loss increase; lower it after ``patience`` straight decreases."""
    mu: float
    step: float = 0.1
    patience: int = 5
    streak: int = 0

    def update(self, loss_t: float, loss_prev: float) -> float:
        if loss_t > loss_prev:
            self.mu = round(self.mu + self.step, 12)
            self.streak = 0
        elif loss_t < loss_prev:
            self.streak += 1
            if self.streak >= self.patience:
                self.mu = max(0.0, round(self.mu - self.step, 12))
                self.streak = 0
        return self.mu


def adaptive_mu_update(controller: MuController, loss_t: float, loss_prev: float) -> float:
    return controller.update(loss_t, loss_prev)


def sample_devices(scheme: str, weights: np.ndarray, K: int,
                   rng: np.random.Generator) -> list[int]:
    """Scheme A draws K times with replacement by p_k; scheme B draws K uniformly without."""
    n = weights.shape[0]
    if not 1 <= K:
        raise ValueError("K must be >= 1")
    if scheme == WEIGHTED_SAMPLE_SIMPLE_AVG:
        return [int(i) for i in rng.choice(n, size=K, replace=True, p=weights)]
    if scheme == UNIFORM_SAMPLE_WEIGHTED_AVG:
        if K > n:
            raise ValueError(f"cannot draw {K} of {n} devices without replacement")
        return [int(i) for i in rng.choice(n, size=K, replace=False)]
    raise ValueError(f"unknown sampling scheme {scheme!r}")


def straggler_count(K: int, fraction: float) -> int:
    return int(math.floor(fraction * K + 0.5))


def assign_stragglers(num_selected: int, fraction: float, E: int,
                      rng: np.random.Generator) -> tuple[list[int], list[bool]]:
    """Epoch budgets per selected slot: stragglers get Uniform{1..E}, the rest E."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    if E < 1:
        raise ValueError("E must be >= 1")
    count = straggler_count(num_selected, fraction)
    slots = set(int(i) for i in rng.choice(num_selected, size=count, replace=False))
    draws = rng.integers(1, E + 1, size=num_selected)
    epochs = [int(draws[i]) if i in slots else E for i in range(num_selected)]
    return epochs, [i in slots for i in range(num_selected)]


def aggregate(updates: list[tuple[int, np.ndarray, int]], scheme: str) -> np.ndarray:
    """Average ``(device_id, params, n_k)`` updates according to ``scheme``."""
    if not updates:
        raise ValueError("no updates to aggregate")
    stacked = np.stack([u[1] for u in updates])
    if scheme == WEIGHTED_SAMPLE_SIMPLE_AVG:
        return stacked.mean(axis=0)
    if scheme == UNIFORM_SAMPLE_WEIGHTED_AVG:
        n = np.array([u[2] for u in updates], dtype=np.float64)
        return (n / n.sum()) @ stacked
    raise ValueError(f"unknown sampling scheme {scheme!r}")


def feddane_corrections(dataset: FederatedDataset, spec: ModelSpec, w: np.ndarray,
                        selected: list[int], full_participation: bool = False) -> dict[int, np.ndarray]:
    """Per-device correction c_k = grad F_k(w) - g_bar.

    ``g_bar`` sums n_k / n * grad F_k(w) over the distinct sampled devices (all
    devices with ``full_participation``), with n the total sample count, so it
    underestimates the full gradient when only part of the population is seen.
    c_k is accumulated from pairwise differences so that identical local
    gradients under full participation give exactly zero.
    """
    pool = list(range(dataset.num_devices)) if full_participation else sorted(set(selected))
    grads = {k: gradient(spec, w, dataset.shards[k].train_x, dataset.shards[k].train_y)
             for k in sorted(set(pool) | set(selected))}
    n_total = int(dataset.sample_counts.sum())
    n_pool = [dataset.shards[k].n_k for k in pool]
    omega = np.array(n_pool, dtype=np.float64) / n_total
    missing = (n_total - sum(n_pool)) / n_total
    out = {}
    for k in sorted(set(selected)):
        c = missing * grads[k]
        for wt, j in zip(omega, pool):
            c += wt * (grads[k] - grads[j])
        out[k] = c
    return out


@dataclass
class RoundOutcome:
    params: np.ndarray
    record: RoundRecord
    reports: dict[tuple[int, int], SolverReport] = field(default_factory=dict)


def run_round(w: np.ndarray, mu: float, cfg: FederationConfig, dataset: FederatedDataset,
              spec: ModelSpec, t: int) -> RoundOutcome:
    """One communication round from global parameters ``w`` (telemetry not included)."""
    seed = cfg.master_seed
    selected = sample_devices(cfg.sampling_scheme, dataset.weights, cfg.K, stream(seed, "sampling", t))
    epochs, stragglers = assign_stragglers(len(selected), cfg.straggler_fraction, cfg.E,
                                           stream(seed, "stragglers", t))
    local_mu = 0.0 if cfg.algorithm == "fedavg" else mu
    corrections = {}
    if cfg.algorithm == "feddane":
        corrections = feddane_corrections(dataset, spec, w, selected, cfg.feddane_full_participation)

    jobs = sorted(set(zip(selected, epochs)))

    def solve(job):
        k, ep = job
        scfg = SolverConfig(epochs=ep, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                            mu=local_mu, rng=stream(seed, "minibatch", t, k),
                            correction=corrections.get(k))
        return solve_local(spec, dataset.shards[k], w, scfg)

    if cfg.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = dict(zip(jobs, pool.map(solve, jobs)))
    else:
        results = {job: solve(job) for job in jobs}

    updates, dropped, diverged, gammas = [], [], [], []
    for k, ep, slow in zip(selected, epochs, stragglers):
        w_k, report = results[(k, ep)]
        gammas.append(report.attained_gamma)
        if report.diverged:
            diverged.append(k)
            continue
        if cfg.algorithm == "fedavg" and slow:
            dropped.append(k)
            continue
        updates.append((k, w_k, dataset.shards[k].n_k))

    aborted = not updates
    if aborted:
        log.warning("round %d: no updates received, keeping previous parameters", t)
        w_new = w.copy()
    else:
        w_new = aggregate(updates, cfg.sampling_scheme)
    record = RoundRecord(round=t, selected=selected, epochs=epochs, stragglers=stragglers,
                         gammas=gammas, dropped=dropped, diverged=diverged, mu=local_mu,
                         aborted=aborted)
    return RoundOutcome(w_new, record, {job: r[1] for job, r in results.items()})


def feddane_round(w: np.ndarray, mu: float, cfg: FederationConfig, dataset: FederatedDataset,
                  spec: ModelSpec, t: int) -> RoundOutcome:
    return run_round(w, mu, replace(cfg, algorithm="feddane"), dataset, spec, t)


class Simulation:
    """Stateful driver: rounds, telemetry and the adaptive-mu controller."""

    def __init__(self, cfg: FederationConfig, dataset: FederatedDataset,
                 spec: ModelSpec | None = None, w0: np.ndarray | None = None):
        cfg.validate(dataset.num_devices)
        self.cfg = cfg
        self.dataset = dataset
        self.spec = spec or ModelSpec("logistic", dataset.input_dim, dataset.num_classes)
        if w0 is None:
            w0 = init_params(self.spec, stream(cfg.master_seed, "init"))
        self.w = np.array(w0, dtype=np.float64)
        self.t = 0
        self.records: list[RoundRecord] = []
        self.initial_loss = global_loss(dataset, self.spec, self.w)
        self.loss_history = [self.initial_loss]
        self.controller = MuController(cfg.mu, cfg.mu_step, cfg.mu_patience) if cfg.adaptive_mu else None
        self.halted = False

    @property
    def mu(self) -> float:
        return self.controller.mu if self.controller else self.cfg.mu

    def telemetry_due(self, t: int) -> bool:
        return (self.controller is not None or (t + 1) % self.cfg.telemetry_every == 0
                or t == self.cfg.T - 1)

    def step(self) -> RoundRecord:
        t = self.t
        out = run_round(self.w, self.mu, self.cfg, self.dataset, self.spec, t)
        self.w = out.params
        rec = out.record
        if not np.all(np.isfinite(self.w)):
            rec.status = "diverged"
            self.halted = True
        elif self.telemetry_due(t):
            self._telemetry(rec)
            if self.controller is not None:
                self.controller.update(rec.train_loss, self.loss_history[-2])
        self.records.append(rec)
        self.t += 1
        return rec

    def _telemetry(self, rec: RoundRecord) -> None:
        ds, spec = self.dataset, self.spec
        rec.train_loss = global_loss(ds, spec, self.w)
        rec.test_accuracy = pooled_test_accuracy(ds, spec, self.w)
        reading = dissimilarity_from_gradients(device_gradients(ds, spec, self.w), ds.weights,
                                               DEFAULT_EPSILON)
        rec.B = reading.B
        rec.grad_variance = reading.grad_variance
        rec.grad_norm_sq = reading.global_grad_norm_sq
        self.loss_history.append(rec.train_loss)
        rec.status = detect_convergence(self.loss_history)

    def run(self) -> list[RoundRecord]:
        while self.t < self.cfg.T and not self.halted:
            self.step()
        return self.records


def run_experiment(cfg: FederationConfig, dataset: FederatedDataset,
                   spec: ModelSpec | None = None) -> list[RoundRecord]:
    return Simulation(cfg, dataset, spec).run()
