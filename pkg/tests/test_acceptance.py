"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the summary lines appear at
the end of the session) or ``python3 tests/test_acceptance.py``.  Long
federated runs are cached per process so criteria sharing a setup reuse them.
MNIST criteria read FEDSIM_MNIST_DIR (default /root/data/mnist) and are
skipped when the files are missing.
"""

import functools
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fedsim.cli import main as cli_main
from fedsim.data import SyntheticSpec, generate_synthetic, load_mnist, partition_mnist
from fedsim.federation import (WEIGHTED_SAMPLE_SIMPLE_AVG, FederationConfig, Simulation,
                               run_round)
from fedsim.metrics import (DEFAULT_EPSILON, TheoryParams, bounded_variance_bound, dissimilarity,
                            global_gradient, global_loss, rho_bound)
from fedsim.model import Batch, ModelSpec, finite_difference_gradient, local_gradient
from fedsim.solver import SolverConfig, inexactness, measure_inexactness, solve_local

sys.path.insert(0, str(Path(__file__).parent))
from conftest import ACCEPTANCE_LINES  # noqa: E402

SEEDS = (0, 1, 2)
SPEC = ModelSpec("logistic", 60, 10)
MNIST_DIR = Path(os.environ.get("FEDSIM_MNIST_DIR", "/root/data/mnist"))


def report(number, ok, detail, t0):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} ({time.time() - t0:.1f}s) {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@functools.lru_cache(maxsize=None)
def synthetic(alpha, beta, seed, iid=False):
    return generate_synthetic(SyntheticSpec(alpha=alpha, beta=beta, iid=iid, seed=seed))


@functools.lru_cache(maxsize=None)
def final_run(alpha, beta, seed, iid=False, telemetry_every=1, **kw):
    """(final train loss, mean gradient variance over telemetry rounds) of a 200-round run."""
    cfg = FederationConfig(K=10, T=200, E=20, master_seed=seed, telemetry_every=telemetry_every, **kw)
    recs = Simulation(cfg, synthetic(alpha, beta, seed, iid)).run()
    variances = [r.grad_variance for r in recs if r.grad_variance is not None]
    return recs[-1].train_loss, float(np.mean(variances))


def mean_final(alpha, beta, **kw):
    return float(np.mean([final_run(alpha, beta, s, **kw)[0] for s in SEEDS]))


# --------------------------------------------------------------------------

def test_criterion_01_reduction_equivalence():
    t0 = time.time()
    identical = True
    for seed in (0, 1):
        ds = synthetic(1.0, 1.0, seed)
        base = dict(T=100, E=20, master_seed=seed, telemetry_every=100)
        avg = Simulation(FederationConfig(algorithm="fedavg", **base), ds)
        prox = Simulation(FederationConfig(algorithm="fedprox", mu=0.0, **base), ds)
        for _ in range(100):
            avg.step()
            prox.step()
            identical &= bool(np.array_equal(avg.w, prox.w))
    report(1, identical, "FedProx(mu=0) vs FedAvg, 100 rounds x 2 seeds, bit-identical", t0)


def test_criterion_02_fig2_ordering():
    t0 = time.time()
    avg = mean_final(1.0, 1.0, algorithm="fedavg", straggler_fraction=0.9)
    prox0 = mean_final(1.0, 1.0, algorithm="fedprox", mu=0.0, straggler_fraction=0.9)
    prox1 = mean_final(1.0, 1.0, algorithm="fedprox", mu=1.0, straggler_fraction=0.9)
    ok = prox1 <= prox0 <= avg and avg - prox1 > 0.05
    report(2, ok, f"mean final loss FedProx(mu=1)={prox1:.4f} FedProx(mu=0)={prox0:.4f} "
                  f"FedAvg={avg:.4f} (need ordered, gap > 0.05)", t0)


def test_criterion_03_straggler_monotonicity():
    t0 = time.time()
    losses = [mean_final(1.0, 1.0, algorithm="fedavg", straggler_fraction=f) for f in (0.0, 0.5, 0.9)]
    ok = losses[0] <= losses[1] <= losses[2]
    report(3, ok, "FedAvg mean final loss at 0/50/90% stragglers = "
                  + ", ".join(f"{v:.4f}" for v in losses), t0)


def test_criterion_04_heterogeneity_ordering():
    t0 = time.time()
    levels = (0.0, 0.5, 1.0)
    losses, variances = [], []
    for a in levels:
        runs = [final_run(a, a, s, algorithm="fedprox", mu=0.0) for s in SEEDS]
        losses.append(float(np.mean([r[0] for r in runs])))
        variances.append(float(np.mean([r[1] for r in runs])))
    ok_loss = losses[0] <= losses[1] <= losses[2]
    ok_var = variances[0] <= variances[1] <= variances[2]
    report(4, ok_loss and ok_var,
           "Synthetic(0,0)/(0.5,0.5)/(1,1): loss " + ", ".join(f"{v:.4f}" for v in losses)
           + f" [{'ordered' if ok_loss else 'NOT ordered'}]; gradient variance "
           + ", ".join(f"{v:.3f}" for v in variances) + f" [{'ordered' if ok_var else 'NOT ordered'}]",
           t0)


def test_criterion_05_dissimilarity_identities():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst_rel, worst_B, bound_ok = 0.0, np.inf, True
    for i in range(50):
        a, b = rng.uniform(0, 1.5, 2)
        ds = generate_synthetic(SyntheticSpec(alpha=a, beta=b, num_devices=int(rng.integers(2, 12)),
                                              seed=int(rng.integers(0, 2**31)), max_samples=200))
        w = rng.normal(0, rng.uniform(0.01, 1.0), SPEC.dim)
        r = dissimilarity(ds, SPEC, w)
        lhs = r.mean_local_grad_norm_sq
        worst_rel = max(worst_rel, abs(lhs - r.global_grad_norm_sq - r.grad_variance) / lhs)
        worst_B = min(worst_B, r.B)
        for eps in (DEFAULT_EPSILON, 0.5 * r.global_grad_norm_sq):
            if r.global_grad_norm_sq > eps:
                bound_ok &= r.B <= bounded_variance_bound(r.grad_variance, eps) + 1e-9
    ok = worst_rel <= 1e-9 and worst_B >= 1 - 1e-9 and bound_ok
    report(5, ok, f"50 pairs: max relative decomposition error {worst_rel:.2e}, min B {worst_B:.4f}, "
                  f"variance bound {'holds' if bound_ok else 'violated'}", t0)


def test_criterion_06_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(6)
    worst = {}
    for kind in ("logistic", "mlp"):
        worst[kind] = 0.0
        for _ in range(100):
            d, c, n = int(rng.integers(2, 7)), int(rng.integers(2, 5)), int(rng.integers(1, 9))
            spec = ModelSpec(kind, d, c, hidden_dim=int(rng.integers(2, 6)))
            w = rng.normal(0, 0.7, spec.dim)
            batch = Batch(rng.normal(size=(n, d)), rng.integers(0, c, n))
            g = local_gradient(spec, w, batch)
            fd = finite_difference_gradient(spec, w, batch, h=1e-5)
            worst[kind] = max(worst[kind], float(np.linalg.norm(g - fd) / (1 + np.linalg.norm(g))))
    ok = all(v < 1e-5 for v in worst.values())
    report(6, ok, "100 checks per kind, worst relative error "
                  + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()), t0)


def test_criterion_07_inexactness_semantics():
    t0 = time.time()
    ds = synthetic(0.5, 0.5, 0)
    # median-sized shard; the largest one sits at the constant-step SGD noise floor after one epoch
    shard = ds.shards[int(np.argsort(ds.sample_counts)[ds.num_devices // 2])]
    anchor = np.zeros(SPEC.dim)
    at_anchor = measure_inexactness(SPEC, shard, anchor, anchor, 1.0)

    rng = np.random.default_rng(7)
    m = rng.normal(size=(8, 8))
    A, b, w_t, mu = m @ m.T, rng.normal(size=8), rng.normal(size=8), 1.0
    grad_h = lambda w: A @ w - b + mu * (w - w_t)
    w_star = np.linalg.solve(A + mu * np.eye(8), b + mu * w_t)
    at_min = inexactness(grad_h, w_star, w_t)

    means = []
    for epochs in (1, 2, 4, 8, 16):
        g = [solve_local(SPEC, shard, anchor,
                         SolverConfig(epochs, 0.01, 10, 1.0, np.random.default_rng(s)))[1].attained_gamma
             for s in range(10)]
        means.append(float(np.mean(g)))
    monotone = all(x >= y for x, y in zip(means, means[1:]))
    ok = at_anchor == 1.0 and abs(at_min) <= 1e-10 and monotone
    report(7, ok, f"shard n_k={shard.n_k}: gamma at anchor {at_anchor}, at quadratic minimiser {at_min:.1e}, mean gamma over "
                  "epochs 1/2/4/8/16 = " + ", ".join(f"{v:.3f}" for v in means), t0)


def test_criterion_08_theory_calculator():
    t0 = time.time()
    L, B = 1.0, 2.0
    rep = rho_bound(TheoryParams(L=L, B=B, K=64, mu=6 * L * B ** 2, gamma=0.0))
    lo, hi = 1 / (48 * L * B ** 2), 1 / (12 * L * B ** 2)
    ok = lo <= rep.rho <= hi and rep.gamma_B_below_one and rep.B_over_sqrt_K_below_one
    report(8, ok, f"rho={rep.rho:.6f} in [{lo:.6f}, {hi:.6f}], gamma*B<1={rep.gamma_B_below_one}, "
                  f"B/sqrt(K)<1={rep.B_over_sqrt_K_below_one}", t0)


def test_criterion_09_sufficient_decrease():
    t0 = time.time()
    ds = synthetic(0.5, 0.5, 0)
    K = 20
    # global smoothness bound: the softmax Hessian is dominated by (1/2) I (x) E[x x^T]
    X = np.concatenate([np.c_[s.train_x, np.ones(s.n_k)] for s in ds.shards])
    L = 0.5 * float(np.linalg.eigvalsh(X.T @ X / X.shape[0]).max())
    L_local = max(0.5 * float(np.linalg.eigvalsh(
        np.c_[s.train_x, np.ones(s.n_k)].T @ np.c_[s.train_x, np.ones(s.n_k)] / s.n_k).max())
        for s in ds.shards)
    B = 1.25 * dissimilarity(ds, SPEC, np.zeros(SPEC.dim)).B
    mu = 1.0
    while not rho_bound(TheoryParams(L=L, B=B, K=K, mu=mu)).positive:
        mu *= 2
    cfg = FederationConfig(algorithm="fedprox", K=K, E=5, mu=mu, learning_rate=1 / (mu + L_local),
                           batch_size=int(ds.sample_counts.max()),
                           sampling_scheme=WEIGHTED_SAMPLE_SIMPLE_AVG)
    w = np.zeros(SPEC.dim)
    counted = decreased = 0
    worst_gamma = 0.0
    for t in range(100):
        f_t = global_loss(ds, SPEC, w)
        g = global_gradient(ds, SPEC, w)
        outs = [run_round(w, mu, replace(cfg, master_seed=s), ds, SPEC, t) for s in range(5)]
        worst_gamma = max(worst_gamma, max(max(o.record.gammas) for o in outs))
        if float(g @ g) > DEFAULT_EPSILON:
            counted += 1
            decreased += f_t - np.mean([global_loss(ds, SPEC, o.params) for o in outs]) >= 0
        w = outs[0].params
    share = decreased / counted
    ok = share >= 0.9 and worst_gamma < 0.01
    report(9, ok, f"mu={mu:g} (L={L:.2f}, B={B:.2f}, K={K}, rho>0): expected decrease in "
                  f"{decreased}/{counted} rounds, max gamma {worst_gamma:.1e}", t0)


def test_criterion_10_adaptive_mu():
    t0 = time.time()
    details, ok = [], True
    for name, (a, b, iid), mu0 in (("IID", (0.0, 0.0, True), 1.0), ("(1,1)", (1.0, 1.0, False), 0.0)):
        fixed = {mu: np.mean([final_run(a, b, s, iid=iid, telemetry_every=200, mu=mu) for s in SEEDS],
                             axis=0)[0] for mu in (0.001, 0.01, 0.1, 1.0)}
        adaptive = mean_final(a, b, iid=iid, mu=mu0, adaptive_mu=True)
        best = min(fixed.values())
        ok &= adaptive <= 1.1 * best
        details.append(f"{name}: adaptive {adaptive:.4f} vs best fixed {best:.4f}")
    report(10, ok, "; ".join(details) + " (need within 10%)", t0)


def test_criterion_11_feddane():
    t0 = time.time()
    worse = 0
    pairs = []
    for s in SEEDS:
        dane = final_run(1.0, 1.0, s, telemetry_every=200, algorithm="feddane", mu=0.0)[0]
        prox = final_run(1.0, 1.0, s, telemetry_every=200, algorithm="fedprox", mu=0.0)[0]
        worse += dane > prox
        pairs.append(f"{dane:.4f}/{prox:.4f}")

    from conftest import identical_dataset
    same = identical_dataset(synthetic(1.0, 1.0, 0).shards[0], 6)
    cfg = FederationConfig(algorithm="fedprox", K=6, E=5, mu=0.1)
    w_p = w_d = np.zeros(SPEC.dim)
    exact = True
    for t in range(20):
        w_p = run_round(w_p, 0.1, cfg, same, SPEC, t).params
        w_d = run_round(w_d, 0.1, replace(cfg, algorithm="feddane"), same, SPEC, t).params
        exact &= bool(np.array_equal(w_p, w_d))
    ok = worse >= 2 and exact
    report(11, ok, f"FedDane/FedProx final loss per seed {', '.join(pairs)}: FedDane worse in "
                   f"{worse}/3; identical shards exact match={exact}", t0)


def test_criterion_12_mnist_partition():
    t0 = time.time()
    if not (MNIST_DIR / "train-images-idx3-ubyte").exists() and \
            not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        ACCEPTANCE_LINES.append(f"criterion 12: SKIP (no MNIST files in {MNIST_DIR})")
        pytest.skip(f"MNIST not found in {MNIST_DIR}")
    images, labels = load_mnist(MNIST_DIR)
    ds = partition_mnist(images, labels, num_devices=1000, classes_per_device=2)
    total = int(sum(s.rows for s in ds.shards))
    mean = total / ds.num_devices
    ok = ds.num_devices == 1000 and abs(total - 69035) <= 0.05 * 69035 and abs(mean - 69) <= 0.05 * 69
    report(12, ok, f"{ds.num_devices} devices, {total} samples, mean {mean:.2f}/device", t0)


def test_criterion_13_determinism(tmp_path):
    t0 = time.time()
    configs = {
        "fedprox_stragglers": {"dataset": "synthetic(1,1)", "mu": 0.1, "straggler_fraction": 0.5,
                               "T": 8, "E": 3, "runs": [0, 5]},
        "feddane": {"dataset": "synthetic(0.5,0.5)", "algorithm": "feddane", "T": 5, "E": 2},
        "adaptive_mlp": {"dataset": "synthetic_iid", "adaptive_mu": True, "T": 6, "E": 2,
                         "model": {"kind": "mlp", "hidden_dim": 8}},
        "scheme_a": {"dataset": "synthetic", "sampling_scheme": "weighted_sample_simple_avg",
                     "T": 5, "E": 2},
    }
    same = []
    for name, doc in configs.items():
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(doc))
        outs = []
        for rep_i, threads in enumerate(("1", "2")):
            out = tmp_path / f"{name}_{rep_i}"
            assert cli_main(["run", "--config", str(path), "--out", str(out), "--threads", threads]) == 0
            outs.append((out / "results.csv").read_bytes())
        same.append(outs[0] == outs[1])
    report(13, all(same), f"{sum(same)}/{len(same)} configs byte-identical across two runs", t0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
