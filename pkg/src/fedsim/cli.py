"""Command-line harness: generate, run, sweep, metrics, theory."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from fedsim.config import SCHEMA_VERSION, ConfigError, ExperimentConfig, model_for, parse_config
from fedsim.data import DatasetFormatError, load_dataset, save_dataset
from fedsim.federation import RoundRecord, Simulation
from fedsim.metrics import TheoryParams, dissimilarity, global_loss, iteration_estimate, rho_bound
from fedsim.model import ModelSpec, params_from_bytes, params_to_bytes
from fedsim.rng import RNG_ALGORITHM

log = logging.getLogger("fedsim")

RESULT_COLUMNS = ("run_seed", "round", "algorithm", "mu", "straggler_fraction", "train_loss",
                  "test_accuracy", "B", "grad_variance", "mean_gamma", "dropped_count", "status")


def fmt(value) -> str:
    """CSV cell: shortest round-trip repr for floats, empty for missing."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else fmt(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def result_row(seed: int, rec: RoundRecord, algorithm: str, fraction: float) -> list[str]:
    values = (seed, rec.round, algorithm, rec.mu, fraction, rec.train_loss, rec.test_accuracy,
              rec.B, rec.grad_variance, rec.mean_gamma, len(rec.dropped), rec.status)
    return [fmt(v) for v in values]


def run_config(cfg: ExperimentConfig, out: Path) -> dict:
    """Execute every seed in ``cfg.runs``; write results.csv, rounds.jsonl, summary.json."""
    out.mkdir(parents=True, exist_ok=True)
    dataset = cfg.dataset.build()
    spec = model_for(cfg, dataset)
    fed = cfg.federation
    csv_buf = io.StringIO()
    writer = csv.writer(csv_buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    jsonl = []
    summary_runs = []
    for seed in cfg.runs:
        run_cfg = replace(fed, master_seed=seed)
        sim = Simulation(run_cfg, dataset, spec)
        log.info("run seed=%d algorithm=%s mu=%s fraction=%s T=%d", seed, fed.algorithm, fed.mu,
                 fed.straggler_fraction, fed.T)
        for rec in sim.run():
            if rec.train_loss is not None or rec.status == "diverged":
                writer.writerow(result_row(seed, rec, fed.algorithm, fed.straggler_fraction))
            line = {"schema_version": SCHEMA_VERSION, "run_seed": seed, **rec.to_dict()}
            jsonl.append(json.dumps(_json_safe(line), sort_keys=True))
        (out / f"params_seed{seed}.bin").write_bytes(params_to_bytes(sim.w))
        last = next((r for r in reversed(sim.records) if r.train_loss is not None), None)
        summary_runs.append({
            "run_seed": seed,
            "rounds": len(sim.records),
            "initial_train_loss": sim.initial_loss,
            "final_train_loss": last.train_loss if last else None,
            "final_test_accuracy": last.test_accuracy if last else None,
            "status": sim.records[-1].status if sim.records else "running",
        })
    (out / "results.csv").write_text(csv_buf.getvalue(), encoding="utf-8")
    (out / "rounds.jsonl").write_text("".join(l + "\n" for l in jsonl), encoding="utf-8")
    summary = {
        "schema_version": SCHEMA_VERSION,
        "rng": RNG_ALGORITHM,
        "dataset": {"kind": cfg.dataset.kind, **cfg.dataset.params},
        "federation": asdict(fed),
        "model": asdict(spec),
        "runs": summary_runs,
    }
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    return summary


def cmd_generate(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = cfg.dataset.build()
    path = out / "dataset.fsim"
    save_dataset(dataset, path)
    print(f"wrote {path} ({dataset.num_devices} devices, {int(dataset.sample_counts.sum())} train rows)")
    return 0


def cmd_run(args, cfg: ExperimentConfig) -> int:
    summary = run_config(cfg, Path(args.out))
    for run in summary["runs"]:
        print(f"seed {run['run_seed']}: final train loss {fmt(run['final_train_loss'])} "
              f"({run['status']})")
    return 0


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    if cfg.federation.algorithm == "fedavg":
        raise ConfigError("federation.algorithm", "sweep varies mu; use fedprox or feddane")
    fractions = cfg.sweep.straggler_fractions or [cfg.federation.straggler_fraction]
    root = Path(args.out)
    for frac in fractions:
        for mu in cfg.sweep.mus:
            cell = replace(cfg, federation=replace(cfg.federation, mu=mu, straggler_fraction=frac,
                                                   adaptive_mu=False))
            out = root / f"mu{fmt(mu)}_stragglers{fmt(frac)}"
            summary = run_config(cell, out)
            finals = [fmt(r["final_train_loss"]) for r in summary["runs"]]
            print(f"mu={fmt(mu)} stragglers={fmt(frac)}: {', '.join(finals)} -> {out / 'results.csv'}")
    return 0


def cmd_metrics(args) -> int:
    dataset = load_dataset(args.dataset)
    w = params_from_bytes(Path(args.checkpoint).read_bytes())
    spec = ModelSpec(args.model, dataset.input_dim, dataset.num_classes, args.hidden_dim)
    if w.shape[0] != spec.dim:
        raise ValueError(f"checkpoint has {w.shape[0]} parameters, model needs {spec.dim}")
    reading = dissimilarity(dataset, spec, w, args.epsilon)
    out = {"train_loss": global_loss(dataset, spec, w), **asdict(reading)}
    print(json.dumps(_json_safe(out), indent=2, sort_keys=True))
    return 0


_THEORY_KEYS = {"L", "B", "K", "mu", "gamma", "L_minus", "epsilon", "delta"}


def cmd_theory(args) -> int:
    try:
        raw = json.loads(Path(args.params).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("<document>", "top level must be an object")
    for key in raw:
        if key not in _THEORY_KEYS:
            raise ConfigError(key, "unknown key")
    for key in ("L", "B", "K", "mu"):
        if key not in raw:
            raise ConfigError(key, "required")
    for key, value in raw.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
    if not isinstance(raw["K"], int):
        raise ConfigError("K", "expected an integer")
    p = TheoryParams(**raw)
    report = rho_bound(p)
    out = {"rho": report.rho, "rho_positive": report.positive,
           "gamma_B_below_one": report.gamma_B_below_one,
           "B_over_sqrt_K_below_one": report.B_over_sqrt_K_below_one}
    if report.positive and p.epsilon and p.delta is not None:
        out["iteration_estimate"] = iteration_estimate(p)
    print(json.dumps(_json_safe(out), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the run seeds with a single seed")
        p.add_argument("--telemetry-every", type=int, help="telemetry cadence in rounds")
        p.add_argument("--threads", type=int, default=1, help="parallel device solves per round")
        return p

    experiment("generate", "write the configured dataset to OUT/dataset.fsim")
    experiment("run", "run one experiment config")
    experiment("sweep", "cross product over mu values and straggler fractions")

    m = sub.add_parser("metrics", help="dissimilarity of a saved dataset at a checkpoint")
    m.add_argument("--dataset", required=True)
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--model", choices=("logistic", "mlp"), default="logistic")
    m.add_argument("--hidden-dim", type=int, default=32)
    m.add_argument("--epsilon", type=float, default=1e-10)

    t = sub.add_parser("theory", help="evaluate the sufficient-decrease constant")
    t.add_argument("--params", required=True, help="JSON file with L, B, K, mu[, gamma, ...]")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    fed = cfg.federation
    if args.telemetry_every is not None:
        if args.telemetry_every < 1:
            raise ConfigError("--telemetry-every", "must be >= 1")
        cfg = replace(cfg, telemetry_every=args.telemetry_every)
        fed = replace(fed, telemetry_every=args.telemetry_every)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        fed = replace(fed, threads=args.threads)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed", "must be >= 0")
        cfg = replace(cfg, runs=[args.seed])
    return replace(cfg, federation=fed)


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("FEDSIM_LOG", "warn").lower()
    logging.basicConfig(level={"error": logging.ERROR, "warn": logging.WARNING,
                               "info": logging.INFO, "debug": logging.DEBUG}.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "metrics":
            return cmd_metrics(args)
        if args.command == "theory":
            return cmd_theory(args)
        cfg = _apply_overrides(parse_config(args.config), args)
        return {"generate": cmd_generate, "run": cmd_run, "sweep": cmd_sweep}[args.command](args, cfg)
    except ConfigError as exc:
        print(f"fedsim: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, DatasetFormatError, ValueError, KeyError, TypeError) as exc:
        print(f"fedsim: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
