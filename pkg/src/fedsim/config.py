"""Experiment configuration: JSON parsing, defaults and validation."""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from fedsim.data import FILE_MAGIC, FederatedDataset, SyntheticSpec, generate_synthetic, \
    load_dataset, load_mnist, partition_mnist
from fedsim.federation import ALGORITHMS, SCHEMES, UNIFORM_SAMPLE_WEIGHTED_AVG, FederationConfig
from fedsim.model import ModelSpec

SCHEMA_VERSION = 1
DEFAULT_MU_GRID = (0.001, 0.01, 0.1, 1.0)
DEFAULT_LEARNING_RATE = {"synthetic": 0.01, "synthetic_iid": 0.01, "mnist": 0.03}
DEFAULT_TELEMETRY_EVERY = {"mnist": 5}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DatasetConfig:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def build(self) -> FederatedDataset:
        p = dict(self.params)
        if self.kind == "file":
            return load_dataset(p["path"])
        frac = p.pop("train_fraction", 0.8)
        if self.kind in ("synthetic", "synthetic_iid"):
            return generate_synthetic(SyntheticSpec(iid=self.kind == "synthetic_iid", **p), frac)
        images, labels = load_mnist(p.pop("dir"), p.pop("include_test", True))
        return partition_mnist(images, labels, train_fraction=frac, **p)


@dataclass
class SweepConfig:
    mus: list[float] = field(default_factory=lambda: list(DEFAULT_MU_GRID))
    straggler_fractions: list[float] | None = None


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    model: dict[str, Any]
    federation: FederationConfig
    telemetry_every: int
    runs: list[int]
    sweep: SweepConfig


_SYNTHETIC_KEYS = {"alpha", "beta", "num_devices", "power_law_exponent", "min_samples",
                   "max_samples", "seed", "train_fraction"}
_MNIST_KEYS = {"dir", "num_devices", "classes_per_device", "power_law_exponent", "seed",
               "include_test", "train_fraction", "max_weight_ratio"}
_FED_FIELDS = {f.name for f in fields(FederationConfig)} - {"telemetry_every", "threads"}
_TOP_KEYS = {"dataset", "model", "federation", "telemetry", "runs", "sweep"}


def _expect(value, types, path, what):
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(path, f"expected {what}, got {value!r}")
    if not isinstance(value, types):
        raise ConfigError(path, f"expected {what}, got {value!r}")
    return value


def _number(value, path):
    return float(_expect(value, (int, float), path, "a number"))


def _integer(value, path):
    return int(_expect(value, (int,), path, "an integer"))


def _reject_unknown(block: dict, allowed: set[str], path: str) -> None:
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")


def read_provenance(path: str | Path) -> dict[str, Any]:
    """Provenance block of a dataset file without loading the shards."""
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10 or head[:4] != FILE_MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        (length,) = struct.unpack("<I", head[6:10])
        return json.loads(fh.read(length).decode("utf-8"))


def _parse_dataset(raw, path="dataset") -> DatasetConfig:
    if isinstance(raw, str):
        m = re.fullmatch(r"synthetic\(\s*([0-9.]+)\s*,\s*([0-9.]+)\s*\)", raw)
        if m:
            raw = {"kind": "synthetic", "alpha": float(m.group(1)), "beta": float(m.group(2))}
        elif raw in ("synthetic", "synthetic_iid", "mnist"):
            raw = {"kind": raw}
        else:
            raise ConfigError(path, f"unknown dataset shorthand {raw!r}")
    _expect(raw, (dict,), path, "an object or shorthand string")
    raw = dict(raw)
    kind = raw.pop("kind", None)
    if kind == "synthetic":
        allowed = _SYNTHETIC_KEYS
    elif kind == "synthetic_iid":
        allowed = _SYNTHETIC_KEYS - {"alpha", "beta"}
    elif kind == "mnist":
        allowed = _MNIST_KEYS
    elif kind == "file":
        allowed = {"path"}
    else:
        raise ConfigError(f"{path}.kind", "must be synthetic, synthetic_iid, mnist or file")
    _reject_unknown(raw, allowed, path)
    params: dict[str, Any] = {}
    for key, value in raw.items():
        kp = f"{path}.{key}"
        if key in ("alpha", "beta", "power_law_exponent", "train_fraction", "max_weight_ratio"):
            params[key] = _number(value, kp)
            if params[key] < 0:
                raise ConfigError(kp, "must be >= 0")
        elif key in ("num_devices", "min_samples", "max_samples", "seed", "classes_per_device"):
            params[key] = _integer(value, kp)
            if params[key] < (0 if key == "seed" else 1):
                raise ConfigError(kp, "out of range")
        elif key == "include_test":
            params[key] = _expect(value, (bool,), kp, "a boolean")
        else:
            params[key] = str(_expect(value, (str,), kp, "a string"))
    if "train_fraction" in params and not 0 < params["train_fraction"] < 1:
        raise ConfigError(f"{path}.train_fraction", "must be in (0, 1)")
    if kind == "mnist" and "dir" not in params:
        raise ConfigError(f"{path}.dir", "required for mnist")
    if kind == "file" and "path" not in params:
        raise ConfigError(f"{path}.path", "required for file datasets")
    if kind in ("synthetic", "synthetic_iid"):
        try:
            SyntheticSpec(**{k: v for k, v in params.items() if k != "train_fraction"}).validate()
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from exc
    return DatasetConfig(kind, params)


def _dataset_family(ds: DatasetConfig) -> str:
    if ds.kind != "file":
        return ds.kind
    try:
        return read_provenance(ds.params["path"]).get("generator", "synthetic")
    except (OSError, ValueError):
        return "synthetic"


def _parse_model(raw, path="model") -> dict[str, Any]:
    if raw is None:
        return {}
    _expect(raw, (dict,), path, "an object")
    _reject_unknown(raw, {"kind", "hidden_dim"}, path)
    out = {}
    if "kind" in raw:
        if raw["kind"] not in ("logistic", "mlp"):
            raise ConfigError(f"{path}.kind", "must be logistic or mlp")
        out["kind"] = raw["kind"]
    if "hidden_dim" in raw:
        out["hidden_dim"] = _integer(raw["hidden_dim"], f"{path}.hidden_dim")
        if out["hidden_dim"] < 1:
            raise ConfigError(f"{path}.hidden_dim", "must be >= 1")
    return out


def _parse_federation(raw: dict, path: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in raw.items():
        kp = f"{path}.{key}" if path else key
        if key not in _FED_FIELDS:
            raise ConfigError(kp, "unknown key")
        if key == "algorithm":
            if value not in ALGORITHMS:
                raise ConfigError(kp, f"must be one of {', '.join(ALGORITHMS)}")
            out[key] = value
        elif key == "sampling_scheme":
            if value not in SCHEMES:
                raise ConfigError(kp, f"must be one of {', '.join(SCHEMES)}")
            out[key] = value
        elif key in ("adaptive_mu", "feddane_full_participation"):
            out[key] = _expect(value, (bool,), kp, "a boolean")
        elif key in ("K", "T", "E", "batch_size", "mu_patience", "master_seed"):
            out[key] = _integer(value, kp)
        else:
            out[key] = _number(value, kp)
    return out


def _check_federation(fed: dict[str, Any], num_devices: int | None) -> None:
    rules = [
        ("K", lambda v: v >= 1 and (num_devices is None or v <= num_devices),
         f"must be in [1, {num_devices if num_devices is not None else 'N'}]"),
        ("T", lambda v: v >= 0, "must be >= 0"),
        ("E", lambda v: v >= 1, "must be >= 1"),
        ("batch_size", lambda v: v >= 1, "must be >= 1"),
        ("mu", lambda v: v >= 0, "must be >= 0"),
        ("learning_rate", lambda v: v > 0, "must be > 0"),
        ("straggler_fraction", lambda v: 0 <= v < 1, "must be in [0, 1)"),
        ("mu_step", lambda v: v > 0, "must be > 0"),
        ("mu_patience", lambda v: v >= 1, "must be >= 1"),
        ("master_seed", lambda v: v >= 0, "must be >= 0"),
    ]
    for key, ok, msg in rules:
        if key in fed and not ok(fed[key]):
            raise ConfigError(f"federation.{key}", f"{msg}, got {fed[key]!r}")
    if fed.get("algorithm") == "fedavg":
        if fed.get("mu", 0.0) != 0.0:
            raise ConfigError("federation.mu", "fedavg forces mu = 0")
        if fed.get("adaptive_mu"):
            raise ConfigError("federation.adaptive_mu", "not available for fedavg")


def parse_config(source: str | Path | dict) -> ExperimentConfig:
    """Parse and validate a JSON experiment config (path, JSON text or dict)."""
    if isinstance(source, dict):
        doc = source
    else:
        text = str(source)
        if isinstance(source, Path) or not text.lstrip().startswith("{"):
            try:
                text = Path(source).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError("<file>", f"cannot read config: {exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("<document>", "top level must be an object")
    doc = dict(doc)

    # federation keys are also accepted at top level
    top_fed = {k: doc.pop(k) for k in list(doc) if k in _FED_FIELDS}
    _reject_unknown(doc, _TOP_KEYS, "")
    if "dataset" not in doc:
        raise ConfigError("dataset", "required")
    dataset = _parse_dataset(doc["dataset"])

    fed_block = doc.get("federation", {})
    _expect(fed_block, (dict,), "federation", "an object")
    clash = set(fed_block) & set(top_fed)
    if clash:
        raise ConfigError(sorted(clash)[0], "given both at top level and in federation")
    fed = _parse_federation(top_fed, "")
    fed.update(_parse_federation(fed_block, "federation"))

    num_devices = dataset.params.get("num_devices")
    if num_devices is None and dataset.kind in ("synthetic", "synthetic_iid"):
        num_devices = SyntheticSpec().num_devices
    elif num_devices is None and dataset.kind == "mnist":
        num_devices = 1000
    _check_federation(fed, num_devices)
    family = _dataset_family(dataset)
    fed.setdefault("learning_rate", DEFAULT_LEARNING_RATE.get(family, 0.01))
    fed.setdefault("K", 10)
    fed.setdefault("batch_size", 10)
    fed.setdefault("sampling_scheme", UNIFORM_SAMPLE_WEIGHTED_AVG)
    fed.setdefault("algorithm", "fedprox")
    if fed.get("adaptive_mu") and "mu" not in fed:
        fed["mu"] = 1.0 if dataset.kind == "synthetic_iid" else 0.0
    _check_federation(fed, num_devices)

    tele = doc.get("telemetry", {})
    _expect(tele, (dict,), "telemetry", "an object")
    _reject_unknown(tele, {"every"}, "telemetry")
    every = _integer(tele.get("every", DEFAULT_TELEMETRY_EVERY.get(family, 1)), "telemetry.every")
    if every < 1:
        raise ConfigError("telemetry.every", "must be >= 1")

    runs = doc.get("runs", [fed.get("master_seed", 0)])
    _expect(runs, (list,), "runs", "a list of seeds")
    if not runs:
        raise ConfigError("runs", "must list at least one seed")
    seeds = []
    for i, s in enumerate(runs):
        seeds.append(_integer(s, f"runs[{i}]"))
        if seeds[-1] < 0:
            raise ConfigError(f"runs[{i}]", "seed must be >= 0")

    sweep_raw = doc.get("sweep", {})
    _expect(sweep_raw, (dict,), "sweep", "an object")
    _reject_unknown(sweep_raw, {"mus", "straggler_fractions"}, "sweep")
    sweep = SweepConfig()
    if "mus" in sweep_raw:
        _expect(sweep_raw["mus"], (list,), "sweep.mus", "a list")
        sweep.mus = [_number(v, f"sweep.mus[{i}]") for i, v in enumerate(sweep_raw["mus"])]
        if not sweep.mus or any(m < 0 for m in sweep.mus):
            raise ConfigError("sweep.mus", "must be a non-empty list of values >= 0")
    if "straggler_fractions" in sweep_raw:
        _expect(sweep_raw["straggler_fractions"], (list,), "sweep.straggler_fractions", "a list")
        sweep.straggler_fractions = [_number(v, f"sweep.straggler_fractions[{i}]")
                                     for i, v in enumerate(sweep_raw["straggler_fractions"])]
        if not sweep.straggler_fractions or any(not 0 <= f < 1 for f in sweep.straggler_fractions):
            raise ConfigError("sweep.straggler_fractions", "values must be in [0, 1)")

    model = _parse_model(doc.get("model"))
    try:
        federation = FederationConfig(telemetry_every=every, **fed)
        federation.validate(num_devices)
    except (TypeError, ValueError) as exc:
        raise ConfigError("federation", str(exc)) from exc
    return ExperimentConfig(dataset, model, federation, every, seeds, sweep)


def model_for(cfg: ExperimentConfig, dataset: FederatedDataset) -> ModelSpec:
    return ModelSpec(input_dim=dataset.input_dim, num_classes=dataset.num_classes, **cfg.model)
