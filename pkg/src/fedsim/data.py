"""Federated datasets: synthetic generation, MNIST partitioning, splitting and I/O."""

from __future__ import annotations

import gzip
import itertools
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from fedsim.rng import RNG_ALGORITHM, stream

log = logging.getLogger(__name__)

FILE_MAGIC = b"FSIM"
FILE_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised for malformed dataset or IDX files."""


class PartitionError(ValueError):
    """Raised when a partition cannot be satisfied by the class inventory."""


@dataclass
class DeviceShard:
    device_id: int
    features: np.ndarray
    labels: np.ndarray
    train_index: np.ndarray
    test_index: np.ndarray

    @property
    def rows(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_k(self) -> int:
        return int(self.train_index.shape[0])

    @property
    def train_x(self) -> np.ndarray:
        return self.features[self.train_index]

    @property
    def train_y(self) -> np.ndarray:
        return self.labels[self.train_index]

    @property
    def test_x(self) -> np.ndarray:
        return self.features[self.test_index]

    @property
    def test_y(self) -> np.ndarray:
        return self.labels[self.test_index]


@dataclass
class FederatedDataset:
    shards: list[DeviceShard]
    input_dim: int
    num_classes: int
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def num_devices(self) -> int:
        return len(self.shards)

    @property
    def sample_counts(self) -> np.ndarray:
        return np.array([s.n_k for s in self.shards], dtype=np.int64)

    @property
    def weights(self) -> np.ndarray:
        """p_k = n_k / n over training rows."""
        counts = self.sample_counts.astype(np.float64)
        return counts / counts.sum()

    def shard(self, device_id: int) -> DeviceShard:
        return self.shards[device_id]

    def validate(self) -> None:
        for pos, s in enumerate(self.shards):
            if s.device_id != pos:
                raise ValueError(f"shard at position {pos} has device_id {s.device_id}")
            if s.features.shape != (s.rows, self.input_dim):
                raise ValueError(f"shard {pos}: features shape {s.features.shape}")
            if s.rows and (s.labels.min() < 0 or s.labels.max() >= self.num_classes):
                raise ValueError(f"shard {pos}: label out of range")
            both = np.concatenate([s.train_index, s.test_index])
            if not np.array_equal(np.sort(both), np.arange(s.rows)):
                raise ValueError(f"shard {pos}: train/test indices do not cover rows exactly once")
            if s.n_k < 1:
                raise ValueError(f"shard {pos}: no training rows")


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    alpha: float = 0.0
    beta: float = 0.0
    iid: bool = False
    num_devices: int = 30
    input_dim: int = 60
    num_classes: int = 10
    power_law_exponent: float = 1.5
    min_samples: int = 10
    max_samples: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.num_devices < 1:
            raise ValueError(f"num_devices must be >= 1, got {self.num_devices}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("input_dim must be >= 1 and num_classes >= 2")
        if self.power_law_exponent <= 0:
            raise ValueError("power_law_exponent must be > 0")
        if not 1 <= self.min_samples <= self.max_samples:
            raise ValueError("need 1 <= min_samples <= max_samples")

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "iid": self.iid,
            "num_devices": self.num_devices,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "power_law_exponent": self.power_law_exponent,
            "min_samples": self.min_samples,
            "max_samples": self.max_samples,
            "seed": self.seed,
        }


def power_law_counts(rng: np.random.Generator, size: int, exponent: float,
                     min_samples: int, max_samples: int) -> np.ndarray:
    """Pareto sample counts, clamped to ``[min_samples, max_samples]``."""
    u = 1.0 - rng.random(size)  # (0, 1]
    raw = min_samples * u ** (-1.0 / exponent)
    counts = np.floor(raw + 0.5)
    return np.clip(counts, min_samples, max_samples).astype(np.int64)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def feature_std(input_dim: int) -> np.ndarray:
    """Per-coordinate std of x: covariance diag is j^-1.2 for j = 1..d."""
    j = np.arange(1, input_dim + 1, dtype=np.float64)
    return np.sqrt(j ** -1.2)


@dataclass
class DeviceModel:
    """Generating parameters of one synthetic device."""
    W: np.ndarray
    b: np.ndarray
    mean: np.ndarray


def synthetic_generators(spec: SyntheticSpec) -> tuple[np.ndarray, list[DeviceModel]]:
    """Sample counts and per-device generating models for ``spec``.

    Returns the raw (pre-split) row counts and one DeviceModel per device.  The
    draw order is fixed, so the same spec always yields the same models.
    """
    spec.validate()
    d, c = spec.input_dim, spec.num_classes
    counts = power_law_counts(stream(spec.seed, "synthetic-counts"), spec.num_devices,
                              spec.power_law_exponent, spec.min_samples, spec.max_samples)
    models = []
    if spec.iid:
        rng = stream(spec.seed, "synthetic-model")
        W = rng.normal(0.0, 1.0, (c, d))
        b = rng.normal(0.0, 1.0, c)
        models = [DeviceModel(W, b, np.zeros(d)) for _ in range(spec.num_devices)]
        return counts, models
    for k in range(spec.num_devices):
        rng = stream(spec.seed, "synthetic-model", k)
        u_k = rng.normal(0.0, spec.alpha)
        W = rng.normal(u_k, 1.0, (c, d))
        b = rng.normal(u_k, 1.0, c)
        mean_k = rng.normal(0.0, spec.beta)
        v = rng.normal(mean_k, 1.0, d)
        models.append(DeviceModel(W, b, v))
    return counts, models


def label_with(model: DeviceModel, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the lowest index on ties
    probs = softmax_rows(x @ model.W.T + model.b)
    return np.argmax(probs, axis=1).astype(np.int64)


def generate_synthetic(spec: SyntheticSpec, train_fraction: float = 0.8,
                       split_seed: int | None = None) -> FederatedDataset:
    """Synthetic(alpha, beta) or Synthetic IID, already split into train/test."""
    counts, models = synthetic_generators(spec)
    std = feature_std(spec.input_dim)
    shards = []
    for k, (n, m) in enumerate(zip(counts, models)):
        rng = stream(spec.seed, "synthetic-features", k)
        x = m.mean + rng.standard_normal((int(n), spec.input_dim)) * std
        y = label_with(m, x)
        shards.append(DeviceShard(k, x, y, np.arange(int(n)), np.empty(0, dtype=np.int64)))
    provenance = {
        "generator": "synthetic_iid" if spec.iid else "synthetic",
        "params": spec.to_dict(),
        "seed": spec.seed,
        "rng": RNG_ALGORITHM,
    }
    ds = FederatedDataset(shards, spec.input_dim, spec.num_classes, provenance)
    return split_train_test(ds, train_fraction, spec.seed if split_seed is None else split_seed)


def spec_from_provenance(provenance: dict[str, Any]) -> SyntheticSpec:
    if provenance.get("generator") not in ("synthetic", "synthetic_iid"):
        raise ValueError("dataset was not produced by the synthetic generator")
    return SyntheticSpec(**provenance["params"])


# --------------------------------------------------------------------------
# MNIST


IDX_UBYTE = 0x08
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _open_maybe_gzip(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path: str | Path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into a uint8 array."""
    raw = _open_maybe_gzip(Path(path))
    if len(raw) < 8:
        raise DatasetFormatError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    ndim = magic & 0xFF
    if magic >> 8 != IDX_UBYTE or not 1 <= ndim <= 4:
        raise DatasetFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(shape))
    if len(raw) - header != expected:
        raise DatasetFormatError(
            f"{path}: expected {expected} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(shape)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 array (1 to 4 dimensions) as IDX."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if not 1 <= array.ndim <= 4:
        raise ValueError("IDX writer supports 1 to 4 dimensions")
    magic = (IDX_UBYTE << 8) | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_mnist(directory: str | Path, include_test: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Load the standard MNIST IDX files from ``directory`` (train + t10k)."""
    directory = Path(directory)

    def find(stem: str) -> Path:
        for name in (stem, stem + ".gz"):
            if (directory / name).exists():
                return directory / name
        raise FileNotFoundError(f"{stem} not found in {directory}")

    images = [read_idx(find("train-images-idx3-ubyte"))]
    labels = [read_idx(find("train-labels-idx1-ubyte"))]
    if include_test:
        images.append(read_idx(find("t10k-images-idx3-ubyte")))
        labels.append(read_idx(find("t10k-labels-idx1-ubyte")))
    return np.concatenate(images), np.concatenate(labels)


def class_assignments(num_devices: int, num_classes: int, classes_per_device: int,
                      rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Round-robin over all class combinations, in a seeded order."""
    combos = list(itertools.combinations(range(num_classes), classes_per_device))
    order = rng.permutation(len(combos))
    return [combos[order[i % len(combos)]] for i in range(num_devices)]


def partition_mnist(images: np.ndarray, labels: np.ndarray, num_devices: int = 1000,
                    classes_per_device: int = 2, power_law_exponent: float = 1.5,
                    seed: int = 0, num_classes: int = 10, min_per_class: int = 1,
                    max_weight_ratio: float = 100.0, train_fraction: float = 0.8) -> FederatedDataset:
    """Spread labelled images over devices holding ``classes_per_device`` digits each.

    Each device draws a power-law weight.  Every class's inventory is divided
    among the devices holding it in proportion to those weights, so the device
    sizes follow the power law while the whole inventory (up to rounding) is used.
    """
    labels = np.asarray(labels).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("images and labels differ in length")
    if not 1 <= classes_per_device <= num_classes:
        raise ValueError("classes_per_device must be in [1, num_classes]")
    if num_devices < 1:
        raise ValueError("num_devices must be >= 1")
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0

    rng = stream(seed, "mnist-partition")
    assign = class_assignments(num_devices, num_classes, classes_per_device, rng)
    weights = power_law_counts(rng, num_devices, power_law_exponent, 1,
                               int(max_weight_ratio)).astype(np.float64)

    pools = {}
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        pools[c] = idx[rng.permutation(idx.shape[0])]

    holders: dict[int, list[int]] = {c: [] for c in range(num_classes)}
    for k, classes in enumerate(assign):
        for c in classes:
            holders[c].append(k)

    device_rows: list[list[np.ndarray]] = [[] for _ in range(num_devices)]
    shortfalls = []
    for c in range(num_classes):
        ks = holders[c]
        if not ks:
            continue
        need = min_per_class * len(ks)
        have = pools[c].shape[0]
        if have < need:
            shortfalls.append(f"class {c}: {len(ks)} devices need >= {need} samples, inventory {have}")
            continue
        w = weights[ks]
        spare = have - need
        extra = np.floor(spare * w / w.sum()).astype(np.int64)
        take = extra + min_per_class
        offsets = np.concatenate([[0], np.cumsum(take)])
        for j, k in enumerate(ks):
            device_rows[k].append(pools[c][offsets[j]:offsets[j + 1]])
    if shortfalls:
        raise PartitionError("class inventory exhausted: " + "; ".join(shortfalls))

    shards = []
    for k in range(num_devices):
        rows = np.sort(np.concatenate(device_rows[k]))
        n = rows.shape[0]
        shards.append(DeviceShard(k, feats[rows], labels[rows], np.arange(n),
                                  np.empty(0, dtype=np.int64)))
    provenance = {
        "generator": "mnist",
        "params": {
            "num_devices": num_devices,
            "classes_per_device": classes_per_device,
            "power_law_exponent": power_law_exponent,
            "num_classes": num_classes,
            "min_per_class": min_per_class,
            "max_weight_ratio": max_weight_ratio,
            "source_rows": int(labels.shape[0]),
        },
        "seed": seed,
        "rng": RNG_ALGORITHM,
    }
    ds = FederatedDataset(shards, feats.shape[1], num_classes, provenance)
    return split_train_test(ds, train_fraction, seed)


# --------------------------------------------------------------------------
# train/test split


def split_train_test(dataset: FederatedDataset, fraction: float = 0.8,
                     seed: int = 0) -> FederatedDataset:
    """Per-shard random split; ``round(fraction * rows)`` rows go to train."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    shards = []
    warnings = []
    for s in dataset.shards:
        rows = s.rows
        if rows < 2:
            warnings.append(f"device {s.device_id}: {rows} row(s), all assigned to train")
            log.warning(warnings[-1])
            train, test = np.arange(rows), np.empty(0, dtype=np.int64)
        else:
            perm = stream(seed, "split", s.device_id).permutation(rows)
            n_train = int(np.floor(fraction * rows + 0.5))
            n_train = min(max(n_train, 1), rows)
            train, test = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        shards.append(DeviceShard(s.device_id, s.features, s.labels,
                                  train.astype(np.int64), test.astype(np.int64)))
    provenance = dict(dataset.provenance)
    provenance["split"] = {"fraction": fraction, "seed": seed}
    if warnings:
        provenance["split"]["warnings"] = warnings
    return FederatedDataset(shards, dataset.input_dim, dataset.num_classes, provenance)


# --------------------------------------------------------------------------
# on-disk format


def save_dataset(dataset: FederatedDataset, path: str | Path) -> None:
    meta = dict(dataset.provenance)
    meta["input_dim"] = dataset.input_dim
    meta["num_classes"] = dataset.num_classes
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [FILE_MAGIC, struct.pack("<H", FILE_VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(dataset.shards))]
    for s in dataset.shards:
        rows, cols = s.features.shape
        parts.append(struct.pack("<III", s.device_id, rows, cols))
        parts.append(np.ascontiguousarray(s.features, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.labels, dtype="<u4").tobytes())
        parts.append(struct.pack("<I", s.n_k))
        parts.append(np.sort(s.train_index).astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise DatasetFormatError(
                f"truncated file: need {n} bytes for {what} at offset {self.pos}, "
                f"{len(self.raw) - self.pos} available")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_dataset(path: str | Path) -> FederatedDataset:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != FILE_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file (bad magic)")
    version = struct.unpack("<H", r.take(2, "version"))[0]
    if version != FILE_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}, expected {FILE_VERSION}")
    blob = r.take(r.u32("provenance length"), "provenance")
    try:
        meta = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: corrupt provenance block: {exc}") from exc
    if not isinstance(meta, dict) or not all(isinstance(meta.get(k), int)
                                             for k in ("input_dim", "num_classes")):
        raise DatasetFormatError(f"{path}: provenance block lacks input_dim/num_classes")
    input_dim = meta.pop("input_dim")
    num_classes = meta.pop("num_classes")
    shards = []
    for _ in range(r.u32("shard count")):
        device_id, rows, cols = (r.u32("device_id"), r.u32("rows"), r.u32("cols"))
        feats = np.frombuffer(r.take(8 * rows * cols, "features"), dtype="<f8")
        labels = np.frombuffer(r.take(4 * rows, "labels"), dtype="<u4")
        n_train = r.u32("train count")
        if n_train > rows:
            raise DatasetFormatError(f"{path}: train count {n_train} exceeds rows {rows}")
        train = np.frombuffer(r.take(4 * n_train, "train indices"), dtype="<u4").astype(np.int64)
        if n_train and (train.max() >= rows or np.any(np.diff(train) <= 0)):
            raise DatasetFormatError(f"{path}: train indices not sorted/unique/in range")
        test = np.setdiff1d(np.arange(rows), train)
        shards.append(DeviceShard(device_id, feats.reshape(rows, cols).astype(np.float64),
                                  labels.astype(np.int64), train, test))
    if r.pos != len(r.raw):
        raise DatasetFormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return FederatedDataset(shards, input_dim, num_classes, meta)
