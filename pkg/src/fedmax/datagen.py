"""Synthetic heterogeneous federated data and partitioners for labeled vectors.

Synthetic devices follow the FedProx-style recipe: device k draws a feature
mean ``v_k`` whose entries are N(B_k, 1) with B_k ~ N(0, gamma1), samples are
N(v_k, diag(j**-1.2)), and labels come from a frozen per-device two-layer
perceptron whose entries are N(u_k, 1) with u_k ~ N(0, gamma2). The second
argument of N(., .) is used as a standard deviation throughout.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import ContractError, Rng, as_tensor
from .objectives import ConfigError


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.samples = as_tensor(self.samples)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.samples.shape[0],):
            raise ContractError("one label per sample row required")
        if np.any(self.labels < 0):
            raise ContractError("labels must be nonnegative")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.samples[idx], self.labels[idx])


@dataclass
class DeviceShard(LabeledDataset):
    device_id: int = 0

    @property
    def n_k(self) -> int:
        return len(self.labels)

    def histogram(self, num_classes: int) -> list[int]:
        return np.bincount(self.labels, minlength=num_classes).tolist()


@dataclass
class SyntheticSpec:
    gamma1: float = 0.0
    gamma2: float = 0.0
    num_devices: int = 20
    samples_per_device: int = 200
    test_samples_per_device: int = 20
    in_dim: int = 1024
    hidden_dim: int = 512
    num_classes: int = 10
    seed: int = 0
    shared_label_generator: bool = False

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ConfigError("gamma1 and gamma2 must be nonnegative")
        for name in ("num_devices", "samples_per_device", "in_dim", "hidden_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.test_samples_per_device < 0:
            raise ConfigError("test_samples_per_device must be nonnegative")


@dataclass(frozen=True)
class LabelGenerator:
    """Frozen perceptron used only to assign synthetic labels."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    offset: float = 0.0  # u_k the elements were centred on

    def __post_init__(self):
        for p in (self.w1, self.b1, self.w2, self.b2):
            p.flags.writeable = False

    def logits(self, x) -> np.ndarray:
        x = as_tensor(x, cols=self.w1.shape[1])
        return np.maximum(x @ self.w1.T + self.b1, 0.0) @ self.w2.T + self.b2

    def labels(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def make_covariance(in_dim: int) -> np.ndarray:
    """Diagonal of the feature covariance: entry j (1-based) is j**-1.2."""
    if in_dim < 1:
        raise ContractError("in_dim must be >= 1")
    return np.arange(1, in_dim + 1, dtype=np.float64) ** -1.2


def device_mean(spec: SyntheticSpec, rng: Rng) -> np.ndarray:
    b_k = rng.normal(0.0, spec.gamma1)
    return rng.normal(b_k, 1.0, spec.in_dim)


def generate_device_features(spec: SyntheticSpec, device_k: int, rng: Rng,
                             n_samples: int | None = None) -> np.ndarray:
    """Draw ``v_k`` from ``rng``, then ``n_samples`` rows of N(v_k, diag(j**-1.2)).

    ``device_k`` is informational; the stream is whatever ``rng`` yields.
    """
    n = spec.samples_per_device if n_samples is None else n_samples
    v = device_mean(spec, rng)
    std = np.sqrt(make_covariance(spec.in_dim))
    return v + std * rng.standard_normal((n, spec.in_dim))


def make_label_generator(spec: SyntheticSpec, device_k: int, rng: Rng) -> LabelGenerator:
    u_k = rng.normal(0.0, spec.gamma2)
    h, d, c = spec.hidden_dim, spec.in_dim, spec.num_classes
    return LabelGenerator(
        rng.normal(u_k, 1.0, (h, d)),
        rng.normal(u_k, 1.0, h),
        rng.normal(u_k, 1.0, (c, h)),
        rng.normal(u_k, 1.0, c),
        offset=u_k,
    )


def generate_device_labels(features, label_gen: LabelGenerator) -> np.ndarray:
    return label_gen.labels(features)


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[DeviceShard], LabeledDataset]:
    """Build all device shards plus a pooled held-out test set.

    Each device has its own substream keyed by (seed, device id); its test
    samples come from the same feature distribution and label generator as its
    training samples.
    """
    root = Rng(spec.seed)
    shared = make_label_generator(spec, -1, root.child("labels")) if spec.shared_label_generator else None
    shards, test_x, test_y = [], [], []
    n_train, n_test = spec.samples_per_device, spec.test_samples_per_device
    for k in range(spec.num_devices):
        rng = root.child("device", k)
        x = generate_device_features(spec, k, rng, n_train + n_test)
        gen = shared or make_label_generator(spec, k, rng)
        y = generate_device_labels(x, gen)
        shards.append(DeviceShard(x[:n_train], y[:n_train], device_id=k))
        test_x.append(x[n_train:])
        test_y.append(y[n_train:])
    testset = LabeledDataset(np.vstack(test_x), np.concatenate(test_y))
    return shards, testset


def partition_iid(dataset: LabeledDataset, num_devices: int, rng: Rng) -> list[DeviceShard]:
    """Random permutation split into near-equal shards."""
    if len(dataset) == 0:
        raise ConfigError("cannot partition an empty dataset")
    if num_devices < 1 or num_devices > len(dataset):
        raise ConfigError(f"cannot split {len(dataset)} samples across {num_devices} devices")
    perm = rng.permutation(len(dataset))
    return [
        DeviceShard(dataset.samples[idx], dataset.labels[idx], device_id=k)
        for k, idx in enumerate(np.array_split(perm, num_devices))
    ]


def partition_noniid_by_class(dataset: LabeledDataset, num_devices: int, classes_per_device: int,
                              rng: Rng, max_retries: int = 1000) -> list[DeviceShard]:
    """Give each device ``classes_per_device`` random distinct classes.

    A class's samples are shuffled and split equally among the devices that
    hold it, the remainder going one each to the first holders. Draws that
    leave a class unheld or a device empty are redrawn.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot partition an empty dataset")
    classes = np.unique(dataset.labels)
    if not 1 <= classes_per_device <= len(classes):
        raise ConfigError(f"classes_per_device must be in [1, {len(classes)}], got {classes_per_device}")
    if num_devices < 1:
        raise ConfigError("num_devices must be positive")
    by_class = {int(c): np.flatnonzero(dataset.labels == c) for c in classes}

    for _ in range(max_retries):
        held = [classes[rng.choice(len(classes), classes_per_device)] for _ in range(num_devices)]
        holders = {c: [k for k in range(num_devices) if c in held[k]] for c in by_class}
        if any(not h for h in holders.values()):
            continue
        if any(len(by_class[c]) < len(h) for c, h in holders.items()):
            continue
        parts: list[list[np.ndarray]] = [[] for _ in range(num_devices)]
        for c, idx in by_class.items():
            idx = idx[rng.permutation(len(idx))]
            for k, chunk in zip(holders[c], np.array_split(idx, len(holders[c]))):
                parts[k].append(chunk)
        return [
            DeviceShard(dataset.samples[np.concatenate(p)], dataset.labels[np.concatenate(p)], device_id=k)
            for k, p in enumerate(parts)
        ]
    raise ConfigError(
        f"no feasible class assignment after {max_retries} draws "
        f"({num_devices} devices, {classes_per_device} of {len(classes)} classes each)"
    )


def load_csv_dataset(path) -> LabeledDataset:
    """Read ``label,f0,f1,...`` rows (header required, labels 0-based)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise ContractError(f"{path}: first column must be 'label'")
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ContractError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            labels.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    if not rows:
        raise ContractError(f"{path}: no samples")
    return LabeledDataset(np.array(rows), np.array(labels))


def save_csv_dataset(dataset: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{j}" for j in range(dataset.samples.shape[1])])
        for y, x in zip(dataset.labels, dataset.samples):
            writer.writerow([int(y)] + [repr(float(v)) for v in x])


def train_test_split(dataset: LabeledDataset, test_fraction: float, rng: Rng) -> tuple[LabeledDataset, LabeledDataset]:
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must be in (0, 1)")
    perm = rng.permutation(len(dataset))
    n_test = max(1, int(round(test_fraction * len(dataset))))
    return dataset.subset(perm[n_test:]), dataset.subset(perm[:n_test])


def shard_manifest(shards: list[DeviceShard], num_classes: int) -> dict:
    return {
        str(s.device_id): {"n_k": s.n_k, "class_histogram": s.histogram(num_classes)}
        for s in shards
    }


def write_shard_manifest(shards: list[DeviceShard], num_classes: int, path) -> None:
    Path(path).write_text(json.dumps(shard_manifest(shards, num_classes), indent=2) + "\n")
