"""Activation similarity, classification metrics, exports and the beta sweep."""

from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datagen import DeviceShard, LabeledDataset
from .model import MlpModel, forward
from .numerics import ContractError, kl_divergence, softmax
from .objectives import ConfigError, LocalObjective

log = logging.getLogger(__name__)

KL_FLOOR = 1e-12
# classes absent from both predictions and labels score F1 = 0 (they are not dropped)
ZERO_SUPPORT_F1 = 0.0


@dataclass
class SimilarityRecord:
    delta_k: dict[int, float]
    delta_bar: float
    scope: str
    round: int | None = None


def device_mean_activation(model: MlpModel, samples) -> np.ndarray:
    """Mean over samples of softmax(activation), renormalized to sum to 1."""
    samples = samples.samples if isinstance(samples, LabeledDataset) else samples
    if len(samples) == 0:
        raise ContractError("cannot average activations over an empty shard")
    mean = softmax(forward(model, samples).activation, axis=1).mean(axis=0)
    return mean / mean.sum()


def _floored(p: np.ndarray) -> np.ndarray:
    p = np.maximum(p, KL_FLOOR)
    return p / p.sum()


def similarity_from_means(means: Mapping[int, np.ndarray], scope: str = "all") -> SimilarityRecord:
    """delta_k = KL(a_bar || a_k) with a_bar the plain mean of the a_k."""
    if not means:
        raise ContractError("similarity needs at least one device")
    ids = sorted(means)
    a_bar = np.mean([means[k] for k in ids], axis=0)
    a_bar = _floored(a_bar / a_bar.sum())
    delta = {k: kl_divergence(a_bar, _floored(means[k])) for k in ids}
    return SimilarityRecord(delta, float(np.mean([delta[k] for k in ids])), scope)


def similarity_round(models: Mapping[int, MlpModel], shards: Mapping[int, DeviceShard],
                     scope: str = "all") -> SimilarityRecord:
    """Similarity of per-device mean activations; ``models[k]`` is evaluated on ``shards[k]``."""
    if set(models) != set(shards):
        raise ContractError("models and shards must cover the same devices")
    means = {k: device_mean_activation(models[k], shards[k].samples) for k in models}
    return similarity_from_means(means, scope)


def predictions(model: MlpModel, testset: LabeledDataset) -> np.ndarray:
    return np.argmax(forward(model, testset.samples).logits, axis=1)


def accuracy_score(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise ContractError("empty test set")
    return float(np.mean(y_true == y_pred))


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def macro_f1_score(y_true, y_pred, num_classes: int) -> float:
    """Unweighted mean of per-class F1 over ``range(num_classes)``."""
    if len(y_true) == 0:
        raise ContractError("empty test set")
    cm = confusion_matrix(y_true, y_pred, num_classes)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    denom = predicted + actual
    # F1 = 2PR/(P+R) = 2TP/(2TP+FP+FN) = 2TP/(predicted+actual)
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), ZERO_SUPPORT_F1)
    return float(np.mean(f1))


def accuracy(model: MlpModel, testset: LabeledDataset) -> float:
    return accuracy_score(testset.labels, predictions(model, testset))


def macro_f1(model: MlpModel, testset: LabeledDataset) -> float:
    return macro_f1_score(testset.labels, predictions(model, testset), model.dims[2])


def export_activations(model: MlpModel, shards: Sequence[DeviceShard], path) -> Path:
    """Write raw (pre-softmax) activations: ``device_id,label,a_0..a_{d-1}``."""
    path = Path(path)
    hidden = model.dims[1]
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["device_id", "label"] + [f"a_{j}" for j in range(hidden)])
            for shard in shards:
                acts = forward(model, shard.samples).activation
                for y, row in zip(shard.labels, acts):
                    writer.writerow([shard.device_id, int(y)] + [repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write activations to {path}: {exc}") from exc
    return path


def read_activations(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`export_activations`: (device_ids, labels, activations)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2:]


METRIC_FIELDS = ["round", "eta", "mean_train_loss", "test_accuracy", "macro_f1", "delta_bar"]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_metrics_csv(records, path, per_device: bool = False) -> Path:
    """One row per round; optional trailing ``delta_k`` columns per device id."""
    path = Path(path)
    device_ids = sorted({k for r in records if r.delta_k for k in r.delta_k}) if per_device else []
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS + [f"delta_{k}" for k in device_ids])
        for r in records:
            row = [str(r.round), _fmt(r.eta), _fmt(r.mean_train_loss), _fmt(r.test_accuracy),
                   _fmt(r.macro_f1), _fmt(r.delta_bar)]
            row += [_fmt((r.delta_k or {}).get(k)) for k in device_ids]
            writer.writerow(row)
    return path


def write_run_summary(path, config: dict, records, wall_clock: float, extra: dict | None = None) -> Path:
    last = records[-1] if records else None
    evaluated = [r for r in records if r.test_accuracy is not None]
    final = evaluated[-1] if evaluated else last
    summary = {
        "config": config,
        "seed": config.get("seed"),
        "rounds_completed": len(records),
        "final": None if final is None else {
            "round": final.round,
            "test_accuracy": final.test_accuracy,
            "macro_f1": final.macro_f1,
            "delta_bar": final.delta_bar,
            "mean_train_loss": final.mean_train_loss,
        },
        "conventions": {
            "log_base": "e",
            "kl_epsilon_floor": KL_FLOOR,
            "zero_support_class_f1": ZERO_SUPPORT_F1,
        },
        "wall_clock_seconds": wall_clock,
    }
    if extra:
        summary.update(extra)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return Path(path)


@dataclass
class SweepSpec:
    kind: str
    betas: Sequence[float]
    rounds: int
    seeds: Sequence[int]

    def __post_init__(self):
        if not self.betas:
            raise ConfigError("beta grid must be nonempty")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.kind not in ("fedl2", "fedmax"):
            raise ConfigError("sweeps are over fedl2 or fedmax")


@dataclass
class SweepCell:
    beta: float
    seed: int
    final_accuracy: float | None
    error: str | None = None


@dataclass
class SweepRow:
    beta: float
    mean_accuracy: float
    sd_accuracy: float
    n_ok: int
    n_failed: int


def run_beta_sweep(spec: SweepSpec, base_config, shards, testset, out_path=None):
    """One federated run per (beta, seed); returns (rows, cells).

    A beta of 0 is run as the regularized kind with beta 0, which follows the
    same trajectory as plain FedAvg. Failed cells are logged and skipped.
    """
    from .federation import run_federation

    cells = []
    for beta in spec.betas:
        for seed in spec.seeds:
            try:
                obj = LocalObjective(spec.kind, beta=float(beta),
                                     entropy_form=base_config.objective.entropy_form)
                cfg = replace(base_config, objective=obj, seed=int(seed), rounds=spec.rounds)
                run = run_federation(cfg, shards, testset)
                evaluated = [r for r in run.records if r.test_accuracy is not None]
                cells.append(SweepCell(float(beta), int(seed), evaluated[-1].test_accuracy))
            except Exception as exc:
                log.warning("sweep cell beta=%g seed=%d failed: %s", beta, seed, exc)
                cells.append(SweepCell(float(beta), int(seed), None, str(exc)))
    rows = []
    for beta in spec.betas:
        accs = [c.final_accuracy for c in cells if c.beta == float(beta) and c.error is None]
        failed = sum(1 for c in cells if c.beta == float(beta) and c.error is not None)
        mean = statistics.fmean(accs) if accs else float("nan")
        sd = statistics.stdev(accs) if len(accs) > 1 else 0.0
        rows.append(SweepRow(float(beta), mean, sd, len(accs), failed))
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["kind", "beta", "mean_accuracy", "sd_accuracy", "n_ok", "n_failed"])
            for r in rows:
                writer.writerow([spec.kind, repr(r.beta), repr(r.mean_accuracy), repr(r.sd_accuracy),
                                 r.n_ok, r.n_failed])
    return rows, cells
