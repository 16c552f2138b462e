"""Server/client loop: client sampling, local SGD, weighted averaging."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import analysis
from .datagen import DeviceShard, LabeledDataset
from .model import MlpModel, backward, forward, sgd_step
from .numerics import ContractError, Rng
from .objectives import ConfigError, LocalObjective

log = logging.getLogger(__name__)


class FederationError(RuntimeError):
    """A round failed; the message names the round and device."""


@dataclass
class FederationConfig:
    num_devices: int = 20
    client_fraction: float = 1.0
    rounds: int = 200
    local_epochs: int = 1
    batch_size: int = 50
    eta0: float = 0.01
    lr_decay: float = 1.0
    objective: LocalObjective = field(default_factory=LocalObjective)
    seed: int = 0
    similarity_scope: str = "all"
    eval_stride: int = 1
    eval_start: int = 0
    hidden_dim: int = 512
    num_classes: int | None = None
    workers: int = 1

    def __post_init__(self):
        if self.num_devices < 1:
            raise ConfigError("num_devices must be positive")
        if not 0 < self.client_fraction <= 1:
            raise ConfigError("client_fraction must be in (0, 1]")
        if self.rounds < 1 or self.batch_size < 1 or self.eval_stride < 1 or self.hidden_dim < 1:
            raise ConfigError("rounds, batch_size, eval_stride and hidden_dim must be positive")
        if self.local_epochs < 0 or self.eval_start < 0:
            raise ConfigError("local_epochs and eval_start must be nonnegative")
        if self.eta0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("need eta0 > 0 and 0 < lr_decay <= 1")
        if self.similarity_scope not in ("all", "selected"):
            raise ConfigError("similarity_scope must be 'all' or 'selected'")

    @property
    def clients_per_round(self) -> int:
        return num_selected(self.num_devices, self.client_fraction)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"] = asdict(self.objective)
        return d


@dataclass
class RoundRecord:
    round: int
    eta: float
    selected: list[int]
    mean_train_loss: float
    test_accuracy: float | None = None
    macro_f1: float | None = None
    delta_bar: float | None = None
    delta_k: dict[int, float] | None = None


@dataclass
class FederationRun:
    config: FederationConfig
    records: list[RoundRecord]
    model: MlpModel


def num_selected(num_devices: int, client_fraction: float) -> int:
    # round() guards products like 0.7 * 10 landing a hair above an integer
    return max(math.ceil(round(client_fraction * num_devices, 9)), 1)


def select_clients(rng: Rng, num_devices: int, client_fraction: float) -> list[int]:
    return rng.choice(num_devices, num_selected(num_devices, client_fraction)).tolist()


def lr_schedule(eta0: float, lr_decay: float, t: int) -> float:
    if t < 0:
        raise ContractError("round index must be nonnegative")
    return eta0 * lr_decay**t


def client_rng(seed: int, round_idx: int, device_id: int) -> Rng:
    """Substream owned by one device for one round."""
    return Rng(seed).child("client", round_idx, device_id)


def client_update(global_model: MlpModel, shard: DeviceShard, config: FederationConfig,
                  rng: Rng, eta: float) -> tuple[MlpModel, float]:
    """E epochs of shuffled mini-batch SGD from the global weights.

    Returns the local model and its mean mini-batch loss (nan if E == 0).
    """
    if shard.n_k == 0:
        raise ContractError(f"device {shard.device_id} has no samples")
    local = global_model.clone()
    anchor = global_model if config.objective.needs_global else None
    losses = []
    for _ in range(config.local_epochs):
        order = rng.permutation(shard.n_k)
        for start in range(0, shard.n_k, config.batch_size):
            idx = order[start : start + config.batch_size]
            trace = forward(local, shard.samples[idx])
            loss, grads = backward(local, trace, shard.labels[idx], config.objective, anchor)
            sgd_step(local, grads, eta)
            losses.append(loss)
    return local, float(np.mean(losses)) if losses else float("nan")


def aggregation_weights(counts: Sequence[int]) -> np.ndarray:
    """n_k / sum(n_k) on a 2**-52 grid so the weights sum to exactly 1.

    Every partial sum of grid points below 1 is representable, so the total is
    1.0 in any summation order. Each weight moves by at most ~1e-16.
    """
    counts = [int(c) for c in counts]
    if not counts or min(counts) < 0 or sum(counts) <= 0:
        raise ContractError("need a nonempty list of nonnegative counts with positive total")
    total, scale = sum(counts), 1 << 52
    ticks = [c * scale // total for c in counts]
    remainders = [c * scale % total for c in counts]
    # largest-remainder rounding keeps each weight within one tick of exact
    for i in sorted(range(len(counts)), key=lambda i: -remainders[i])[: scale - sum(ticks)]:
        ticks[i] += 1
    return np.array([t / scale for t in ticks])


def aggregate(locals_: Sequence[tuple[MlpModel, int]]) -> MlpModel:
    """Sample-count weighted parameter average.

    Computed as ``p_0 + sum_k w_k (p_k - p_0)`` so identical inputs come back
    exactly.
    """
    if not locals_:
        raise ContractError("nothing to aggregate")
    models = [m for m, _ in locals_]
    weights = aggregation_weights([n for _, n in locals_])
    base = models[0]
    for m in models[1:]:
        if any(p.shape != q.shape for p, q in zip(m.params, base.params)):
            raise ContractError("cannot aggregate models of different shapes")
    out = []
    for i, p0 in enumerate(base.params):
        acc = np.zeros_like(p0)
        for w, m in zip(weights, models):
            acc += w * (m.params[i] - p0)
        out.append(p0 + acc)
    return MlpModel(*out)


def _train_clients(model: MlpModel, shards: Sequence[DeviceShard], selected: list[int],
                   config: FederationConfig, t: int, eta: float):
    def work(k):
        try:
            return client_update(model, shards[k], config, client_rng(config.seed, t, k), eta)
        except Exception as exc:
            raise FederationError(f"round {t}, device {k}: {exc}") from exc

    if config.workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(work, selected))
    return [work(k) for k in selected]


def run_federation(config: FederationConfig, shards: Sequence[DeviceShard], testset: LabeledDataset,
                   init_model: MlpModel | None = None,
                   on_round: Callable[[RoundRecord, MlpModel], None] | None = None) -> FederationRun:
    """Run ``config.rounds`` rounds of select -> train -> aggregate -> evaluate."""
    if len(shards) != config.num_devices:
        raise ConfigError(f"config expects {config.num_devices} shards, got {len(shards)}")
    if len(testset) == 0:
        raise ConfigError("test set is empty")
    in_dim = shards[0].samples.shape[1]
    num_classes = config.num_classes or int(
        max(testset.labels.max(), max(s.labels.max() for s in shards if s.n_k))) + 1
    root = Rng(config.seed)
    model = init_model.clone() if init_model is not None else MlpModel.init(
        root.child("init"), in_dim, config.hidden_dim, num_classes)
    server = root.child("server")
    records = []
    for t in range(config.rounds):
        eta = lr_schedule(config.eta0, config.lr_decay, t)
        selected = select_clients(server, config.num_devices, config.client_fraction)
        results = _train_clients(model, shards, selected, config, t, eta)
        new_model = aggregate([(local, shards[k].n_k) for k, (local, _) in zip(selected, results)])
        if not new_model.is_finite():
            raise FederationError(f"round {t}: aggregated model is non-finite")
        rec = RoundRecord(t, eta, list(selected), float(np.mean([loss for _, loss in results])))
        due = t >= config.eval_start and (t - config.eval_start + 1) % config.eval_stride == 0
        if due or t == config.rounds - 1:
            local_models = {k: local for k, (local, _) in zip(selected, results)}
            scope = selected if config.similarity_scope == "selected" else range(config.num_devices)
            sim = analysis.similarity_round(
                {k: local_models.get(k, model) for k in scope}, {k: shards[k] for k in scope},
                scope=config.similarity_scope)
            preds = analysis.predictions(new_model, testset)
            rec.test_accuracy = analysis.accuracy_score(testset.labels, preds)
            rec.macro_f1 = analysis.macro_f1_score(testset.labels, preds, new_model.dims[2])
            rec.delta_bar = sim.delta_bar
            rec.delta_k = sim.delta_k
        model = new_model
        records.append(rec)
        if on_round is not None:
            on_round(rec, model)
        log.debug("round %d eta=%.5g loss=%.4f acc=%s dbar=%s", t, eta, rec.mean_train_loss,
                  rec.test_accuracy, rec.delta_bar)
    return FederationRun(config, records, model)
