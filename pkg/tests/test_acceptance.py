"""Exit criteria. Each test prints one ``[acceptance] C<n> PASS/FAIL`` line.

Criterion 4 trains 18 full-size federations (1024 -> 512 -> 10, 20 devices,
200 rounds) and dominates the wall clock.
"""

import math
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest

from fedmax import objectives as obj
from fedmax.analysis import SweepSpec, run_beta_sweep
from fedmax.cli import main as cli_main
from fedmax.datagen import (LabeledDataset, SyntheticSpec, generate_synthetic, load_csv_dataset,
                            partition_noniid_by_class, save_csv_dataset, train_test_split)
from fedmax.federation import (FederationConfig, aggregate, aggregation_weights, client_rng,
                               lr_schedule, run_federation)
from fedmax.model import MlpModel, backward, forward, sgd_step
from fedmax.numerics import Rng
from oracles import central_difference, rel_error


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] {criterion} {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


def _small_model(seed):
    rng = Rng(seed)
    model = MlpModel.init(rng, 6, 5, 4)
    model.b1[:] = rng.normal(0, 0.1, 5)
    model.b2[:] = rng.normal(0, 0.1, 4)
    while True:  # keep every pre-activation off the ReLU kink
        x = rng.normal(0, 1, (3, 6))
        z1 = forward(model, x).z1
        if np.min(np.abs(z1)) > 1e-3 and np.all((z1 > 0).any(axis=1)):
            break
    anchor = MlpModel(*(p + rng.normal(0, 0.3, p.shape) for p in model.params))
    return model, x, rng.permutation(4)[:3], anchor


def test_c1_gradient_oracle(report):
    objectives = [obj.LocalObjective("fedavg")]
    objectives += [obj.LocalObjective(k, beta=b) for k in ("fedl2", "fedmax") for b in (0.0, 1.0, 1500.0)]
    objectives += [obj.LocalObjective("fedprox", mu=m) for m in (0.0, 1.0)]
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        model, x, y, anchor = _small_model(seed)
        for objective in objectives:
            ref = anchor if objective.needs_global else None
            _, grads = backward(model, forward(model, x), y, objective, ref)
            numeric = central_difference(lambda: backward(model, forward(model, x), y, objective, ref)[0],
                                         list(model.params), step=1e-5)
            worst = max(worst, *(rel_error(a, n) for a, n in zip(grads.params, numeric)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 10
    report("C1", ok, f"20 models x {len(objectives)} objectives, max rel err {worst:.2e}, {elapsed:.2f}s")
    assert worst < 1e-4
    assert elapsed < 10


def test_c2_entropy_kl_equivalence(report):
    rng = Rng(2024)
    worst_loss = worst_grad = 0.0
    for d in (4, 512):
        for beta in (1.0, 1500.0):
            for _ in range(100):
                a = np.maximum(rng.normal(0, 2, (1, d)), 0.0)
                diff = obj.kl_uniform_penalty(a, beta) - obj.max_entropy_penalty(a, beta)
                worst_loss = max(worst_loss, abs(diff - beta * math.log(d)))
                g3, g4 = obj.max_entropy_grad(a, beta), obj.kl_uniform_grad(a, beta)
                worst_grad = max(worst_grad, float(np.max(np.abs(g3 - g4))))
        # parameter gradients through the whole network
        model = MlpModel.init(Rng(d), 8, d, 3)
        x, y = Rng(d + 1).normal(0, 1, (5, 8)), np.array([0, 1, 2, 0, 1])
        tr = forward(model, x)
        l3, g3 = backward(model, tr, y, obj.LocalObjective("fedmax", beta=1500.0))
        l4, g4 = backward(model, tr, y, obj.LocalObjective("fedmax", beta=1500.0, entropy_form="kl"))
        worst_loss = max(worst_loss, abs((l4 - l3) - 1500.0 * math.log(d)))
        worst_grad = max(worst_grad, *(float(np.max(np.abs(p - q))) for p, q in zip(g3.params, g4.params)))
    ok = worst_loss < 1e-10 and worst_grad < 1e-10
    report("C2", ok, f"max |loss gap - beta ln d| {worst_loss:.1e}, max grad gap {worst_grad:.1e}")
    assert worst_loss < 1e-10
    assert worst_grad < 1e-10


def test_c3_fedavg_reduction(report):
    spec = SyntheticSpec(gamma1=0.5, gamma2=0.5, num_devices=10, samples_per_device=60,
                         test_samples_per_device=10, in_dim=64, hidden_dim=32, seed=3)
    shards, test = generate_synthetic(spec)
    trajectories = {}
    for name, objective in (("fedavg", obj.LocalObjective("fedavg")),
                            ("fedmax0", obj.LocalObjective("fedmax", beta=0.0))):
        cfg = FederationConfig(num_devices=10, client_fraction=0.5, rounds=20, batch_size=16, eta0=0.05,
                               hidden_dim=32, num_classes=10, seed=99, objective=objective)
        weights = []
        run_federation(cfg, shards, test, on_round=lambda rec, m: weights.append(m.flat().tobytes()))
        trajectories[name] = weights
    same = [a == b for a, b in zip(trajectories["fedavg"], trajectories["fedmax0"])]
    ok = len(same) == 20 and all(same)
    report("C3", ok, f"{sum(same)}/20 rounds bitwise identical (M=10, C=0.5)")
    assert ok


def test_c4_similarity_ordering_fig2(report):
    beta = 1.0
    settings = [(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]
    seeds = [0, 1, 2]
    start = time.perf_counter()
    lines, ok = [], True
    for g1, g2 in settings:
        for seed in seeds:
            spec = SyntheticSpec(gamma1=g1, gamma2=g2, num_devices=20, samples_per_device=200, seed=seed)
            shards, test = generate_synthetic(spec)
            tail = {}
            for name, objective in (("fedavg", obj.LocalObjective("fedavg")),
                                    ("fedmax", obj.LocalObjective("fedmax", beta=beta))):
                cfg = FederationConfig(num_devices=20, client_fraction=1.0, rounds=200, local_epochs=1,
                                       batch_size=50, eta0=0.01, lr_decay=1.0, num_classes=10, seed=seed,
                                       objective=objective, eval_start=150)
                run = run_federation(cfg, shards, test)
                deltas = [r.delta_bar for r in run.records[-50:]]
                assert all(d is not None for d in deltas)
                tail[name] = statistics.fmean(deltas)
            cell_ok = tail["fedmax"] < tail["fedavg"]
            ok &= cell_ok
            lines.append(f"({g1},{g2}) seed {seed}: fedavg {tail['fedavg']:.4f} fedmax {tail['fedmax']:.4f}")
    elapsed = time.perf_counter() - start
    report("C4", ok, f"final-50-round mean delta_bar, beta={beta}; " + "; ".join(lines))
    # the runtime target is reported, not gated
    report("C4-runtime", elapsed < 600, f"{elapsed:.0f}s total (target < 600s, report-only)")
    assert ok


def test_c5_centralized_equivalence(report):
    spec = SyntheticSpec(gamma1=1.0, gamma2=1.0, num_devices=1, samples_per_device=137,
                         test_samples_per_device=20, in_dim=64, hidden_dim=32, seed=5)
    shards, test = generate_synthetic(spec)
    cfg = FederationConfig(num_devices=1, client_fraction=1.0, rounds=5, local_epochs=1, batch_size=25,
                           eta0=0.05, lr_decay=0.9, hidden_dim=32, num_classes=10, seed=8,
                           objective=obj.LocalObjective("fedmax", beta=1.0))
    fed = run_federation(cfg, shards, test).model

    # standalone trainer: same init, per-round shuffles, batches and learning rates
    model = MlpModel.init(Rng(cfg.seed).child("init"), 64, 32, 10)
    data = shards[0]
    for t in range(cfg.rounds):
        eta = cfg.eta0 * cfg.lr_decay**t
        order = client_rng(cfg.seed, t, 0).permutation(data.n_k)
        for start in range(0, data.n_k, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = backward(model, forward(model, data.samples[idx]), data.labels[idx], cfg.objective)
            sgd_step(model, grads, eta)
    ok = fed.flat().tobytes() == model.flat().tobytes()
    report("C5", ok, "M=1, C=1, E=1 federation vs standalone SGD after 5 rounds: "
           + ("bitwise equal" if ok else "differs"))
    assert ok


def test_c6_aggregation_oracle(report):
    rng = np.random.default_rng(6)
    worst, sums_exact = 0.0, True
    for _ in range(50):
        m = int(rng.integers(1, 12))
        counts = rng.integers(1, 500, size=m).tolist()
        models = [MlpModel(*(rng.normal(size=s) for s in [(3, 4), (3,), (2, 3), (2,)])) for _ in range(m)]
        out = aggregate(list(zip(models, counts))).flat()
        flats = [mm.flat() for mm in models]
        total = sum(counts)
        oracle = [math.fsum(counts[k] / total * flats[k][i] for k in range(m)) for i in range(out.size)]
        worst = max(worst, float(np.max(np.abs(out - np.array(oracle)))))
        w = aggregation_weights(counts)
        sums_exact &= sum(Fraction(x) for x in w) == 1 and float(np.sum(w)) == 1.0
    ok = worst < 1e-12 and sums_exact
    report("C6", ok, f"50 instances, max deviation {worst:.1e}, weights sum to 1 exactly: {sums_exact}")
    assert worst < 1e-12
    assert sums_exact


def test_c7_partitioner_invariants(report, tmp_path):
    rng = Rng(7)
    labels = np.repeat(np.arange(10), 40)
    path = tmp_path / "ten_classes.csv"
    save_csv_dataset(LabeledDataset(rng.normal(0, 1, (400, 4)), labels), path)
    dataset = load_csv_dataset(path)
    bad = 0
    for seed in range(100):
        shards = partition_noniid_by_class(dataset, 10, 2, Rng(seed))
        conserved = sum(s.n_k for s in shards) == len(dataset)
        rows = {tuple(r) for s in shards for r in s.samples}
        if not (conserved and len(rows) == len(dataset) and all(len(set(s.labels)) <= 2 for s in shards)):
            bad += 1
    report("C7", bad == 0, f"100 seeds, {bad} violations (<=2 labels per shard, conservation, no duplicates)")
    assert bad == 0


def test_c8_determinism(report, tmp_path):
    args = ["--algo", "fedmax", "--beta", "1", "--devices", "6", "--samples-per-device", "60",
            "--rounds", "6", "--gamma1", "1", "--gamma2", "1", "--seed", "21", "--per-device-deltas"]
    assert cli_main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli_main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    ok = a == b and len(a) > 0
    report("C8", ok, f"two synthetic runs, metrics CSV {len(a)} bytes, byte-identical: {a == b}")
    assert ok


def test_c9_csv_noniid_directional(report, tmp_path):
    from sklearn.datasets import load_digits

    digits = load_digits()
    path = tmp_path / "digits.csv"
    save_csv_dataset(LabeledDataset(digits.data / 16.0, digits.target), path)
    dataset = load_csv_dataset(path)
    finals = {"fedavg": [], "fedmax": []}
    for seed in range(3):
        data_rng = Rng(seed).child("data")
        train, test = train_test_split(dataset, 0.2, data_rng)
        shards = partition_noniid_by_class(train, 10, 2, data_rng)
        for name, objective in (("fedavg", obj.LocalObjective("fedavg")),
                                ("fedmax", obj.LocalObjective("fedmax", beta=1.0))):
            cfg = FederationConfig(num_devices=10, client_fraction=1.0, rounds=40, local_epochs=1,
                                   batch_size=20, eta0=0.05, hidden_dim=64, num_classes=10, seed=seed,
                                   objective=objective, eval_stride=40)
            finals[name].append(run_federation(cfg, shards, test).records[-1].test_accuracy)
    avg, mx = statistics.fmean(finals["fedavg"]), statistics.fmean(finals["fedmax"])
    # report-only: the accuracy claim is only demonstrated on image benchmarks
    report("C9", True, f"report-only; digits non-IID (2 classes/device), mean final accuracy "
           f"fedavg {avg:.4f} fedmax {mx:.4f}; fedmax >= fedavg: {mx >= avg}. "
           "Full-scale CNN table values are out of desk scope.")


def test_c10_beta_sweep(report, tmp_path):
    spec = SyntheticSpec(gamma1=0.5, gamma2=0.5, num_devices=10, samples_per_device=60,
                         test_samples_per_device=10, in_dim=64, hidden_dim=32, seed=10)
    shards, test = generate_synthetic(spec)
    base = FederationConfig(num_devices=10, client_fraction=0.5, rounds=10, batch_size=20, eta0=0.01,
                            hidden_dim=32, num_classes=10, eval_stride=10)
    seeds = [0, 1, 2]
    grid = [1.0, 10.0, 100.0, 1000.0, 10000.0]
    out = tmp_path / "sweep.csv"
    rows, cells = run_beta_sweep(SweepSpec("fedmax", grid, 10, seeds), base, shards, test, out)
    lines = out.read_text().splitlines()
    complete = len(lines) == 1 + len(grid) and all(r.n_ok + r.n_failed == len(seeds) for r in rows)

    zero_rows, zero_cells = run_beta_sweep(SweepSpec("fedmax", [0.0], 10, seeds), base, shards, test)
    matched = True
    for cell in zero_cells:
        cfg = FederationConfig(**{**base.__dict__, "seed": cell.seed, "objective": obj.LocalObjective("fedavg")})
        matched &= run_federation(cfg, shards, test).records[-1].test_accuracy == cell.final_accuracy
    summary = ", ".join(f"{r.beta:g}: {r.mean_accuracy:.3f}+-{r.sd_accuracy:.3f}" for r in rows)
    ok = complete and matched
    report("C10", ok, f"rows {len(lines) - 1}/{len(grid)} [{summary}]; beta=0 cells == fedavg: {matched}")
    assert complete
    assert matched
