"""Command-line entry point: ``fedmax --algo fedmax --beta 1 --out runs/x``.

Settings resolve as built-in defaults < ``--config`` file < explicit flags.
The config file is flat ``key = value`` lines; ``#`` starts a comment and keys
may use dashes or underscores.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import analysis, datagen
from .federation import FederationConfig, FederationError, run_federation
from .numerics import ContractError, Rng
from .objectives import ConfigError, LocalObjective

log = logging.getLogger("fedmax")

DEFAULTS = {
    "algo": "fedavg",
    "beta": None,
    "mu": None,
    "entropy_form": "entropy",
    "rounds": 200,
    "local_epochs": 1,
    "batch_size": 50,
    "eta0": 0.01,
    "lr_decay": 1.0,
    "clients_frac": 1.0,
    "devices": 20,
    "seed": 0,
    "data": "synthetic",
    "gamma1": 0.0,
    "gamma2": 0.0,
    "samples_per_device": 200,
    "test_samples_per_device": 20,
    "in_dim": 1024,
    "hidden_dim": 512,
    "num_classes": 10,
    "shared_label_generator": False,
    "partition": "iid",
    "test_fraction": 0.2,
    "similarity_scope": "all",
    "eval_stride": 1,
    "eval_start": 0,
    "workers": 1,
    "out": "fedmax-out",
    "export_activations": False,
    "per_device_deltas": False,
    "beta_grid": None,
    "sweep_seeds": "0",
}

# used when --beta / --mu are not given
DEFAULT_BETA = {"fedmax": 1.0, "fedl2": 0.01}
DEFAULT_MU = {"fedprox": 1.0}

TYPES = {
    "beta": float, "mu": float, "rounds": int, "local_epochs": int, "batch_size": int, "eta0": float,
    "lr_decay": float, "clients_frac": float, "devices": int, "seed": int, "gamma1": float,
    "gamma2": float, "samples_per_device": int, "test_samples_per_device": int, "in_dim": int,
    "hidden_dim": int, "num_classes": int, "test_fraction": float, "eval_stride": int, "eval_start": int,
    "workers": int,
}
FLAGS = {"shared_label_generator", "export_activations", "per_device_deltas"}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(key: str, value):
    if value is None:
        return None
    if key in FLAGS:
        return value if isinstance(value, bool) else _parse_bool(str(value))
    try:
        return TYPES[key](value) if key in TYPES else str(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def read_config_file(path) -> dict:
    settings = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        settings[key] = _coerce(key, value)
    return settings


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmax", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="flat key=value settings file")
    p.add_argument("--algo", choices=["fedavg", "fedprox", "fedmax", "fedl2"])
    p.add_argument("--beta", type=float, help="activation regularizer scale")
    p.add_argument("--mu", type=float, help="proximal scale (fedprox)")
    p.add_argument("--entropy-form", choices=["entropy", "kl"])
    p.add_argument("--rounds", type=int)
    p.add_argument("--local-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eta0", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--clients-frac", type=float)
    p.add_argument("--devices", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="'synthetic' or 'csv:<path>'")
    p.add_argument("--gamma1", type=float)
    p.add_argument("--gamma2", type=float)
    p.add_argument("--samples-per-device", type=int)
    p.add_argument("--test-samples-per-device", type=int)
    p.add_argument("--in-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--shared-label-generator", action="store_true", default=None)
    p.add_argument("--partition", help="'iid' or 'noniid:<classes_per_device>' (csv data)")
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--similarity-scope", choices=["all", "selected"])
    p.add_argument("--eval-stride", type=int)
    p.add_argument("--eval-start", type=int, help="first round to evaluate (the last round always is)")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--export-activations", action="store_true", default=None)
    p.add_argument("--per-device-deltas", action="store_true", default=None)
    p.add_argument("--beta-grid", help="comma-separated betas; runs a sweep instead of a single run")
    p.add_argument("--sweep-seeds", help="comma-separated seeds for --beta-grid")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_settings(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(read_config_file(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = _coerce(key, value)
    algo = settings["algo"]
    if settings["beta"] is None:
        settings["beta"] = DEFAULT_BETA.get(algo, 0.0)
    if settings["mu"] is None:
        settings["mu"] = DEFAULT_MU.get(algo, 0.0)
    return settings


def load_data(s: dict):
    """Returns (shards, testset, num_classes)."""
    data = s["data"]
    if data == "synthetic":
        spec = datagen.SyntheticSpec(
            gamma1=s["gamma1"], gamma2=s["gamma2"], num_devices=s["devices"],
            samples_per_device=s["samples_per_device"], test_samples_per_device=s["test_samples_per_device"],
            in_dim=s["in_dim"], hidden_dim=s["hidden_dim"], num_classes=s["num_classes"], seed=s["seed"],
            shared_label_generator=s["shared_label_generator"])
        shards, testset = datagen.generate_synthetic(spec)
        return shards, testset, s["num_classes"]
    if data.startswith("csv:"):
        dataset = datagen.load_csv_dataset(data[4:])
        rng = Rng(s["seed"]).child("data")
        train, testset = datagen.train_test_split(dataset, s["test_fraction"], rng)
        partition = s["partition"]
        if partition == "iid":
            shards = datagen.partition_iid(train, s["devices"], rng)
        elif partition.startswith("noniid:"):
            shards = datagen.partition_noniid_by_class(train, s["devices"], int(partition[7:]), rng)
        else:
            raise ConfigError(f"unknown partition {partition!r}")
        return shards, testset, int(dataset.labels.max()) + 1
    raise ConfigError(f"unknown data source {data!r}")


def federation_config(s: dict, num_classes: int) -> FederationConfig:
    algo = s["algo"]
    objective = LocalObjective(
        algo,
        beta=s["beta"] if algo in ("fedmax", "fedl2") else 0.0,
        mu=s["mu"] if algo == "fedprox" else 0.0,
        entropy_form=s["entropy_form"],
    )
    return FederationConfig(
        num_devices=s["devices"], client_fraction=s["clients_frac"], rounds=s["rounds"],
        local_epochs=s["local_epochs"], batch_size=s["batch_size"], eta0=s["eta0"], lr_decay=s["lr_decay"],
        objective=objective, seed=s["seed"], similarity_scope=s["similarity_scope"],
        eval_stride=s["eval_stride"], eval_start=s["eval_start"], hidden_dim=s["hidden_dim"], num_classes=num_classes,
        workers=s["workers"])


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def run(s: dict) -> Path:
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    shards, testset, num_classes = load_data(s)
    datagen.write_shard_manifest(shards, num_classes, out / "shards.json")
    config = federation_config(s, num_classes)

    if s["beta_grid"]:
        betas = [float(v) for v in s["beta_grid"].split(",") if v.strip()]
        kind = s["algo"] if s["algo"] in ("fedmax", "fedl2") else "fedmax"
        spec = analysis.SweepSpec(kind, betas, s["rounds"], _int_list(s["sweep_seeds"]))
        rows, _ = analysis.run_beta_sweep(spec, config, shards, testset, out / "sweep.csv")
        for r in rows:
            log.info("beta=%g accuracy %.4f +- %.4f (%d ok, %d failed)", r.beta, r.mean_accuracy,
                     r.sd_accuracy, r.n_ok, r.n_failed)
        return out

    result = run_federation(config, shards, testset)
    analysis.write_metrics_csv(result.records, out / "metrics.csv", per_device=s["per_device_deltas"])
    result.model.save(out / "model.bin")
    if s["export_activations"]:
        analysis.export_activations(result.model, shards, out / "activations.csv")
    resolved = dict(s)
    resolved["federation"] = config.to_dict()
    analysis.write_run_summary(out / "summary.json", resolved, result.records,
                               time.perf_counter() - started)
    final = result.records[-1]
    log.info("done: %d rounds, accuracy %.4f, macro-F1 %.4f, delta_bar %.5f", len(result.records),
             final.test_accuracy, final.macro_f1, final.delta_bar)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        run(resolve_settings(args))
    except (ConfigError, ContractError, FederationError, OSError) as exc:
        print(f"fedmax: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
