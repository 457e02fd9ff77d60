"""Seeded experiment orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import replace
from importlib.metadata import PackageNotFoundError, version
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig
from .data import ClientDataset, Encoder, Records, build_clients, derive_seed, load_csv, preprocess
from .errors import ConfigError
from .fedsim import ExperimentResult, run_experiment
from .nn import NetConfig

log = logging.getLogger(__name__)

NET_STREAM = 31
SWEEP_PARAMETERS = ("mu", "num_clients")
SWEEP_FIELDS = [
    "parameter", "value", "seeds", "clients",
    "accuracy_median", "delta_dp_median", "delta_eo_median",
    "accuracy_mean", "accuracy_std", "delta_dp_mean", "delta_dp_std", "delta_eo_mean", "delta_eo_std",
    "global_accuracy_median", "global_delta_dp_median", "client_accuracy_std_median",
]


def package_version() -> str:
    try:
        return version("equifl")
    except PackageNotFoundError:
        return "unknown"


def provenance(cfg: ExperimentConfig, seed: int | None = None, **extra) -> dict:
    out = {"config": cfg.to_dict(), "package_version": package_version()}
    if seed is not None:
        out["seed"] = seed
    out.update(extra)
    return out


_CACHE: dict[tuple[str, str], tuple[Records, Encoder, int]] = {}


def load_records(cfg: ExperimentConfig) -> tuple[Records, Encoder, int]:
    """Encoded dataset, encoder and dropped-row count, cached per file+schema."""
    cfg.validate_paths()
    key = (str(cfg.dataset_path.resolve()), repr(cfg.schema))
    if key not in _CACHE:
        table = load_csv(cfg.dataset_path, cfg.schema)
        records, enc = preprocess(table, cfg.schema)
        _CACHE[key] = (records, enc, table.dropped_count)
    return _CACHE[key]


def partition_clients(cfg: ExperimentConfig, records: Records, seed: int) -> list[ClientDataset]:
    return build_clients(records, cfg.partition.spec(seed), cfg.partition.min_client_records)


def net_config(cfg: ExperimentConfig, input_dim: int, seed: int) -> NetConfig:
    return NetConfig((input_dim, *cfg.hidden, 1), seed=derive_seed(seed, NET_STREAM))


def run_seed(cfg: ExperimentConfig, seed: int, records: Records | None = None,
             datasets: Sequence[ClientDataset] | None = None,
             progress: Callable | None = None) -> tuple[ExperimentResult, list[ClientDataset]]:
    """Partition (unless ``datasets`` is given) and train one repetition."""
    if records is None:
        records = load_records(cfg)[0]
    if datasets is None:
        datasets = partition_clients(cfg, records, seed)
    fed = replace(cfg.fed, seed=seed)
    net = net_config(cfg, records.features.shape[1], seed)
    result = run_experiment(fed, list(datasets), net, threads=cfg.threads, progress=progress)
    return result, list(datasets)


def _summarize(parameter: str, value, results: Sequence[ExperimentResult]) -> dict:
    finals = [r.history[-1] for r in results]

    def col(fn):
        return np.asarray([fn(f) for f in finals], dtype=np.float64)

    acc = col(lambda f: f.local["accuracy"])
    dp = col(lambda f: f.local["delta_dp"])
    eo = col(lambda f: f.local["delta_eo"])
    return {
        "parameter": parameter,
        "value": value,
        "seeds": len(results),
        "clients": float(np.median(col(lambda f: len(f.clients)))),
        "accuracy_median": float(np.median(acc)),
        "delta_dp_median": float(np.median(dp)),
        "delta_eo_median": float(np.median(eo)),
        "accuracy_mean": float(acc.mean()),
        "accuracy_std": float(acc.std()),
        "delta_dp_mean": float(dp.mean()),
        "delta_dp_std": float(dp.std()),
        "delta_eo_mean": float(eo.mean()),
        "delta_eo_std": float(eo.std()),
        "global_accuracy_median": float(np.median(col(lambda f: f.global_.accuracy))),
        "global_delta_dp_median": float(np.median(col(lambda f: f.global_.delta_dp))),
        "client_accuracy_std_median": float(np.median(col(lambda f: f.stats["accuracy"]["std"]))),
    }


def sweep_config(base: ExperimentConfig, parameter: str, value) -> ExperimentConfig:
    if parameter == "mu":
        return base.with_overrides(mu=float(value))
    if parameter == "num_clients":
        return base.with_overrides(clients=int(value))
    raise ConfigError(f"cannot sweep {parameter!r}; choose from {SWEEP_PARAMETERS}")


def sweep(parameter: str, values: Sequence, base: ExperimentConfig,
          on_run: Callable[[object, int, ExperimentResult], None] | None = None) -> list[dict]:
    """One full run per (value, seed); a row of medians per value."""
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"cannot sweep {parameter!r}; choose from {SWEEP_PARAMETERS}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    cfgs = [sweep_config(base, parameter, v) for v in values]  # validate everything up front
    records = load_records(base)[0]
    rows = []
    for value, cfg in zip(values, cfgs):
        results = []
        for seed in cfg.seeds:
            result, _ = run_seed(cfg, seed, records)
            results.append(result)
            if on_run:
                on_run(value, seed, result)
        rows.append(_summarize(parameter, value, results))
    return rows
