"""Experiment configuration: a TOML file of record plus command-line overrides.

Layout::

    [dataset]           path, sensitive, sensitive_values, label, positive_label
    [dataset.features]  column = "numeric" | "categorical"
    [partition]         num_clients, alphas, scheme, tile_alphas, min_client_records
    [model]             hidden = [64, 64]
    [federation]        rounds, local_epochs, batch_size, mu, mode, learning_rate, ...
    [run]               seeds, out_dir, threads

A JSON output written by the CLI can also be passed as ``--config``; its
embedded ``provenance.config`` is used, which makes every output replayable.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import PARTITION_SCHEMES, DatasetSchema, PartitionSpec, tile_alphas
from .errors import ConfigError
from .fedsim import FedConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_ALPHAS = (0.1, 0.2, 1.0, 10.0, 0.5)

_FED_KEYS = {
    "rounds": "num_rounds",
    "local_epochs": "local_epochs",
    "batch_size": "batch_size",
    "mu": "mu",
    "participation_fraction": "participation_fraction",
    "mode": "mode",
    "learning_rate": "learning_rate",
    "beta1": "beta1",
    "beta2": "beta2",
    "epsilon": "epsilon",
    "reset_optimizer": "reset_optimizer",
    "evaluate_every": "evaluate_every",
}


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 5
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    scheme: str = "per_client"
    tile_alphas: bool = False
    min_client_records: int = 3

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if self.num_clients < 1:
            raise ConfigError("partition.num_clients must be >= 1")
        if self.scheme not in PARTITION_SCHEMES:
            raise ConfigError(f"partition.scheme must be one of {PARTITION_SCHEMES}")
        if not self.alphas:
            raise ConfigError("partition.alphas must be nonempty")
        if not self.tile_alphas and len(self.alphas) != self.num_clients:
            raise ConfigError(
                f"partition.alphas has {len(self.alphas)} entries but num_clients = {self.num_clients}"
                " (set tile_alphas = true to repeat the pattern)"
            )
        if self.min_client_records < 3:
            raise ConfigError("partition.min_client_records must be >= 3")
        PartitionSpec(self.client_alphas, 0, self.scheme)

    @property
    def client_alphas(self) -> tuple[float, ...]:
        return tile_alphas(self.alphas, self.num_clients) if self.tile_alphas else self.alphas

    def spec(self, seed: int) -> PartitionSpec:
        return PartitionSpec(self.client_alphas, seed, self.scheme)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_path: Path
    schema: DatasetSchema
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    hidden: tuple[int, ...] = (64, 64)
    fed: FedConfig = field(default_factory=FedConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: Path = Path("runs")
    threads: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.seeds:
            raise ConfigError("run.seeds must be nonempty")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("model.hidden sizes must be positive")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("run.threads must be >= 1")

    def validate_paths(self) -> None:
        if not self.dataset_path.is_file():
            raise ConfigError(f"dataset file not found: {self.dataset_path}")

    def with_overrides(self, **kw: Any) -> "ExperimentConfig":
        """Apply flat overrides (``seed``, ``out_dir``, ``mode``, ``mu``,
        ``clients``, ``rounds``, ``evaluate_every``); ``None`` means unset."""
        cfg = self
        fed_kw = {}
        for key in ("mode", "mu", "evaluate_every"):
            if kw.get(key) is not None:
                fed_kw[key] = kw[key]
        if kw.get("rounds") is not None:
            fed_kw["num_rounds"] = kw["rounds"]
        if fed_kw:
            cfg = replace(cfg, fed=replace(cfg.fed, **fed_kw))
        if kw.get("clients") is not None:
            cfg = replace(cfg, partition=replace(cfg.partition, num_clients=int(kw["clients"]), tile_alphas=True))
        if kw.get("seed") is not None:
            cfg = replace(cfg, seeds=(int(kw["seed"]),))
        if kw.get("out_dir") is not None:
            cfg = replace(cfg, out_dir=Path(kw["out_dir"]))
        return cfg

    def to_dict(self) -> dict:
        fed = {k: getattr(self.fed, attr) for k, attr in _FED_KEYS.items()}
        return {
            "dataset": {
                "path": str(self.dataset_path),
                # pairs, so column order survives key-sorted JSON
                "features": [[k, v] for k, v in self.schema.features.items()],
                "sensitive": self.schema.sensitive,
                "sensitive_values": list(self.schema.sensitive_values),
                "label": self.schema.label,
                "positive_label": self.schema.positive_label,
                "include_sensitive": self.schema.include_sensitive,
            },
            "partition": {
                "num_clients": self.partition.num_clients,
                "alphas": list(self.partition.alphas),
                "scheme": self.partition.scheme,
                "tile_alphas": self.partition.tile_alphas,
                "min_client_records": self.partition.min_client_records,
            },
            "model": {"hidden": list(self.hidden)},
            "federation": fed,
            "run": {
                "seeds": list(self.seeds),
                "out_dir": str(self.out_dir),
                **({"threads": self.threads} if self.threads is not None else {}),
            },
        }


def _take(section: dict, name: str, allowed: set[str]) -> dict:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"[{name}] has unknown key(s): {sorted(unknown)}")
    return section


def _features(raw) -> dict[str, str]:
    """A ``name = kind`` table, or a list of ``[name, kind]`` pairs."""
    if isinstance(raw, dict):
        return dict(raw)
    try:
        return {str(name): str(kind) for name, kind in raw}
    except (TypeError, ValueError):
        raise ConfigError("dataset.features must be a table or a list of [name, kind] pairs") from None


def from_dict(doc: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    """Build and validate a config from its nested-dict form."""
    try:
        unknown = set(doc) - {"dataset", "partition", "model", "federation", "run"}
        if unknown:
            raise ConfigError(f"unknown section(s): {sorted(unknown)}")
        ds = _take(dict(doc["dataset"]), "dataset", {
            "path", "features", "sensitive", "sensitive_values", "label", "positive_label", "include_sensitive"})
        path = Path(ds["path"])
        if not path.is_absolute():
            path = base_dir / path
        schema = DatasetSchema(
            features=_features(ds["features"]),
            sensitive=ds["sensitive"],
            sensitive_values=tuple(str(v) for v in ds["sensitive_values"]),
            label=ds["label"],
            positive_label=str(ds["positive_label"]),
            include_sensitive=bool(ds.get("include_sensitive", False)),
        )
        part = _take(dict(doc.get("partition", {})), "partition",
                     {"num_clients", "alphas", "scheme", "tile_alphas", "min_client_records"})
        partition = PartitionConfig(**part)
        model = _take(dict(doc.get("model", {})), "model", {"hidden"})
        fed_doc = _take(dict(doc.get("federation", {})), "federation", set(_FED_KEYS))
        run = _take(dict(doc.get("run", {})), "run", {"seeds", "out_dir", "threads"})
        fed = FedConfig(**{_FED_KEYS[k]: v for k, v in fed_doc.items()})
        out_dir = Path(run.get("out_dir", "runs"))
        if not out_dir.is_absolute():
            out_dir = base_dir / out_dir
        return ExperimentConfig(
            dataset_path=path,
            schema=schema,
            partition=partition,
            hidden=tuple(model.get("hidden", (64, 64))),
            fed=fed,
            seeds=tuple(run.get("seeds", (0, 1, 2, 3, 4))),
            out_dir=out_dir,
            threads=run.get("threads"),
        )
    except KeyError as exc:
        raise ConfigError(f"missing required key {exc}") from None
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    """Load a ``.toml`` config, or a JSON output carrying ``provenance.config``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        doc = doc.get("provenance", {}).get("config", doc)
        # resolved configs store absolute paths already
        return from_dict(doc, Path.cwd())
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(doc, path.parent.resolve())
