"""Tabular ingestion, encoding and non-IID client partitioning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, SchemaError

log = logging.getLogger(__name__)

NUMERIC = "numeric"
CATEGORICAL = "categorical"
SPLIT_RATIOS = (0.70, 0.15, 0.15)


@dataclass(frozen=True)
class DatasetSchema:
    """Column roles of a CSV file.

    ``features`` maps column name to ``"numeric"`` or ``"categorical"``;
    the sensitive column is kept out of the feature vector unless
    ``include_sensitive`` is set.
    """

    features: dict[str, str]
    sensitive: str
    sensitive_values: tuple[str, ...]
    label: str
    positive_label: str
    include_sensitive: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sensitive_values", tuple(self.sensitive_values))
        for name, kind in self.features.items():
            if kind not in (NUMERIC, CATEGORICAL):
                raise ConfigError(f"column {name!r}: unknown kind {kind!r}")
        if self.sensitive in self.features:
            raise ConfigError(
                f"sensitive column {self.sensitive!r} listed as a feature; use include_sensitive instead"
            )
        if self.label in self.features or self.label == self.sensitive:
            raise ConfigError(f"label column {self.label!r} reused in another role")
        if len(set(self.sensitive_values)) < 1 or len(set(self.sensitive_values)) != len(self.sensitive_values):
            raise ConfigError("sensitive_values must be a nonempty list of distinct values")

    @property
    def columns(self) -> list[str]:
        return [*self.features, self.sensitive, self.label]

    @property
    def num_groups(self) -> int:
        return len(self.sensitive_values)


@dataclass
class RawTable:
    """Parsed rows. ``row_ids`` are 0-based data-row positions in the file."""

    columns: dict[str, list]
    row_ids: np.ndarray
    dropped_count: int = 0

    def __len__(self) -> int:
        return len(self.row_ids)


def load_csv(path: str | Path, schema: DatasetSchema) -> RawTable:
    """Read a headered CSV; rows missing a declared value or with an
    unparseable numeric cell are dropped and counted."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [c for c in schema.columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: header lacks declared column(s) {missing}")
        pos = {c: header.index(c) for c in schema.columns}
        cols: dict[str, list] = {c: [] for c in schema.columns}
        ids, dropped = [], 0
        sens_ok = set(schema.sensitive_values)
        for row_id, row in enumerate(reader):
            if not row:
                continue
            parsed = _parse_row(row, pos, schema, sens_ok)
            if parsed is None:
                dropped += 1
                log.debug("%s line %d dropped", path, row_id + 2)
                continue
            for c, v in parsed.items():
                cols[c].append(v)
            ids.append(row_id)
    if dropped:
        log.info("%s: dropped %d incomplete or unparseable rows", path, dropped)
    return RawTable(cols, np.asarray(ids, dtype=np.int64), dropped)


def _parse_row(row, pos, schema, sens_ok):
    out = {}
    for c, i in pos.items():
        if i >= len(row):
            return None
        v = row[i].strip()
        if v == "":
            return None
        if schema.features.get(c) == NUMERIC:
            try:
                v = float(v)
            except ValueError:
                return None
            if not math.isfinite(v):
                return None
        out[c] = v
    if out[schema.sensitive] not in sens_ok:
        return None
    return out


@dataclass(frozen=True)
class Records:
    """Encoded rows: features, sensitive group index, binary label."""

    features: np.ndarray
    sensitive: np.ndarray
    labels: np.ndarray
    row_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Records":
        idx = np.asarray(idx, dtype=np.int64)
        return Records(self.features[idx], self.sensitive[idx], self.labels[idx], self.row_ids[idx])

    @classmethod
    def concat(cls, parts: Sequence["Records"]) -> "Records":
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.sensitive for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.row_ids for p in parts]),
        )


@dataclass
class Encoder:
    """Category sets and numeric moments fitted on a table."""

    schema: DatasetSchema
    categories: dict[str, list[str]] = field(default_factory=dict)
    moments: dict[str, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def fit(cls, table: RawTable, schema: DatasetSchema) -> "Encoder":
        if len(table) == 0:
            raise InputError("cannot fit an encoder on an empty table")
        enc = cls(schema)
        for name, kind in enc._encoded_columns():
            values = table.columns[name]
            if kind == CATEGORICAL:
                enc.categories[name] = sorted(set(map(str, values)))
            else:
                arr = np.asarray(values, dtype=np.float64)
                std = float(arr.std())
                if std == 0.0:
                    log.warning("column %r has zero variance; encoding it as constant 0", name)
                enc.moments[name] = (float(arr.mean()), std)
        return enc

    def _encoded_columns(self):
        cols = list(self.schema.features.items())
        if self.schema.include_sensitive:
            cols.append((self.schema.sensitive, CATEGORICAL))
        return cols

    @property
    def feature_names(self) -> list[str]:
        names = []
        for name, kind in self._encoded_columns():
            if kind == CATEGORICAL:
                names.extend(f"{name}={c}" for c in self.categories[name])
            else:
                names.append(name)
        return names

    def transform(self, table: RawTable) -> Records:
        blocks = []
        for name, kind in self._encoded_columns():
            values = table.columns[name]
            if kind == CATEGORICAL:
                cats = self.categories[name]
                lookup = {c: i for i, c in enumerate(cats)}
                block = np.zeros((len(values), len(cats)))
                for r, v in enumerate(values):
                    j = lookup.get(str(v))
                    if j is not None:  # unseen category -> all zeros
                        block[r, j] = 1.0
            else:
                mean, std = self.moments[name]
                arr = np.asarray(values, dtype=np.float64)
                block = ((arr - mean) / std if std > 0 else np.zeros_like(arr))[:, None]
            blocks.append(block)
        x = np.hstack(blocks) if blocks else np.zeros((len(table), 0))
        group = {v: i for i, v in enumerate(self.schema.sensitive_values)}
        s = np.asarray([group[v] for v in table.columns[self.schema.sensitive]], dtype=np.int64)
        y = np.asarray([str(v) == self.schema.positive_label for v in table.columns[self.schema.label]],
                       dtype=np.int64)
        return Records(x, s, y, table.row_ids.copy())

    def summary(self) -> dict:
        return {
            "feature_names": self.feature_names,
            "categories": self.categories,
            "moments": {k: list(v) for k, v in self.moments.items()},
        }


def preprocess(table: RawTable, schema: DatasetSchema) -> tuple[Records, Encoder]:
    """One-hot categoricals and z-score numerics using full-table statistics."""
    enc = Encoder.fit(table, schema)
    return enc.transform(table), enc


PARTITION_SCHEMES = ("per_value", "per_client")


@dataclass(frozen=True)
class PartitionSpec:
    client_alphas: tuple[float, ...]
    seed: int = 0
    scheme: str = "per_client"

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.client_alphas)
        object.__setattr__(self, "client_alphas", alphas)
        if not alphas:
            raise ConfigError("need at least one client alpha")
        if any(not (a > 0 and math.isfinite(a)) for a in alphas):
            raise ConfigError(f"all alphas must be positive and finite, got {alphas}")
        if self.scheme not in PARTITION_SCHEMES:
            raise ConfigError(f"scheme must be one of {PARTITION_SCHEMES}, got {self.scheme!r}")

    @property
    def num_clients(self) -> int:
        return len(self.client_alphas)


def tile_alphas(base: Sequence[float], num_clients: int) -> tuple[float, ...]:
    """Repeat a per-client alpha pattern to cover ``num_clients`` clients."""
    base = tuple(base)
    return tuple(base[i % len(base)] for i in range(num_clients))


def largest_remainder(fractions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``fractions``.

    Floors first, then hands out leftover units by descending fractional
    remainder (lower index wins ties). The result always sums to ``total``.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    fractions = fractions / fractions.sum()
    exact = fractions * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(sensitive: np.ndarray, spec: PartitionSpec) -> list[np.ndarray]:
    """Split row positions into clients with Dirichlet-controlled group skew.

    ``per_client``: client ``i`` draws a mix over sensitive values from a
    symmetric ``Dir(alpha_i)``, so a small alpha gives a client dominated by
    one value. The rows of value ``v`` are then shared out in proportion to
    the clients' weights on ``v``.

    ``per_value``: for every value a single draw from ``Dir(client_alphas)``
    gives the share of that value's rows each client receives.

    Either way the rows holding ``v`` are shuffled and cut into contiguous
    blocks sized by largest-remainder rounding, with values in ascending order.

    Returns:
        One sorted array of row positions per client.
    """
    sensitive = np.asarray(sensitive)
    if sensitive.size == 0:
        raise InputError("no records to partition")
    n_clients = spec.num_clients
    rng = np.random.default_rng(spec.seed)
    values = np.unique(sensitive)
    if spec.scheme == "per_client":
        # client i draws its own group mix from a symmetric Dir(alpha_i)
        mix = np.stack([rng.dirichlet(np.full(values.size, a)) if values.size > 1 else np.ones(1)
                        for a in spec.client_alphas])
    parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for j, v in enumerate(values):
        idx = np.flatnonzero(sensitive == v)
        if idx.size < n_clients:
            log.warning("sensitive value %s has %d rows for %d clients", v, idx.size, n_clients)
        if n_clients == 1:
            fractions = np.ones(1)
        elif spec.scheme == "per_client":
            fractions = mix[:, j]
        else:
            fractions = rng.dirichlet(spec.client_alphas)
        if not np.all(np.isfinite(fractions)) or fractions.sum() <= 0:
            raise InputError(f"degenerate Dirichlet draw for value {v}")
        shuffled = rng.permutation(idx)
        counts = largest_remainder(fractions, idx.size)
        start = 0
        for c, k in enumerate(counts):
            parts[c].append(shuffled[start:start + k])
            start += k
    return [np.sort(np.concatenate(p)) for p in parts]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_indices(n: int, seed: int, ratios=SPLIT_RATIOS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffle ``range(n)`` and cut at round(0.70 n) and round(0.85 n)."""
    if n < 3:
        raise InputError(f"need at least 3 records to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    a = _round_half_up(ratios[0] * n)
    b = _round_half_up((ratios[0] + ratios[1]) * n)
    return perm[:a], perm[a:b], perm[b:]


def split(records: Records, seed: int) -> tuple[Records, Records, Records]:
    tr, va, te = split_indices(len(records), seed)
    return records.subset(tr), records.subset(va), records.subset(te)


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: Records
    validation: Records
    test: Records

    @property
    def n(self) -> int:
        return len(self.train)

    def group_proportions(self, num_groups: int) -> list[float]:
        s = np.concatenate([self.train.sensitive, self.validation.sensitive, self.test.sensitive])
        counts = np.bincount(s, minlength=num_groups)
        return (counts / max(counts.sum(), 1)).tolist()


def derive_seed(seed: int, *keys: int) -> int:
    """Independent child seed for a (seed, key...) pair."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint32)[0])


SPLIT_STREAM = 11


def build_clients(records: Records, spec: PartitionSpec, min_records: int = 3) -> list[ClientDataset]:
    """Partition, then split every client 70:15:15.

    Clients left with fewer than ``min_records`` rows cannot be split and
    are dropped with a warning; surviving clients keep their original ids.
    """
    if min_records < 3:
        raise ConfigError("min_records must be at least 3")
    clients = []
    for cid, idx in enumerate(dirichlet_partition(records.sensitive, spec)):
        if idx.size < min_records:
            log.warning("client %d received %d records (< %d); dropped", cid, idx.size, min_records)
            continue
        tr, va, te = split_indices(idx.size, derive_seed(spec.seed, SPLIT_STREAM, cid))
        clients.append(ClientDataset(cid, records.subset(idx[tr]), records.subset(idx[va]),
                                     records.subset(idx[te])))
    if not clients:
        raise InputError("every client was dropped; not enough records")
    return clients


def partition_manifest(clients: Sequence[ClientDataset]) -> dict:
    """Per-client row ids (file positions) of each split."""
    return {
        "clients": [
            {
                "client_id": c.client_id,
                "train": c.train.row_ids.tolist(),
                "validation": c.validation.row_ids.tolist(),
                "test": c.test.row_ids.tolist(),
            }
            for c in clients
        ]
    }


def clients_from_manifest(records: Records, manifest: dict) -> list[ClientDataset]:
    """Rebuild client splits from a manifest written by :func:`partition_manifest`."""
    pos = {int(r): i for i, r in enumerate(records.row_ids)}
    try:
        return [
            ClientDataset(
                int(c["client_id"]),
                *(records.subset([pos[int(r)] for r in c[k]]) for k in ("train", "validation", "test")),
            )
            for c in manifest["clients"]
        ]
    except KeyError as exc:
        raise SchemaError(f"manifest references unknown row or key {exc}") from None
