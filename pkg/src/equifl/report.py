"""Local/global evaluation, cross-client statistics and report serialization.

All metric arithmetic is delegated to :mod:`equifl.fairness`.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import ClientDataset, Records
from .errors import InputError
from .fairness import delta_dp, delta_eo, hard_decisions
from .nn import ModelParams, forward

log = logging.getLogger(__name__)

STD_CONVENTION = "population (divide by N)"


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    delta_dp: float
    delta_eo: float
    size: int


@dataclass(frozen=True)
class ClientMetrics:
    client_id: int
    accuracy: float
    delta_dp: float
    delta_eo: float
    test_size: int


def score(predictions, records: Records) -> Metrics:
    if len(records) == 0:
        raise InputError("cannot score an empty record set")
    preds = np.asarray(predictions)
    return Metrics(
        accuracy=float(np.mean(preds == records.labels)),
        delta_dp=delta_dp(preds, records.sensitive),
        delta_eo=delta_eo(preds, records.labels, records.sensitive),
        size=len(records),
    )


def predict(params: ModelParams, records: Records) -> np.ndarray:
    return hard_decisions(forward(params, records.features))


def evaluate_local(clients: Sequence[ClientDataset], models: Sequence[ModelParams]) -> tuple[list[ClientMetrics], dict]:
    """Each client's model on its own test split.

    Returns:
        ``(per_client, averages)`` with unweighted means over the clients
        that have test data.
    """
    per_client = []
    for client, params in zip(clients, models, strict=True):
        if len(client.test) == 0:
            log.warning("client %d has no test data; excluded from local averages", client.client_id)
            continue
        m = score(predict(params, client.test), client.test)
        per_client.append(ClientMetrics(client.client_id, m.accuracy, m.delta_dp, m.delta_eo, m.size))
    return per_client, local_averages(per_client)


def local_averages(per_client: Sequence[ClientMetrics]) -> dict:
    if not per_client:
        return {"accuracy": float("nan"), "delta_dp": float("nan"), "delta_eo": float("nan")}
    return {
        k: float(np.mean([getattr(c, k) for c in per_client])) for k in ("accuracy", "delta_dp", "delta_eo")
    }


def evaluate_global(global_params: ModelParams, clients: Sequence[ClientDataset]) -> Metrics:
    """The global model on the concatenation of every client's test split."""
    pool = [c.test for c in clients if len(c.test)]
    if not pool:
        raise InputError("no client has test data")
    pooled = Records.concat(pool)
    return score(predict(global_params, pooled), pooled)


def evaluate_pooled(clients: Sequence[ClientDataset], models: Sequence[ModelParams]) -> Metrics:
    """Per-client models on their own test splits, predictions pooled."""
    preds, recs = [], []
    for client, params in zip(clients, models, strict=True):
        if len(client.test):
            preds.append(predict(params, client.test))
            recs.append(client.test)
    if not recs:
        raise InputError("no client has test data")
    return score(np.concatenate(preds), Records.concat(recs))


def performance_fairness_stats(per_client: Sequence[ClientMetrics]) -> dict:
    """Spread of accuracy and parity gap across clients (population std)."""
    if not per_client:
        raise InputError("need at least one client")
    out = {}
    for key in ("accuracy", "delta_dp"):
        v = np.asarray([getattr(c, key) for c in per_client], dtype=np.float64)
        out[key] = {
            "mean": float(v.mean()),
            "std": float(v.std()),
            "min": float(v.min()),
            "max": float(v.max()),
            "values": v.tolist(),
        }
    return out


@dataclass
class MetricsReport:
    round_index: int
    mode: str
    mu: float
    clients: list[ClientMetrics]
    local: dict
    global_: Metrics
    global_selective: Metrics
    stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "mode": self.mode,
            "mu": self.mu,
            "clients": [asdict(c) for c in self.clients],
            "local": self.local,
            "global": asdict(self.global_),
            "global_selective": asdict(self.global_selective),
            "stats": self.stats,
        }


def build_report(round_index: int, mode: str, mu: float, clients: Sequence[ClientDataset],
                 local_models: Sequence[ModelParams], global_params: ModelParams,
                 selective_models: Sequence[ModelParams]) -> MetricsReport:
    per_client, avgs = evaluate_local(clients, local_models)
    return MetricsReport(
        round_index=round_index,
        mode=mode,
        mu=mu,
        clients=per_client,
        local=avgs,
        global_=evaluate_global(global_params, clients),
        global_selective=evaluate_pooled(clients, selective_models),
        stats=performance_fairness_stats(per_client),
    )


def report_json(history: Sequence[MetricsReport], provenance: dict) -> str:
    doc = {
        "provenance": provenance,
        "std_convention": STD_CONVENTION,
        "history": [r.to_dict() for r in history],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


CLIENT_CSV_FIELDS = ["round", "mode", "mu", "client_id", "accuracy", "delta_dp", "delta_eo", "test_size"]


def _provenance_lines(provenance: dict) -> str:
    return "# provenance: " + json.dumps(provenance, sort_keys=True) + "\n"


def report_csv(history: Sequence[MetricsReport], provenance: dict) -> str:
    """One row per client per evaluated round, preceded by a ``#`` provenance line."""
    buf = io.StringIO()
    buf.write(_provenance_lines(provenance))
    w = csv.DictWriter(buf, CLIENT_CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for rep in history:
        for c in rep.clients:
            w.writerow({"round": rep.round_index, "mode": rep.mode, "mu": rep.mu, **asdict(c)})
    return buf.getvalue()


def table_csv(rows: Sequence[dict], fields: Sequence[str], provenance: dict) -> str:
    buf = io.StringIO()
    buf.write(_provenance_lines(provenance))
    w = csv.DictWriter(buf, list(fields), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
