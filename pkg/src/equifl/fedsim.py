"""Federated round engine with fairness-regularized local training.

In ``equifl`` mode a client entering a round takes only the hidden-layer
weight matrices from the global model and keeps its own biases and output
layer; ``fedavg`` mode copies everything. The server always averages every
parameter, weighted by client training-set size.
"""

from __future__ import annotations

import copy
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import ClientDataset, derive_seed
from .errors import ConfigError, DimensionError, NumericError
from .fairness import PenaltyKind
from .nn import AdamState, Batch, ModelParams, NetConfig, adam_step, check_same_shape, init_params, loss_and_grad
from .report import MetricsReport, build_report

log = logging.getLogger(__name__)

MODES = ("equifl", "fedavg")

# stream keys for derive_seed
CLIENT_STREAM = 21
ROUND_STREAM = 22


@dataclass(frozen=True)
class FedConfig:
    num_rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 256
    mu: float = 1.0
    participation_fraction: float = 1.0
    mode: str = "equifl"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    reset_optimizer: bool = False
    evaluate_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.num_rounds < 1:
            raise ConfigError("num_rounds must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.mu >= 0:
            raise ConfigError("mu must be >= 0")
        if not 0 < self.participation_fraction <= 1:
            raise ConfigError("participation_fraction must be in (0, 1]")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.evaluate_every < 1:
            raise ConfigError("evaluate_every must be >= 1")

    def fresh_optimizer(self, params: ModelParams) -> AdamState:
        return AdamState.fresh(params, self.learning_rate, self.beta1, self.beta2, self.epsilon)


@dataclass(frozen=True)
class ClientState:
    client_id: int
    data: ClientDataset
    params: ModelParams
    adam: AdamState
    rng: np.random.Generator


@dataclass(frozen=True)
class RoundState:
    round_index: int
    global_params: ModelParams
    roster: tuple[int, ...] = ()
    metrics: MetricsReport | None = None


def init_clients(datasets: Sequence[ClientDataset], global_params: ModelParams, cfg: FedConfig) -> list[ClientState]:
    """Every client starts from a copy of the initial global model."""
    return [
        ClientState(
            d.client_id,
            d,
            global_params.copy(),
            cfg.fresh_optimizer(global_params),
            np.random.default_rng(derive_seed(cfg.seed, CLIENT_STREAM, d.client_id)),
        )
        for d in datasets
    ]


def select_clients(num_clients: int, fraction: float, rng: np.random.Generator) -> list[int]:
    """ceil(fraction * N) distinct positions; everyone in order when fraction is 1."""
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must be in (0, 1]")
    if fraction == 1:
        return list(range(num_clients))
    k = max(1, math.ceil(fraction * num_clients - 1e-9))
    return sorted(int(i) for i in rng.choice(num_clients, size=k, replace=False))


def selective_init(local: ModelParams, global_params: ModelParams, mode: str) -> ModelParams:
    """Starting point of a client's local training for this round."""
    check_same_shape(local, global_params)
    if mode == "fedavg":
        return global_params.copy()
    if mode != "equifl":
        raise ConfigError(f"unknown mode {mode!r}")
    arrays = []
    last = len(local) - 1
    for i, (loc, glob) in enumerate(zip(local, global_params)):
        w = glob.weights if i < last else loc.weights
        arrays.extend((w.copy(), loc.bias.copy()))
    return ModelParams.from_arrays(arrays)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def local_training(client: ClientState, global_params: ModelParams, cfg: FedConfig) -> ClientState:
    """Selective init followed by ``local_epochs`` of mini-batch Adam.

    Raises:
        NumericError: naming the client, epoch and batch that went non-finite.
    """
    params = selective_init(client.params, global_params, cfg.mode)
    adam = cfg.fresh_optimizer(params) if cfg.reset_optimizer else client.adam
    rng = copy.deepcopy(client.rng)
    train = client.data.train
    penalty = PenaltyKind.SOFT_DP if cfg.mu > 0 else PenaltyKind.NONE
    for epoch in range(cfg.local_epochs):
        for b, idx in enumerate(iterate_batches(len(train), cfg.batch_size, rng)):
            batch = Batch(train.features[idx], train.sensitive[idx], train.labels[idx])
            try:
                _, grads = loss_and_grad(params, batch, cfg.mu, penalty)
            except NumericError as exc:
                raise NumericError(f"client {client.client_id}, epoch {epoch}, batch {b}: {exc}") from exc
            params, adam = adam_step(params, grads, adam)
    return replace(client, params=params, adam=adam, rng=rng)


def aggregate(params_list: Sequence[ModelParams], sizes: Sequence[int]) -> ModelParams:
    """Size-weighted element-wise mean of every weight and bias."""
    if not params_list:
        raise DimensionError("nothing to aggregate")
    if len(params_list) != len(sizes):
        raise DimensionError("one size per contributor required")
    if any(n < 1 for n in sizes):
        raise ConfigError("client sizes must be >= 1")
    total = float(sum(sizes))
    weights = [n / total for n in sizes]
    first = params_list[0]
    for p in params_list[1:]:
        check_same_shape(first, p)
    out = []
    for k in range(len(first.arrays())):
        acc = np.zeros_like(first.arrays()[k])
        for w, p in zip(weights, params_list):
            acc += w * p.arrays()[k]
        out.append(acc)
    return ModelParams.from_arrays(out)


def deployed_models(local: Sequence[ModelParams], global_params: ModelParams, mode: str) -> list[ModelParams]:
    """The model each client actually uses: its own in equifl, the global one in fedavg."""
    if mode == "fedavg":
        return [global_params for _ in local]
    return list(local)


def evaluate_round(round_index: int, clients: Sequence[ClientState], global_params: ModelParams,
                   cfg: FedConfig) -> MetricsReport:
    return build_report(
        round_index,
        cfg.mode,
        cfg.mu,
        [c.data for c in clients],
        deployed_models([c.params for c in clients], global_params, cfg.mode),
        global_params,
        [selective_init(c.params, global_params, cfg.mode) for c in clients],
    )


def default_threads() -> int:
    env = os.environ.get("EQUIFL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"EQUIFL_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def run_round(state: RoundState, clients: Sequence[ClientState], cfg: FedConfig,
              executor: ThreadPoolExecutor | None = None,
              schedule: Callable[[list[int]], list[int]] | None = None,
              evaluate: bool = False) -> tuple[RoundState, list[ClientState]]:
    """One communication round.

    ``schedule`` may reorder the roster before submission; results are
    always aggregated in roster order, so the outcome does not depend on it.
    """
    if state.round_index >= cfg.num_rounds:
        raise ConfigError(f"round {state.round_index} is past num_rounds={cfg.num_rounds}")
    rng = np.random.default_rng(derive_seed(cfg.seed, ROUND_STREAM, state.round_index))
    roster = select_clients(len(clients), cfg.participation_fraction, rng)
    order = schedule(list(roster)) if schedule else roster
    if executor is None:
        done = {i: local_training(clients[i], state.global_params, cfg) for i in order}
    else:
        futures = {i: executor.submit(local_training, clients[i], state.global_params, cfg) for i in order}
        done = {i: f.result() for i, f in futures.items()}
    new_global = aggregate([done[i].params for i in roster], [done[i].data.n for i in roster])
    new_clients = [done.get(i, c) for i, c in enumerate(clients)]
    t = state.round_index + 1
    metrics = evaluate_round(t, new_clients, new_global, cfg) if evaluate else None
    ids = tuple(clients[i].client_id for i in roster)
    return RoundState(t, new_global, ids, metrics), new_clients


@dataclass
class ExperimentResult:
    global_params: ModelParams
    local_params: list[ModelParams]
    history: list[MetricsReport] = field(default_factory=list)
    clients: list[ClientState] = field(default_factory=list)


def run_experiment(cfg: FedConfig, datasets: Sequence[ClientDataset], net: NetConfig,
                   threads: int | None = None, progress: Callable[[RoundState], None] | None = None) -> ExperimentResult:
    """Run ``cfg.num_rounds`` rounds from a freshly initialised global model.

    A report is recorded every ``cfg.evaluate_every`` rounds and always
    after the final one.
    """
    if not datasets:
        raise ConfigError("no client datasets")
    global_params = init_params(net)
    for d in datasets:
        if d.train.features.shape[1] != net.layer_dims[0]:
            raise DimensionError(f"client {d.client_id} features do not match input dim {net.layer_dims[0]}")
    clients = init_clients(datasets, global_params, cfg)
    state = RoundState(0, global_params)
    history = []
    threads = default_threads() if threads is None else threads
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(cfg.num_rounds):
            evaluate = (t + 1) % cfg.evaluate_every == 0 or t + 1 == cfg.num_rounds
            state, clients = run_round(state, clients, cfg, executor, evaluate=evaluate)
            if state.metrics is not None:
                history.append(state.metrics)
            if progress:
                progress(state)
    finally:
        if executor is not None:
            executor.shutdown()
    return ExperimentResult(state.global_params, [c.params for c in clients], history, clients)
