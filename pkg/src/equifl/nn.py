"""Fully connected binary classifier in NumPy: forward, loss/gradients, Adam.

Everything here is a pure function over immutable parameter containers; the
optimizer returns a new :class:`AdamState` instead of mutating one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, InputError, NumericError
from .fairness import PenaltyKind, soft_dp_penalty

DTYPE = np.float64


@dataclass(frozen=True)
class LayerParams:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.ndim != 1 or self.weights.shape[0] != self.bias.shape[0]:
            raise DimensionError(f"weights {self.weights.shape} incompatible with bias {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class ModelParams:
    """Ordered layers of an MLP. Also used as the container for gradients
    and Adam moments, which share its shape."""

    layers: tuple[LayerParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise DimensionError("a model needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.in_dim != prev.out_dim:
                raise DimensionError(f"layer input {cur.in_dim} does not match previous output {prev.out_dim}")

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[LayerParams]:
        return iter(self.layers)

    @property
    def shapes(self) -> tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]:
        return tuple((l.weights.shape, l.bias.shape) for l in self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    def arrays(self) -> list[np.ndarray]:
        """Flat list ``[W1, b1, ..., Wm, bm]``."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "ModelParams":
        if len(arrays) % 2:
            raise DimensionError("expected an even number of arrays (weights, bias pairs)")
        return cls(tuple(LayerParams(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)))

    def map(self, fn: Callable[..., np.ndarray], *others: "ModelParams") -> "ModelParams":
        for other in others:
            check_same_shape(self, other)
        cols = zip(self.arrays(), *(o.arrays() for o in others))
        return ModelParams.from_arrays([fn(*c) for c in cols])

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every array."""
        return self.shapes == other.shapes and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


def check_same_shape(a: ModelParams, b: ModelParams) -> None:
    if a.shapes != b.shapes:
        raise DimensionError(f"parameter shapes differ: {a.shapes} vs {b.shapes}")


@dataclass(frozen=True)
class NetConfig:
    layer_dims: tuple[int, ...]
    hidden_activation: str = "relu"
    init_scheme: str = "uniform-scaled"
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ConfigError(f"layer_dims needs an input and an output entry, got {dims}")
        if any(d <= 0 for d in dims):
            raise ConfigError(f"layer_dims must be positive, got {dims}")
        if dims[-1] != 1:
            raise ConfigError(f"binary head requires last layer dim 1, got {dims[-1]}")
        if self.hidden_activation != "relu":
            raise ConfigError(f"unsupported activation {self.hidden_activation!r}")
        if self.init_scheme != "uniform-scaled":
            raise ConfigError(f"unsupported init scheme {self.init_scheme!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @classmethod
    def default(cls, input_dim: int, seed: int = 0) -> "NetConfig":
        return cls((input_dim, 64, 64, 1), seed=seed)


def init_params(cfg: NetConfig) -> ModelParams:
    """Weights ~ U(-1/sqrt(in_dim), 1/sqrt(in_dim)), biases zero."""
    rng = np.random.default_rng(cfg.seed)
    layers = []
    for fan_in, fan_out in zip(cfg.layer_dims, cfg.layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(DTYPE)
        layers.append(LayerParams(w, np.zeros(fan_out, dtype=DTYPE)))
    return ModelParams(tuple(layers))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=DTYPE)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cache(params: ModelParams, features: np.ndarray):
    x = np.asarray(features, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(f"features of shape {x.shape} do not match input dim {params.input_dim}")
    acts = [x]
    a = x
    last = len(params) - 1
    # non-finite values are reported by the callers that check for them
    with np.errstate(invalid="ignore", over="ignore"):
        for i, layer in enumerate(params):
            z = a @ layer.weights.T + layer.bias
            a = np.maximum(z, 0.0) if i < last else z
            acts.append(a)
    return acts  # acts[-1] is the output logit, shape (batch, 1)


def logits(params: ModelParams, features) -> np.ndarray:
    return _forward_cache(params, features)[-1][:, 0]


def forward(params: ModelParams, features) -> np.ndarray:
    """Predicted probability of the positive class for every row."""
    return sigmoid(logits(params, features))


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    sensitive: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.features)
        if len(self.sensitive) != n or len(self.labels) != n:
            raise DimensionError("features, sensitive and labels must share the batch length")

    def __len__(self) -> int:
        return len(self.labels)


def loss_and_grad(
    params: ModelParams,
    batch: Batch,
    mu: float = 0.0,
    penalty: PenaltyKind | str = PenaltyKind.SOFT_DP,
) -> tuple[float, ModelParams]:
    """Mean binary cross-entropy plus ``mu`` times the soft parity gap.

    Gradients are exact reverse-mode derivatives of the returned scalar with
    respect to every weight and bias.
    """
    if len(batch) == 0:
        raise InputError("empty batch")
    if mu < 0:
        raise ConfigError("mu must be non-negative")
    penalty = PenaltyKind(penalty)
    acts = _forward_cache(params, batch.features)
    z = acts[-1][:, 0]
    y = np.asarray(batch.labels, dtype=DTYPE)
    n = z.shape[0]

    # softplus(z) - y*z, written to stay finite for large |z|
    bce = np.mean(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - y * z)
    p = sigmoid(z)
    dz = (p - y) / n
    loss = bce
    if mu > 0 and penalty is PenaltyKind.SOFT_DP:
        gap, dgap = soft_dp_penalty(p, batch.sensitive)
        loss = bce + mu * gap
        dz = dz + mu * dgap * p * (1.0 - p)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")

    grads = [None] * (2 * len(params))
    delta = dz[:, None]
    for i in range(len(params) - 1, -1, -1):
        layer = params.layers[i]
        grads[2 * i] = delta.T @ acts[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layer.weights) * (acts[i] > 0.0)
    out = ModelParams.from_arrays(grads)
    if not out.all_finite():
        raise NumericError("non-finite gradient")
    return float(loss), out


@dataclass(frozen=True)
class AdamState:
    first_moment: ModelParams
    second_moment: ModelParams
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0, learning_rate, beta1, beta2, epsilon)


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    check_same_shape(params, grads)
    check_same_shape(params, state.first_moment)
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    m = state.first_moment.map(lambda m_, g: b1 * m_ + (1.0 - b1) * g, grads)
    v = state.second_moment.map(lambda v_, g: b2 * v_ + (1.0 - b2) * g * g, grads)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    lr = state.learning_rate
    new = params.map(lambda p, m_, v_: p - lr * (m_ / c1) / (np.sqrt(v_ / c2) + state.epsilon), m, v)
    return new, AdamState(m, v, t, lr, b1, b2, state.epsilon)
