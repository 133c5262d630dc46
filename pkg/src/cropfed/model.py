"""Parametric yield regressors with analytic gradients and full-batch local training.

Two model families share one flat parameter layout so they can be averaged
across farms:

* ``linear``: ``[w_0, ..., w_{d-1}, b]``
* ``mlp``: for each dense layer in order, the weight matrix (``out x in``,
  row-major) followed by its bias vector. The last layer has one output
  and no activation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LINEAR = "linear"
MLP = "mlp"
ACTIVATIONS = ("relu", "tanh")


class DivergenceError(RuntimeError):
    """Training produced non-finite parameters."""

    def __init__(self, message: str, *, epoch: int | None = None,
                 farm_id: int | None = None, round_index: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.farm_id = farm_id
        self.round_index = round_index


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind not in (LINEAR, MLP):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.kind == LINEAR and self.hidden_dims:
            raise ValueError("linear model takes no hidden_dims")
        if self.kind == MLP:
            if not self.hidden_dims:
                raise ValueError("mlp model needs at least one hidden layer")
            if any(h < 1 for h in self.hidden_dims):
                raise ValueError("hidden_dims must be positive")
            if self.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def linear(cls, d: int) -> ModelSpec:
        return cls(LINEAR, d)

    @classmethod
    def mlp(cls, d: int, hidden: Sequence[int], activation: str = "relu") -> ModelSpec:
        return cls(MLP, d, tuple(hidden), activation)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, 1)

    @property
    def param_count(self) -> int:
        sizes = self.layer_sizes
        return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim,
                "hidden_dims": list(self.hidden_dims), "activation": self.activation}


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Immutable flat parameter vector tied to the spec it parameterizes."""

    spec: ModelSpec
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values).reshape(-1)
        object.__setattr__(self, "values", values)
        if values.shape[0] != self.spec.param_count:
            raise ValueError(
                f"expected {self.spec.param_count} parameters, got {values.shape[0]}")
        if not np.all(np.isfinite(values)):
            raise DivergenceError("parameter vector contains non-finite values")

    def __len__(self) -> int:
        return self.values.shape[0]

    def same_as(self, other: ParamVector) -> bool:
        """Bit-level equality, including the spec."""
        return self.spec == other.spec and self.values.tobytes() == other.values.tobytes()

    def tolist(self) -> list[float]:
        return [float(v) for v in self.values]


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    farm_id: int = 0

    def __post_init__(self):
        x = _frozen(self.features)
        y = _frozen(self.targets).reshape(-1)
        if x.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if x.shape[0] < 1:
            raise ValueError("dataset must contain at least one example")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} feature rows but {y.shape[0]} targets")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError(f"farm {self.farm_id}: dataset has non-finite entries")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def same_as(self, other: Dataset) -> bool:
        return (self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes()
                and self.targets.tobytes() == other.targets.tobytes())


def concat_datasets(datasets: Sequence[Dataset], farm_id: int = -1) -> Dataset:
    if not datasets:
        raise ValueError("no datasets to concatenate")
    return Dataset(np.vstack([ds.features for ds in datasets]),
                   np.concatenate([ds.targets for ds in datasets]), farm_id)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_mode: str = field(default="full")

    def __post_init__(self):
        # lr == 0 is tolerated so a frozen model can be pushed through the same path
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError("learning_rate must be a finite non-negative number")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_mode != "full":
            raise ValueError("only full-batch training is supported")


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    if spec.kind == LINEAR:
        return ParamVector(spec, np.zeros(spec.param_count))
    rng = np.random.default_rng(seed)
    chunks = []
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 0.5 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamVector(spec, np.concatenate(chunks))


def _unpack(spec: ModelSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    pos = 0
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = values[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
        pos += fan_in * fan_out
        b = values[pos:pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activate_grad(kind: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    return (z > 0.0).astype(np.float64) if kind == "relu" else 1.0 - h * h


def _check_dim(spec: ModelSpec, x: np.ndarray) -> None:
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"expected {spec.input_dim} features, got {x.shape[-1]}")


def predict_batch(params: ParamVector, features: np.ndarray) -> np.ndarray:
    spec = params.spec
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    _check_dim(spec, x)
    if spec.kind == LINEAR:
        return x @ params.values[:-1] + params.values[-1]
    layers = _unpack(spec, params.values)
    h = x
    for w, b in layers[:-1]:
        h = _activate(spec.activation, h @ w.T + b)
    w, b = layers[-1]
    return (h @ w.T + b)[:, 0]


def predict(params: ParamVector, x: Sequence[float]) -> float:
    row = np.asarray(x, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError("x must be a single feature vector")
    return float(predict_batch(params, row[None, :])[0])


def mse_loss(params: ParamVector, data: Dataset) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        resid = predict_batch(params, data.features) - data.targets
        return float(np.mean(resid * resid))


def gradient(params: ParamVector, data: Dataset) -> ParamVector:
    """Exact full-batch gradient of ``mse_loss`` with respect to ``params``."""
    return ParamVector(params.spec, _gradient(params.spec, params.values, data))


def _gradient(spec: ModelSpec, values: np.ndarray, data: Dataset) -> np.ndarray:
    x, y = data.features, data.targets
    _check_dim(spec, x)
    n = y.shape[0]
    if spec.kind == LINEAR:
        delta = (2.0 / n) * (x @ values[:-1] + values[-1] - y)
        return np.concatenate([delta @ x, [delta.sum()]])

    layers = _unpack(spec, values)
    zs, hs = [], [x]
    for w, b in layers[:-1]:
        z = hs[-1] @ w.T + b
        zs.append(z)
        hs.append(_activate(spec.activation, z))
    w_out, b_out = layers[-1]
    pred = (hs[-1] @ w_out.T + b_out)[:, 0]

    delta = ((2.0 / n) * (pred - y))[:, None]
    grads: list[np.ndarray] = []
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        grads.append(delta.sum(axis=0))
        grads.append((delta.T @ hs[idx]).reshape(-1))
        if idx > 0:
            delta = (delta @ w) * _activate_grad(spec.activation, zs[idx - 1], hs[idx])
    grads.reverse()
    return np.concatenate(grads)


def local_update(cluster_model: ParamVector, data: Dataset, cfg: TrainConfig) -> ParamVector:
    """Run ``cfg.epochs`` full-batch gradient steps starting from ``cluster_model``."""
    spec = cluster_model.spec
    p = cluster_model.values.copy()
    for epoch in range(cfg.epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            p = p - cfg.learning_rate * _gradient(spec, p, data)
        if not np.all(np.isfinite(p)):
            raise DivergenceError(
                f"farm {data.farm_id}: parameters became non-finite at epoch {epoch}",
                epoch=epoch, farm_id=data.farm_id)
    return ParamVector(spec, p)


def smoothness(data: Dataset) -> float:
    """Gradient Lipschitz constant of the linear-model MSE on ``data``.

    Full-batch gradient descent on the linear model is monotone for any
    learning rate below ``1 / smoothness(data)``.
    """
    xa = np.hstack([data.features, np.ones((data.n, 1))])
    return float(2.0 / data.n * np.linalg.eigvalsh(xa.T @ xa)[-1])
