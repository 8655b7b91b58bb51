"""Learning core: flat parameter vectors, softmax/MLP models with analytic
gradients, client-side SGD (plain, proximal, pFedMe-lite), evaluation and
partial-upload masks.

All federation-visible arithmetic is float64. Features are stored as float32
and widened when a batch is loaded.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .rng import PortableRNG

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    shapes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shapes", tuple((int(r), int(c)) for r, c in self.shapes))
        if values.ndim != 1:
            raise ShapeError("values must be a flat array")
        if sum(r * c for r, c in self.shapes) != values.size:
            raise ShapeError(
                f"layer sizes sum to {sum(r * c for r, c in self.shapes)}, values has {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains non-finite values")

    def __len__(self) -> int:
        return self.values.size

    def layers(self) -> list[np.ndarray]:
        out, offset = [], 0
        for r, c in self.shapes:
            out.append(self.values[offset : offset + r * c].reshape(r, c))
            offset += r * c
        return out

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.shapes)

    def equals(self, other: "ParamVector") -> bool:
        """Bitwise equality (including signed zeros)."""
        return self.shapes == other.shapes and self.values.tobytes() == other.values.tobytes()

    def __eq__(self, other) -> bool:
        return isinstance(other, ParamVector) and self.equals(other)

    __hash__ = None

    def to_bytes(self) -> bytes:
        head = struct.pack("<I", len(self.shapes))
        head += b"".join(struct.pack("<II", r, c) for r, c in self.shapes)
        return head + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamVector":
        if len(data) < 4:
            raise ValueError("truncated parameter blob")
        (count,) = struct.unpack_from("<I", data, 0)
        end = 4 + 8 * count
        if len(data) < end:
            raise ValueError("truncated parameter shapes")
        flat = struct.unpack_from(f"<{2 * count}I", data, 4)
        shapes = tuple(zip(flat[0::2], flat[1::2]))
        n = sum(r * c for r, c in shapes)
        if len(data) != end + 8 * n:
            raise ValueError(f"parameter blob holds {len(data) - end} value bytes, expected {8 * n}")
        values = np.frombuffer(data, dtype="<f8", count=n, offset=end).astype(np.float64)
        return cls(values, shapes)


@dataclass(frozen=True)
class ModelSpec:
    family: str  # "softmax" | "mlp"
    feature_dim: int
    n_classes: int
    hidden_dim: int | None = None

    def __post_init__(self):
        if self.family not in ("softmax", "mlp"):
            raise ValueError(f"unknown model family {self.family!r}")
        if self.feature_dim < 1 or self.n_classes < 1:
            raise ValueError("model dimensions must be positive")
        if self.family == "mlp" and (self.hidden_dim is None or self.hidden_dim < 1):
            raise ValueError("mlp needs a positive hidden_dim")

    @property
    def dense_layers(self) -> list[tuple[int, int]]:
        if self.family == "softmax":
            return [(self.feature_dim, self.n_classes)]
        return [(self.feature_dim, self.hidden_dim), (self.hidden_dim, self.n_classes)]

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        out = []
        for fan_in, fan_out in self.dense_layers:
            out += [(fan_in, fan_out), (1, fan_out)]
        return tuple(out)

    @property
    def n_params(self) -> int:
        return sum(r * c for r, c in self.shapes)


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 0.01
    local_epochs: int = 2
    batch_size: int = 64
    variant: str = "plain"  # plain | prox | pfedme
    mu: float = 0.0
    lam: float = 15.0
    inner_steps: int = 5
    mask_policy: str = "full"  # full | partial
    mask_period: int = 1

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be positive")
        if self.variant not in ("plain", "prox", "pfedme"):
            raise ValueError(f"unknown trainer variant {self.variant!r}")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.lam <= 0 or self.inner_steps < 1:
            raise ValueError("pfedme needs lam > 0 and inner_steps >= 1")
        if self.mask_policy not in ("full", "partial"):
            raise ValueError(f"unknown mask policy {self.mask_policy!r}")
        if self.mask_period < 1:
            raise ValueError("mask_period must be >= 1")

    def steps_per_epoch(self, n_samples: int) -> int:
        return max(1, math.ceil(n_samples / self.batch_size))

    def expected_steps(self, n_samples: int) -> int:
        per_outer = self.inner_steps if self.variant == "pfedme" else 1
        return self.local_epochs * self.steps_per_epoch(n_samples) * per_outer


class SampleSource(Protocol):
    """Read access to a client's samples by position (0..len-1)."""

    def __len__(self) -> int: ...

    def read(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class ArraySource:
    def __init__(self, features: np.ndarray, labels: np.ndarray):
        self.features = features
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)

    def read(self, positions):
        return self.features[positions].astype(np.float64), self.labels[positions].astype(np.int64)


def init_params(spec: ModelSpec, seed: int | Sequence[int] = 0) -> ParamVector:
    rng = PortableRNG(*_seed_parts(seed))
    chunks = []
    for fan_in, fan_out in spec.dense_layers:
        s = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append((2.0 * rng.uniforms(fan_in * fan_out) - 1.0) * s)
        chunks.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(chunks), spec.shapes)


def _seed_parts(seed) -> tuple[int, ...]:
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward(spec: ModelSpec, layers: list[np.ndarray], x: np.ndarray):
    if spec.family == "softmax":
        w, b = layers
        return x @ w + b, None
    w1, b1, w2, b2 = layers
    hidden = np.tanh(x @ w1 + b1)
    return hidden @ w2 + b2, hidden


def _check_batch(spec: ModelSpec, params: ParamVector, x: np.ndarray, y: np.ndarray):
    if params.shapes != spec.shapes:
        raise ShapeError(f"params shapes {params.shapes} do not match model {spec.shapes}")
    if x.ndim != 2 or x.shape[1] != spec.feature_dim:
        raise ShapeError(f"batch features {x.shape} do not match feature_dim {spec.feature_dim}")
    if len(x) == 0 or len(x) != len(y):
        raise ShapeError("batch must be non-empty with one label per row")


def loss_and_grad(spec: ModelSpec, params: ParamVector, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy over the batch and its analytic gradient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_batch(spec, params, x, y)
    n = len(y)
    layers = params.layers()
    logits, hidden = _forward(spec, layers, x)
    logp = _log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    if spec.family == "softmax":
        grads = [x.T @ dlogits, dlogits.sum(axis=0, keepdims=True)]
    else:
        w2 = layers[2]
        dz1 = (dlogits @ w2.T) * (1.0 - hidden * hidden)
        grads = [
            x.T @ dz1,
            dz1.sum(axis=0, keepdims=True),
            hidden.T @ dlogits,
            dlogits.sum(axis=0, keepdims=True),
        ]
    flat = np.concatenate([g.ravel() for g in grads])
    return float(loss), ParamVector(flat, params.shapes)


def _grad_values(spec, values, shapes, x, y) -> np.ndarray:
    return loss_and_grad(spec, ParamVector(values, shapes), x, y)[1].values


@dataclass
class TrainResult:
    params: ParamVector
    n_samples: int
    tau: int
    personal: ParamVector | None = None


def local_train(
    spec: ModelSpec,
    global_params: ParamVector,
    data: SampleSource,
    cfg: TrainerConfig,
    rng_seed: int | Sequence[int] = 0,
    personal: ParamVector | None = None,
) -> TrainResult:
    """Run the configured local SGD variant starting from ``global_params``.

    For pfedme, ``personal`` carries the client's personalized model across
    rounds (defaults to the global model) and the updated one is returned in
    ``TrainResult.personal``.
    """
    n = len(data)
    if n == 0:
        raise ValueError("client has no samples")
    if cfg.batch_size > n:
        log.info("batch_size %d exceeds %d local samples; using one full batch per epoch", cfg.batch_size, n)
    rng = PortableRNG(*_seed_parts(rng_seed))
    shapes = global_params.shapes
    anchor = global_params.values
    w = anchor.copy()
    theta = (personal.values if personal is not None else anchor).copy()
    tau = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            x, y = data.read(order[start : start + cfg.batch_size])
            if cfg.variant == "pfedme":
                for _ in range(cfg.inner_steps):
                    g = _grad_values(spec, theta, shapes, x, y) + cfg.lam * (theta - w)
                    theta = theta - cfg.lr * g
                    tau += 1
                w = w - cfg.lr * cfg.lam * (w - theta)
                continue
            g = _grad_values(spec, w, shapes, x, y)
            if cfg.variant == "prox" and cfg.mu:
                g = g + cfg.mu * (w - anchor)
            w = w - cfg.lr * g
            tau += 1
    return TrainResult(
        ParamVector(w, shapes),
        n,
        tau,
        ParamVector(theta, shapes) if cfg.variant == "pfedme" else None,
    )


@dataclass
class Evaluation:
    accuracy: float
    mean_loss: float
    per_class_accuracy: list[float] = field(default_factory=list)
    n_samples: int = 0


def predict_logits(spec: ModelSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    return _forward(spec, params.layers(), np.asarray(x, dtype=np.float64))[0]


def evaluate(spec: ModelSpec, params: ParamVector, features: np.ndarray, labels: np.ndarray) -> Evaluation:
    """Accuracy, mean loss and per-class accuracy (NaN where a class is absent).

    Ties in the argmax go to the lowest class index.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(spec, params, x)
    logp = _log_softmax(logits)
    pred = np.argmax(logits, axis=1)
    hit = pred == y
    per_class = []
    for c in range(spec.n_classes):
        sel = y == c
        per_class.append(float(hit[sel].mean()) if sel.any() else float("nan"))
    return Evaluation(
        accuracy=float(hit.mean()),
        mean_loss=float(-logp[np.arange(len(y)), y].mean()),
        per_class_accuracy=per_class,
        n_samples=len(y),
    )


@dataclass(frozen=True)
class UpdateMask:
    """Either the full vector (``start is None``) or the half-open range [start, stop)."""

    start: int | None = None
    stop: int | None = None

    @property
    def is_full(self) -> bool:
        return self.start is None


FULL_MASK = UpdateMask()


def last_layer_mask(spec: ModelSpec) -> UpdateMask:
    fan_in, fan_out = spec.dense_layers[-1]
    return UpdateMask(spec.n_params - (fan_in * fan_out + fan_out), spec.n_params)


def mask_for_round(spec: ModelSpec, cfg: TrainerConfig, participation: int) -> UpdateMask:
    """Partial policy uploads the full vector every ``mask_period``-th round
    (1-based), the last layer otherwise."""
    if cfg.mask_policy == "full" or (participation + 1) % cfg.mask_period == 0:
        return FULL_MASK
    return last_layer_mask(spec)


def apply_mask(full_update: ParamVector, base: ParamVector, mask: UpdateMask) -> ParamVector:
    if full_update.shapes != base.shapes:
        raise ShapeError("update and base shapes differ")
    if mask.is_full:
        return full_update
    if not 0 <= mask.start <= mask.stop <= len(base):
        raise ShapeError(f"mask [{mask.start}, {mask.stop}) outside vector of length {len(base)}")
    values = base.values.copy()
    values[mask.start : mask.stop] = full_update.values[mask.start : mask.stop]
    return base.with_values(values)
