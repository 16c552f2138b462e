"""Two-layer perceptron with a hand-written backward pass.

The activation vector is the ReLU output of the hidden layer, i.e. the input
of the final fully-connected layer; the activation regularizers act on it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import objectives as obj
from .numerics import ContractError, Rng, as_tensor, softmax

CHECKPOINT_MAGIC = b"FEDMAX-MLP v1\n"
PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class MlpModel:
    w1: np.ndarray  # hidden x in
    b1: np.ndarray  # hidden
    w2: np.ndarray  # out x hidden
    b2: np.ndarray  # out

    def __post_init__(self):
        hid, ind = self.w1.shape
        out = self.w2.shape[0]
        if self.b1.shape != (hid,) or self.w2.shape != (out, hid) or self.b2.shape != (out,):
            raise ContractError(
                f"inconsistent parameter shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )

    @classmethod
    def zeros(cls, in_dim: int = 1024, hidden_dim: int = 512, out_dim: int = 10) -> "MlpModel":
        return cls(
            np.zeros((hidden_dim, in_dim)),
            np.zeros(hidden_dim),
            np.zeros((out_dim, hidden_dim)),
            np.zeros(out_dim),
        )

    @classmethod
    def init(cls, rng: Rng, in_dim: int = 1024, hidden_dim: int = 512, out_dim: int = 10) -> "MlpModel":
        """Zero biases, weights drawn from N(0, 1/fan_in) (std 1/sqrt(fan_in))."""
        w1 = rng.normal(0.0, 1.0 / np.sqrt(in_dim), (hidden_dim, in_dim))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), (out_dim, hidden_dim))
        return cls(w1, np.zeros(hidden_dim), w2, np.zeros(out_dim))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]

    @property
    def params(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    def clone(self) -> "MlpModel":
        return MlpModel(*(p.copy() for p in self.params))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    @classmethod
    def from_flat(cls, flat, in_dim: int, hidden_dim: int, out_dim: int) -> "MlpModel":
        flat = np.asarray(flat, dtype=np.float64)
        shapes = [(hidden_dim, in_dim), (hidden_dim,), (out_dim, hidden_dim), (out_dim,)]
        sizes = [int(np.prod(s)) for s in shapes]
        if flat.size != sum(sizes):
            raise ContractError(f"expected {sum(sizes)} parameters, got {flat.size}")
        parts, offset = [], 0
        for shape, size in zip(shapes, sizes):
            parts.append(flat[offset : offset + size].reshape(shape).copy())
            offset += size
        return cls(*parts)

    def save(self, path) -> None:
        """Binary checkpoint: magic line, three little-endian u32 dims, then
        float64 LE parameters in the order w1 (row-major), b1, w2 (row-major), b2."""
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<3I", *self.dims))
            fh.write(self.flat().astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "MlpModel":
        data = Path(path).read_bytes()
        if not data.startswith(CHECKPOINT_MAGIC):
            raise ContractError(f"{path}: not a model checkpoint")
        off = len(CHECKPOINT_MAGIC)
        dims = struct.unpack("<3I", data[off : off + 12])
        flat = np.frombuffer(data[off + 12 :], dtype="<f8").astype(np.float64)
        return cls.from_flat(flat, *dims)


@dataclass
class ForwardTrace:
    x: np.ndarray
    z1: np.ndarray
    activation: np.ndarray  # ReLU(z1), one row per sample
    logits: np.ndarray

    @property
    def softmaxed(self) -> np.ndarray:
        return softmax(self.activation, axis=1)


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def params(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)


def forward(model: MlpModel, x) -> ForwardTrace:
    x = as_tensor(x, cols=model.dims[0])
    z1 = x @ model.w1.T + model.b1
    a = np.maximum(z1, 0.0)
    logits = a @ model.w2.T + model.b2
    return ForwardTrace(x, z1, a, logits)


def predict(model: MlpModel, x) -> np.ndarray:
    """Class predictions; argmax ties go to the lowest index."""
    return np.argmax(forward(model, x).logits, axis=1)


def backward(model: MlpModel, trace: ForwardTrace, labels, objective: obj.LocalObjective,
             global_weights: MlpModel | None = None) -> tuple[float, Gradients]:
    labels = np.asarray(labels, dtype=np.int64)
    if objective.needs_global and global_weights is None:
        raise obj.ConfigError("fedprox objective needs the global weights")
    global_params = global_weights.params if global_weights is not None else None
    loss = obj.total_local_loss(trace, labels, objective, global_params, model.params)

    dlogits = obj.cross_entropy_grad(trace.logits, labels)
    dw2 = dlogits.T @ trace.activation
    db2 = dlogits.sum(axis=0)
    da = dlogits @ model.w2
    dreg = obj.activation_penalty_grad(trace.activation, objective)
    if dreg is not None:
        da = da + dreg
    dz1 = da * (trace.z1 > 0)
    dw1 = dz1.T @ trace.x
    db1 = dz1.sum(axis=0)
    grads = Gradients(dw1, db1, dw2, db2)

    if objective.needs_global and objective.mu != 0:
        prox = obj.proximal_grad(model.params, global_params, objective.mu)
        grads = Gradients(*(g + p for g, p in zip(grads.params, prox)))
    return loss, grads


def sgd_step(model: MlpModel, grads: Gradients, eta: float) -> MlpModel:
    """In-place update ``p <- p - eta * grad``; returns ``model`` for chaining."""
    if eta <= 0:
        raise ContractError(f"learning rate must be positive, got {eta}")
    for p, g in zip(model.params, grads.params):
        if p.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        p -= eta * g
    if not model.is_finite():
        raise ContractError("parameters became non-finite after SGD step")
    return model
