"""Local training objectives: cross-entropy plus an optional regularizer.

Four kinds are supported:

``fedavg``  plain mean cross-entropy
``fedl2``   + beta * ||a||_2 on the activation vector
``fedmax``  - beta * H(softmax(a))  (or beta * KL(softmax(a) || U), which
            differs only by the constant beta * ln d)
``fedprox`` + (mu / 2) * ||w - w_global||^2 over all parameters

Batch values are means over samples. The ``*_grad`` helpers return the
derivative of the batch-mean penalty with respect to the activation batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import LOG_FLOOR, ContractError, softmax

KINDS = ("fedavg", "fedl2", "fedmax", "fedprox")
ENTROPY_FORMS = ("entropy", "kl")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class LocalObjective:
    kind: str = "fedavg"
    beta: float = 0.0
    mu: float = 0.0
    # "entropy" optimizes -beta*H, "kl" optimizes beta*KL(.||U); same gradients
    entropy_form: str = "entropy"

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown objective kind {self.kind!r}; expected one of {KINDS}")
        if self.entropy_form not in ENTROPY_FORMS:
            raise ConfigError(f"entropy_form must be one of {ENTROPY_FORMS}")
        if self.beta < 0 or self.mu < 0:
            raise ConfigError("beta and mu must be nonnegative")
        if kind in ("fedavg", "fedprox") and self.beta != 0:
            raise ConfigError(f"{kind} takes no beta")
        if kind != "fedprox" and self.mu != 0:
            raise ConfigError("mu is only meaningful for fedprox")

    @property
    def needs_global(self) -> bool:
        return self.kind == "fedprox"


def _rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(1, -1) if a.ndim == 1 else a


def cross_entropy_loss(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(label) < logits.shape[-1]:
        raise ContractError(f"label {label} out of range for {logits.shape[-1]} classes")
    m = np.max(logits)
    log_z = m + math.log(np.sum(np.exp(logits - m)))
    return float(log_z - logits[int(label)])


def batch_cross_entropy(logits, labels) -> float:
    logits = _rows(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ContractError("labels must have one entry per logit row")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ContractError("label out of range")
    m = np.max(logits, axis=1, keepdims=True)
    log_z = m[:, 0] + np.log(np.sum(np.exp(logits - m), axis=1))
    return float(np.mean(log_z - logits[np.arange(len(labels)), labels]))


def cross_entropy_grad(logits, labels) -> np.ndarray:
    """d(mean CE)/d(logits)."""
    logits = _rows(logits)
    g = softmax(logits, axis=1)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / logits.shape[0]


def l2_activation_penalty(a, beta: float) -> float:
    a = _rows(a)
    return float(beta * np.mean(np.linalg.norm(a, axis=1)))


def l2_activation_grad(a, beta: float) -> np.ndarray:
    a = _rows(a)
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    # subgradient 0 at a == 0
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, beta * a / safe, 0.0) / a.shape[0]


def _entropies(s: np.ndarray) -> np.ndarray:
    return -np.sum(s * np.log(np.maximum(s, LOG_FLOOR)), axis=1)


def max_entropy_penalty(a, beta: float) -> float:
    """-beta * mean_i H(softmax(a_i))."""
    s = softmax(_rows(a), axis=1)
    return float(-beta * np.mean(_entropies(s)))


def max_entropy_grad(a, beta: float) -> np.ndarray:
    # dH/da = -s * (ln s + H)
    a = _rows(a)
    s = softmax(a, axis=1)
    log_s = np.log(np.maximum(s, LOG_FLOOR))
    h = _entropies(s)[:, None]
    return beta * s * (log_s + h) / a.shape[0]


def kl_uniform_penalty(a, beta: float) -> float:
    """beta * mean_i KL(softmax(a_i) || U_d)."""
    a = _rows(a)
    s = softmax(a, axis=1)
    log_ratio = np.log(np.maximum(s, LOG_FLOOR)) + math.log(a.shape[1])
    return float(beta * np.mean(np.sum(s * log_ratio, axis=1)))


def kl_uniform_grad(a, beta: float) -> np.ndarray:
    # chain rule through the softmax Jacobian diag(s) - s s^T
    a = _rows(a)
    s = softmax(a, axis=1)
    g = np.log(np.maximum(s, LOG_FLOOR)) + math.log(a.shape[1]) + 1.0
    return beta * s * (g - np.sum(s * g, axis=1, keepdims=True)) / a.shape[0]


def proximal_penalty(local_w: Sequence, global_w: Sequence, mu: float) -> float:
    local_w, global_w = list(local_w), list(global_w)
    if len(local_w) != len(global_w):
        raise ContractError("parameter lists differ in length")
    total = 0.0
    for lw, gw in zip(local_w, global_w):
        lw, gw = np.asarray(lw, dtype=np.float64), np.asarray(gw, dtype=np.float64)
        if lw.shape != gw.shape:
            raise ContractError(f"parameter shape mismatch: {lw.shape} vs {gw.shape}")
        total += float(np.sum((lw - gw) ** 2))
    return 0.5 * mu * total


def proximal_grad(local_w: Sequence, global_w: Sequence, mu: float) -> list[np.ndarray]:
    return [mu * (np.asarray(lw) - np.asarray(gw)) for lw, gw in zip(local_w, global_w)]


def activation_penalty(a, objective: LocalObjective) -> float:
    if objective.kind == "fedl2" and objective.beta != 0:
        return l2_activation_penalty(a, objective.beta)
    if objective.kind == "fedmax" and objective.beta != 0:
        if objective.entropy_form == "kl":
            return kl_uniform_penalty(a, objective.beta)
        return max_entropy_penalty(a, objective.beta)
    return 0.0


def activation_penalty_grad(a, objective: LocalObjective) -> np.ndarray | None:
    """Gradient of the batch penalty w.r.t. the activations, or None when inactive."""
    if objective.kind == "fedl2" and objective.beta != 0:
        return l2_activation_grad(a, objective.beta)
    if objective.kind == "fedmax" and objective.beta != 0:
        if objective.entropy_form == "kl":
            return kl_uniform_grad(a, objective.beta)
        return max_entropy_grad(a, objective.beta)
    return None


def total_local_loss(trace, labels, objective: LocalObjective, global_w=None, local_w=None) -> float:
    """Mean cross-entropy + activation penalty (+ proximal term for fedprox).

    ``trace`` is a forward trace (anything with ``logits`` and ``activation``).
    For fedprox both ``local_w`` and ``global_w`` parameter sequences are required.
    """
    loss = batch_cross_entropy(trace.logits, labels)
    reg = activation_penalty(trace.activation, objective)
    if reg != 0.0:
        loss += reg
    if objective.needs_global:
        if global_w is None or local_w is None:
            raise ConfigError("fedprox objective needs the global weights")
        if objective.mu != 0:
            loss += proximal_penalty(local_w, global_w, objective.mu)
    return loss
