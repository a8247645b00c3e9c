"""Domain detection from disagreement between the student and a shallow head.

A linear head sits on the static teacher's first module and is trained once
on source data. Online, the cross-entropy between the student's one-hot
prediction and the head's softmax is bin-averaged and discretized with a
hysteresis threshold ``z``; jumps larger than ``z`` are domain-shift events.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, TrainingError
from .model import ModularNet, features_upto, forward

log = logging.getLogger(__name__)

PROB_EPS = 1e-12


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AuxHead:
    weights: np.ndarray  # (C, d1)
    bias: np.ndarray  # (C,)

    def logits(self, static_teacher: ModularNet, x: np.ndarray) -> np.ndarray:
        return features_upto(static_teacher, x, 1) @ self.weights.T + self.bias

    def probs(self, static_teacher: ModularNet, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(static_teacher, x))


def train_head(
    x: np.ndarray,
    y: np.ndarray,
    static_teacher: ModularNet,
    epochs: int = 300,
    lr: float = 0.5,
    seed: int = 0,
    weight_decay: float = 0.0,
) -> AuxHead:
    """Full-batch gradient descent on head cross-entropy; the backbone is only read.

    ``weight_decay`` adds an L2 penalty on the head weights, which keeps its
    probabilities from saturating and bounds the per-sample signal.
    """
    feats = features_upto(static_teacher, x, 1)
    C = static_teacher.class_count
    rng = np.random.default_rng([seed, 0xAD])
    W = rng.normal(0.0, np.sqrt(1.0 / feats.shape[1]), size=(C, feats.shape[1]))
    b = np.zeros(C)
    onehot = np.eye(C)[y]
    n = len(y)
    for epoch in range(epochs):
        p = softmax(feats @ W.T + b)
        g = (p - onehot) / n
        W -= lr * (g.T @ feats + weight_decay * W)
        b -= lr * g.sum(axis=0)
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            loss = -np.mean(np.log(np.clip(p[np.arange(n), y], PROB_EPS, None)))
            raise TrainingError(f"aux head diverged at epoch {epoch} (lr={lr}, last loss={loss})")
    return AuxHead(W, b)


def signal_from_probs(pred: np.ndarray, head_probs: np.ndarray) -> np.ndarray:
    """Per-sample ``-log g[pred]`` with the probability clamped at ``PROB_EPS``."""
    pred = np.atleast_1d(pred)
    head_probs = np.atleast_2d(head_probs)
    g = head_probs[np.arange(len(pred)), pred]
    if np.any(g < PROB_EPS):
        log.debug("clamped %d zero head probabilities", int(np.sum(g < PROB_EPS)))
    return -np.log(np.maximum(g, PROB_EPS))


def sample_signal(student: ModularNet, head: AuxHead, static_teacher: ModularNet, x: np.ndarray) -> float:
    """Disagreement signal ``H`` for one frame (batch mean for a batch)."""
    logits, _ = forward(student, np.atleast_2d(x))
    pred = np.argmax(logits, axis=1)
    return float(np.mean(signal_from_probs(pred, head.probs(static_teacher, x))))


def bin_average(contents: list[float], m: int) -> float | None:
    """Mean of a full bin, ``None`` while fewer than ``m`` samples are in."""
    if m < 1:
        raise ContractViolation(f"bin size must be >= 1, got {m}")
    if len(contents) < m:
        return None
    return sum(contents[:m]) / m


def discretize(b_prev: float | None, a: float, z: float) -> tuple[float, float | None]:
    """Hysteresis step: returns the new level and the signed shift, if any."""
    if z <= 0:
        raise ContractViolation(f"threshold z must be > 0, got {z}")
    if b_prev is None:
        return a, None
    if abs(b_prev - a) > z:
        return a, a - b_prev
    return b_prev, None


@dataclass(frozen=True)
class ShiftEvent:
    bin_index: int
    level: float
    delta: float


@dataclass
class DomainDetector:
    """Sequential bin / discretize state machine over the ``H`` stream."""

    m: int
    z: float
    b_source: float
    b_hard: float
    bin: list[float] = field(default_factory=list)
    level: float | None = None
    a_history: list[float] = field(default_factory=list)
    b_history: list[float] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ContractViolation(f"bin size must be >= 1, got {self.m}")
        if self.z <= 0:
            raise ContractViolation(f"threshold z must be > 0, got {self.z}")
        if not self.b_hard > self.b_source:
            raise ContractViolation(f"B_hard ({self.b_hard}) must exceed B_source ({self.b_source})")

    def push(self, h: float) -> ShiftEvent | None:
        """Feed one signal sample; returns an event when a full bin shifts the level."""
        self.bin.append(float(h))
        a = bin_average(self.bin, self.m)
        if a is None:
            return None
        self.bin.clear()
        i = len(self.a_history)
        self.level, delta = discretize(self.level, a, self.z)
        self.a_history.append(a)
        self.b_history.append(self.level)
        self.trace.append({"bin": i, "A": a, "B": self.level, "event": delta is not None, "dB": delta or 0.0})
        return None if delta is None else ShiftEvent(i, self.level, delta)


def calibrate_levels(
    student: ModularNet,
    head: AuxHead,
    static_teacher: ModularNet,
    source_x: np.ndarray,
    hard_x: np.ndarray | None = None,
    hard_factor: float = 4.0,
    policy: str = "factor",
) -> tuple[float, float]:
    """Signal levels near the source and far from it.

    ``B_source`` is the mean signal on a source holdout. ``B_hard`` comes from
    ``hard_x`` when given; otherwise ``policy="factor"`` uses
    ``hard_factor * B_source`` and ``policy="uniform"`` uses ``ln C``, the
    signal of a head that carries no information about the class.
    """
    if len(source_x) == 0:
        raise ContractViolation("empty source holdout")
    b_source = sample_signal(student, head, static_teacher, source_x)
    if hard_x is not None and len(hard_x):
        b_hard = sample_signal(student, head, static_teacher, hard_x)
    elif policy == "uniform":
        b_hard = float(np.log(student.class_count))
    elif policy == "factor":
        b_hard = hard_factor * b_source
    else:
        raise ContractViolation(f"unknown B_hard policy {policy!r}")
    if not b_hard > b_source:
        raise ContractViolation(f"B_hard ({b_hard}) must exceed B_source ({b_source})")
    return b_source, b_hard
