"""Online self-training: student, EMA teacher and static teacher.

One adaptation step builds a batch of recent target frames labeled by the
EMA teacher, injects replayed source samples of a subset of classes (the
low-dimensional stand-in for ClassMix), adds a supervised source loss and a
feature-distance penalty against the static teacher's first module, then
updates the trained suffix of the student and blends it into the teacher.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import AuxHead, PROB_EPS, softmax, train_head
from .errors import ContractViolation, TrainingError
from .model import (
    NUM_MODULES,
    ModularNet,
    backward_suffix,
    build_net,
    ema_blend,
    features_upto,
    forward,
    module_fwd_flops,
    net_from_dict,
    net_to_dict,
    sgd_step,
)
from .stream import SourceDataset

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hamlet-triplet"
CHECKPOINT_VERSION = 1


@dataclass
class Triplet:
    student: ModularNet
    teacher: ModularNet
    static_teacher: ModularNet
    momentum: float = 0.999

    def __post_init__(self) -> None:
        if not (
            self.student.same_architecture(self.teacher)
            and self.student.same_architecture(self.static_teacher)
        ):
            raise ContractViolation("triplet networks must share one architecture")

    def copy(self) -> "Triplet":
        return Triplet(self.student.copy(), self.teacher.copy(), self.static_teacher.copy(), self.momentum)


# -- replay buffer -------------------------------------------------------------


def rcs_probabilities(frequencies: np.ndarray, temperature: float) -> np.ndarray:
    """Class draw probabilities ``softmax((1 - f) / T)``; rare classes dominate as T shrinks."""
    if temperature <= 0:
        raise ContractViolation(f"RCS temperature must be > 0, got {temperature}")
    logits = (1.0 - np.asarray(frequencies, dtype=np.float64)) / temperature
    e = np.exp(logits - logits.max())
    return e / e.sum()


@dataclass
class ReplayBuffer:
    x: np.ndarray
    y: np.ndarray
    class_count: int
    temperature: float = 0.2

    def __post_init__(self) -> None:
        if len(self.y) == 0:
            raise ContractViolation("replay buffer must be nonempty")
        self._buckets = [np.flatnonzero(self.y == c) for c in range(self.class_count)]

    @classmethod
    def from_source(cls, source: SourceDataset, size: int, seed: int, temperature: float = 0.2) -> "ReplayBuffer":
        """Keep ``size`` source samples, always including one of every class."""
        rng = np.random.default_rng([seed, 0xB0])
        n = len(source)
        size = min(size, n)
        firsts = [int(np.flatnonzero(source.y == c)[0]) for c in range(source.class_count)]
        rest = np.setdiff1d(np.arange(n), firsts)
        idx = np.concatenate([firsts, rng.choice(rest, size=size - len(firsts), replace=False)])
        idx.sort()
        return cls(source.x[idx].copy(), source.y[idx].copy(), source.class_count, temperature)

    @property
    def frequencies(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.class_count) / len(self.y)

    def class_probabilities(self, rcs: bool = True) -> np.ndarray:
        if rcs:
            return rcs_probabilities(self.frequencies, self.temperature)
        return self.frequencies

    def sample_class(self, c: int, n: int, rng: np.random.Generator) -> np.ndarray:
        bucket = self._buckets[c]
        return bucket[rng.integers(0, len(bucket), size=n)]

    def sample(self, n: int, rng: np.random.Generator, rcs: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """``n`` labeled samples: class first (RCS priors), then uniform within class.

        Without RCS the draw is uniform over the buffer.
        """
        if n < 1:
            raise ContractViolation(f"sample size must be >= 1, got {n}")
        if not rcs:
            idx = rng.integers(0, len(self.y), size=n)
            return self.x[idx], self.y[idx]
        p = self.class_probabilities(True)
        classes = rng.choice(self.class_count, size=n, p=p)
        idx = np.empty(n, dtype=np.int64)
        for i, c in enumerate(classes):
            while len(self._buckets[c]) == 0:
                log.warning("empty bucket for class %d; redrawing", c)
                c = rng.choice(self.class_count, p=p)
            idx[i] = self.sample_class(c, 1, rng)[0]
        return self.x[idx], self.y[idx]


def rcs_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return buffer.sample(n, rng, rcs=True)


# -- batches and losses --------------------------------------------------------


@dataclass
class MixedBatch:
    x: np.ndarray
    y: np.ndarray
    is_source: np.ndarray
    weights: np.ndarray
    source_classes: list[int]


def pseudo_label(teacher: ModularNet, target_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Teacher argmax labels and their probabilities."""
    logits, _ = forward(teacher, np.atleast_2d(target_x))
    p = softmax(logits)
    labels = np.argmax(logits, axis=1)
    return labels, p[np.arange(len(labels)), labels]


def build_mixed_batch(
    target_x: np.ndarray,
    pseudo_labels: np.ndarray,
    buffer: ReplayBuffer,
    k_cm: float,
    rng: np.random.Generator,
    per_class: int | None = None,
    target_weights: np.ndarray | None = None,
) -> MixedBatch:
    """Target rows with pseudo-labels interleaved with source rows of ``ceil(k_cm * C)`` classes."""
    if not 0.0 <= k_cm <= 1.0:
        raise ContractViolation(f"K_CM must be in [0, 1], got {k_cm}")
    target_x = np.atleast_2d(target_x)
    n_t = len(target_x)
    C = buffer.class_count
    n_cls = math.ceil(k_cm * C - 1e-12)
    chosen = sorted(int(c) for c in rng.choice(C, size=n_cls, replace=False)) if n_cls else []
    per_class = per_class or max(1, n_t // C)
    tw = np.ones(n_t) if target_weights is None else np.asarray(target_weights, dtype=np.float64)
    if not chosen:
        return MixedBatch(target_x, np.asarray(pseudo_labels), np.zeros(n_t, bool), tw, [])
    src_idx = np.concatenate([buffer.sample_class(c, per_class, rng) for c in chosen])
    n_s = len(src_idx)
    # interleave: positions for source rows spread evenly over the batch
    order = np.argsort(np.concatenate([np.arange(n_t) * (n_s + 1), np.arange(n_s) * (n_t + 1) + n_t / 2]), kind="stable")
    x = np.concatenate([target_x, buffer.x[src_idx]])[order]
    y = np.concatenate([pseudo_labels, buffer.y[src_idx]])[order]
    is_src = np.concatenate([np.zeros(n_t, bool), np.ones(n_s, bool)])[order]
    w = np.concatenate([tw, np.ones(n_s)])[order]
    return MixedBatch(x, y, is_src, w, chosen)


@dataclass
class LossReport:
    source: float
    target: float
    feature_distance: float
    lambda_fd: float
    total: float

    def as_dict(self) -> dict:
        return {"L_S": self.source, "L_T": self.target, "L_FD": self.feature_distance, "lambda_FD": self.lambda_fd, "total": self.total}


def cross_entropy(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Weighted mean cross-entropy and its gradient with respect to the logits."""
    n = len(labels)
    w = np.ones(n) if weights is None else weights
    denom = max(float(w.sum()), 1e-12)
    p = softmax(logits)
    loss = float(-(w * np.log(np.maximum(p[np.arange(n), labels], PROB_EPS))).sum() / denom)
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return loss, g * (w / denom)[:, None]


def losses(
    triplet: Triplet,
    mixed: MixedBatch,
    source_x: np.ndarray,
    source_y: np.ndarray,
    lambda_fd: float,
    suffix: int | None = None,
):
    """Objective ``L_S + L_T + lambda_FD * L_FD`` on the student.

    Returns the report, and when ``suffix`` is given also the gradient set for
    that suffix length and the student forward FLOPs spent.
    """
    if len(mixed.y) == 0 or len(source_y) == 0:
        raise ContractViolation("batches must be nonempty")
    student = triplet.student
    logits_t, cache_t = forward(student, mixed.x)
    l_t, g_t = cross_entropy(logits_t, mixed.y, mixed.weights)
    logits_s, cache_s = forward(student, source_x)
    l_s, g_s = cross_entropy(logits_s, source_y)
    f_static = features_upto(triplet.static_teacher, source_x, 1)
    diff = cache_s.outputs[0] - f_static
    l_fd = float(np.mean(np.sum(diff**2, axis=1)))
    report = LossReport(l_s, l_t, l_fd, lambda_fd, l_s + l_t + lambda_fd * l_fd)
    for name, val in (("L_S", l_s), ("L_T", l_t), ("L_FD", l_fd)):
        if not math.isfinite(val):
            raise TrainingError(f"non-finite {name} loss")
    if suffix is None:
        return report
    fd_grad = lambda_fd * 2.0 * diff / len(source_y)
    grads = backward_suffix(student, cache_t, g_t, suffix) + backward_suffix(
        student, cache_s, g_s, suffix, extra_grads={0: fd_grad}
    )
    return report, grads


@dataclass
class StepCost:
    fwd: int = 0
    bwd: int = 0


@dataclass
class TrainerConfig:
    lambda_fd: float = 0.1
    source_batch: int = 16
    per_class: int | None = None
    confidence: float | None = None  # pseudo-label threshold tau; None disables


def adapt_step(
    triplet: Triplet,
    action: int,
    eta: float,
    target_x: np.ndarray,
    buffer: ReplayBuffer,
    k_cm: float,
    rng: np.random.Generator,
    cfg: TrainerConfig = TrainerConfig(),
    rcs: bool = True,
) -> tuple[Triplet, LossReport, float, StepCost]:
    """One student update on suffix ``4 - action`` and one EMA blend.

    Returns the new triplet, the loss report, the teacher pseudo-loss
    ``l_t`` on the target rows and the FLOPs this step consumed.
    """
    if eta < 0:
        raise ContractViolation(f"learning rate must be >= 0, got {eta}")
    if not 0 <= action < NUM_MODULES:
        raise ContractViolation(f"invalid action index {action}")
    k = NUM_MODULES - action
    target_x = np.atleast_2d(target_x)
    labels, conf = pseudo_label(triplet.teacher, target_x)
    pseudo_loss = float(np.mean(-np.log(np.maximum(conf, PROB_EPS))))
    tw = None if cfg.confidence is None else (conf >= cfg.confidence).astype(np.float64)
    src_x, src_y = buffer.sample(cfg.source_batch, rng, rcs=rcs)
    mixed = build_mixed_batch(target_x, labels, buffer, k_cm, rng, cfg.per_class, tw)
    report, grads = losses(triplet, mixed, src_x, src_y, cfg.lambda_fd, suffix=k)
    student = sgd_step(triplet.student, grads, eta)
    teacher = ema_blend(triplet.teacher, student, triplet.momentum)
    dims = triplet.student.dims
    per_module = module_fwd_flops(dims, 1)
    full = sum(per_module)
    n_student = len(mixed.y) + len(src_y)
    cost = StepCost(
        fwd=full * len(target_x) + full * n_student + per_module[0] * len(src_y),
        bwd=2 * sum(per_module[NUM_MODULES - k :]) * n_student,
    )
    return Triplet(student, teacher, triplet.static_teacher, triplet.momentum), report, pseudo_loss, cost


# -- source pretraining --------------------------------------------------------


def train_supervised(
    net: ModularNet,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 32,
) -> ModularNet:
    n = len(y)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            logits, cache = forward(net, x[idx])
            loss, g = cross_entropy(logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"source pretraining diverged at epoch {epoch} (lr={lr})")
            net = sgd_step(net, backward_suffix(net, cache, g, NUM_MODULES), lr)
    return net


def pretrain_source(
    source: SourceDataset,
    dims: list[int],
    epochs: int = 30,
    lr: float = 0.1,
    seed: int = 0,
    momentum: float = 0.999,
    head_epochs: int = 300,
    head_weight_decay: float = 0.05,
) -> tuple[Triplet, AuxHead]:
    """Train one net on source, copy it three ways and fit the detector head."""
    if len(source) == 0:
        raise ContractViolation("source dataset is empty")
    rng = np.random.default_rng([seed, 0x9E])
    net = build_net(dims, rng)
    net = train_supervised(net, source.x, source.y, epochs, lr, rng)
    triplet = Triplet(net.copy(), net.copy(), net.copy(), momentum)
    head = train_head(source.x, source.y, triplet.static_teacher, epochs=head_epochs, seed=seed, weight_decay=head_weight_decay)
    return triplet, head


def accuracy(net: ModularNet, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = forward(net, x)
    return float(np.mean(np.argmax(np.atleast_2d(logits), axis=1) == y))


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path: str | Path, triplet: Triplet, head: AuxHead, buffer: ReplayBuffer | None = None, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "momentum": triplet.momentum,
        "student": net_to_dict(triplet.student),
        "teacher": net_to_dict(triplet.teacher),
        "static_teacher": net_to_dict(triplet.static_teacher),
        "head": {"weights": head.weights.tolist(), "bias": head.bias.tolist()},
        "extra": extra or {},
    }
    if buffer is not None:
        payload["buffer"] = {
            "x": buffer.x.tolist(),
            "y": buffer.y.tolist(),
            "class_count": buffer.class_count,
            "temperature": buffer.temperature,
        }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[Triplet, AuxHead, ReplayBuffer | None, dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ContractViolation(f"{path}: not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
    triplet = Triplet(
        net_from_dict(payload["student"]),
        net_from_dict(payload["teacher"]),
        net_from_dict(payload["static_teacher"]),
        payload["momentum"],
    )
    head = AuxHead(np.asarray(payload["head"]["weights"]), np.asarray(payload["head"]["bias"]))
    buffer = None
    if "buffer" in payload:
        b = payload["buffer"]
        buffer = ReplayBuffer(np.asarray(b["x"]), np.asarray(b["y"], dtype=np.int64), b["class_count"], b["temperature"])
    return triplet, head, buffer, payload.get("extra", {})
