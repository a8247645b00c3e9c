"""Four-module feed-forward classifier with hand-written backprop.

The network is ``f = m4 . m3 . m2 . m1`` where every module is an affine map
followed by ``tanh`` (identity on the last module, which emits logits).
Training a suffix of ``k`` modules leaves the ``4 - k`` leading modules
untouched, which is what the modular-training actions operate on.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation

NUM_MODULES = 4
CHECKPOINT_FORMAT = "hamlet-modularnet"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("tanh", "identity")


@dataclass
class AffineModule:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ContractViolation(
                f"bad module shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ContractViolation("module parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class ModularNet:
    modules: list[AffineModule]

    def __post_init__(self) -> None:
        if len(self.modules) != NUM_MODULES:
            raise ContractViolation(f"expected {NUM_MODULES} modules, got {len(self.modules)}")
        for a, b in zip(self.modules, self.modules[1:]):
            if a.out_dim != b.in_dim:
                raise ContractViolation(
                    f"module dims do not chain: {a.out_dim} -> {b.in_dim}"
                )
        if self.modules[-1].activation != "identity":
            raise ContractViolation("last module must use the identity activation")

    @property
    def input_dim(self) -> int:
        return self.modules[0].in_dim

    @property
    def class_count(self) -> int:
        return self.modules[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [m.out_dim for m in self.modules]

    def copy(self) -> "ModularNet":
        return copy.deepcopy(self)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for m in self.modules:
            out.extend([m.weights, m.bias])
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def checksum(self) -> str:
        return hashlib.sha256(self.flat().tobytes()).hexdigest()

    def same_architecture(self, other: "ModularNet") -> bool:
        return self.dims == other.dims and all(
            a.activation == b.activation for a, b in zip(self.modules, other.modules)
        )

    def equals(self, other: "ModularNet") -> bool:
        return self.same_architecture(other) and all(
            np.array_equal(a, b) for a, b in zip(self.parameters(), other.parameters())
        )


def build_net(dims: Sequence[int], rng: np.random.Generator) -> ModularNet:
    """Random net with Xavier-style init; ``dims`` lists 5 sizes from input to classes."""
    dims = list(dims)
    if len(dims) != NUM_MODULES + 1:
        raise ContractViolation(f"need {NUM_MODULES + 1} dims, got {dims}")
    modules = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        scale = np.sqrt(1.0 / d_in)
        act = "identity" if i == NUM_MODULES - 1 else "tanh"
        modules.append(
            AffineModule(rng.normal(0.0, scale, size=(d_out, d_in)), np.zeros(d_out), act)
        )
    return ModularNet(modules)


def zeros_like_net(net: ModularNet) -> ModularNet:
    return ModularNet(
        [AffineModule(np.zeros_like(m.weights), np.zeros_like(m.bias), m.activation) for m in net.modules]
    )


@dataclass
class Features:
    """Activations cached by :func:`forward`.

    ``inputs[i]`` is the input to module ``i`` and ``outputs[i]`` its
    post-activation output, both as 2-D batches.
    """

    inputs: list[np.ndarray]
    outputs: list[np.ndarray]

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(z) if activation == "tanh" else z


def forward(net: ModularNet, x: np.ndarray) -> tuple[np.ndarray, Features]:
    """Run ``x`` (a vector or a batch of rows) through all four modules."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.ndim != 2 or h.shape[1] != net.input_dim:
        raise ContractViolation(f"input shape {x.shape} does not match input_dim {net.input_dim}")
    if not np.all(np.isfinite(h)):
        raise ContractViolation("input contains non-finite values")
    inputs, outputs = [], []
    for m in net.modules:
        inputs.append(h)
        h = _activate(h @ m.weights.T + m.bias, m.activation)
        outputs.append(h)
    logits = h[0] if single else h
    return logits, Features(inputs, outputs)


def features_upto(net: ModularNet, x: np.ndarray, n_modules: int = 1) -> np.ndarray:
    """Output of the first ``n_modules`` modules (the encoder prefix)."""
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    for m in net.modules[:n_modules]:
        h = _activate(h @ m.weights.T + m.bias, m.activation)
    return h


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    bias: list[np.ndarray]
    trained_suffix: int

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.bias, other.bias)],
            max(self.trained_suffix, other.trained_suffix),
        )

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(
            [factor * w for w in self.weights], [factor * b for b in self.bias], self.trained_suffix
        )

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.bias):
            parts.extend([w.ravel(), b.ravel()])
        return np.concatenate(parts)


def backward_suffix(
    net: ModularNet,
    cache: Features,
    loss_grad: np.ndarray,
    k: int,
    extra_grads: dict[int, np.ndarray] | None = None,
) -> GradientSet:
    """Backpropagate ``loss_grad`` (d loss / d logits) through the last ``k`` modules.

    ``extra_grads`` maps a module index to an additional gradient with respect
    to that module's output; it is how feature-space losses enter. Modules
    outside the trained suffix receive exactly-zero gradients and the walk
    stops at the suffix boundary, so a frozen prefix costs nothing.
    """
    if not 1 <= k <= NUM_MODULES:
        raise ContractViolation(f"suffix length must be in 1..{NUM_MODULES}, got {k}")
    g = np.atleast_2d(np.asarray(loss_grad, dtype=np.float64))
    n = cache.batch_size
    if g.shape != (n, net.class_count):
        raise ContractViolation(f"loss_grad shape {g.shape} != ({n}, {net.class_count})")
    for i, m in enumerate(net.modules):
        if cache.inputs[i].shape != (n, m.in_dim) or cache.outputs[i].shape != (n, m.out_dim):
            raise ContractViolation(f"stale cache: module {i} activation shapes do not match the net")
    extra_grads = extra_grads or {}

    dW = [np.zeros_like(m.weights) for m in net.modules]
    db = [np.zeros_like(m.bias) for m in net.modules]
    first = NUM_MODULES - k
    for i in range(NUM_MODULES - 1, first - 1, -1):
        m = net.modules[i]
        if i in extra_grads:
            g = g + extra_grads[i]
        if m.activation == "tanh":
            g = g * (1.0 - cache.outputs[i] ** 2)
        dW[i] = g.T @ cache.inputs[i]
        db[i] = g.sum(axis=0)
        if i > first:
            g = g @ m.weights
    return GradientSet(dW, db, k)


def sgd_step(net: ModularNet, grads: GradientSet, lr: float) -> ModularNet:
    """Return a new net with ``theta - lr * g`` applied to the trained suffix only."""
    if lr < 0:
        raise ContractViolation(f"learning rate must be >= 0, got {lr}")
    out = net.copy()
    first = NUM_MODULES - grads.trained_suffix
    for i in range(first, NUM_MODULES):
        m = out.modules[i]
        m.weights = m.weights - lr * grads.weights[i]
        m.bias = m.bias - lr * grads.bias[i]
    return out


def ema_blend(teacher: ModularNet, student: ModularNet, momentum: float) -> ModularNet:
    """``p_t <- mu * p_t + (1 - mu) * p_s`` for every parameter."""
    if not teacher.same_architecture(student):
        raise ContractViolation("teacher and student architectures differ")
    if not 0.0 <= momentum <= 1.0:
        raise ContractViolation(f"EMA momentum must be in [0, 1], got {momentum}")
    out = teacher.copy()
    for mt, ms in zip(out.modules, student.modules):
        mt.weights = momentum * mt.weights + (1.0 - momentum) * ms.weights
        mt.bias = momentum * mt.bias + (1.0 - momentum) * ms.bias
    return out


def module_fwd_flops(dims: Sequence[int], batch: int = 1) -> list[int]:
    """Multiply-add count ``2 * in * out * batch`` per module."""
    return [2 * a * b * batch for a, b in zip(dims, dims[1:])]


def flops_of(dims: Sequence[int], k: int, batch: int = 1) -> tuple[int, int]:
    """Forward and backward FLOPs of one training pass on a suffix of ``k`` modules.

    Forward always covers the whole net; backward is twice the forward cost
    of the trained modules. ``k = 0`` means inference only.
    """
    if not 0 <= k <= NUM_MODULES:
        raise ContractViolation(f"suffix length must be in 0..{NUM_MODULES}, got {k}")
    per_module = module_fwd_flops(dims, batch)
    fwd = sum(per_module)
    bwd = 2 * sum(per_module[NUM_MODULES - k :]) if k else 0
    return fwd, bwd


# -- checkpoints ---------------------------------------------------------------


def net_to_dict(net: ModularNet) -> dict:
    return {
        "dims": net.dims,
        "modules": [
            {
                "in": m.in_dim,
                "out": m.out_dim,
                "activation": m.activation,
                "weights": m.weights.ravel().tolist(),
                "bias": m.bias.tolist(),
            }
            for m in net.modules
        ],
    }


def net_from_dict(data: dict) -> ModularNet:
    modules = []
    for rec in data["modules"]:
        w = np.asarray(rec["weights"], dtype=np.float64).reshape(rec["out"], rec["in"])
        modules.append(AffineModule(w, np.asarray(rec["bias"], dtype=np.float64), rec["activation"]))
    net = ModularNet(modules)
    if "dims" in data and list(data["dims"]) != net.dims:
        raise ContractViolation(f"checkpoint dims {data['dims']} disagree with module records")
    return net


def save_net(net: ModularNet, path: str | Path) -> None:
    """Write a JSON checkpoint: versioned header, dims, row-major parameter arrays."""
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **net_to_dict(net)}
    Path(path).write_text(json.dumps(payload))


def load_net(path: str | Path) -> ModularNet:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractViolation(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {payload.get('version')}")
    return net_from_dict(payload)
