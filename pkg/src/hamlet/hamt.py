"""Hardware-aware modular training agent.

Actions ``T1..T4`` train suffixes of length 4, 3, 2, 1. The agent keeps a
value per action, rewards it with the negated second difference of the EMA
teacher's pseudo-loss, and scales rewards and punishments by a softmax over
inverse action costs so that expensive actions are favoured less.
"""

from __future__ import annotations

import math
import statistics
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CalibrationError, ContractViolation
from .model import NUM_MODULES, ModularNet, backward_suffix, flops_of, forward

K = NUM_MODULES
ACTIONS = ("T1", "T2", "T3", "T4")


def suffix_len(action: int) -> int:
    """Suffix length trained by 0-based action index (T1 -> 4, ..., T4 -> 1)."""
    if not 0 <= action < K:
        raise ContractViolation(f"invalid action index {action}")
    return K - action


def reward(loss_history: Sequence[float]) -> float:
    """``-(l_t - 2 l_{t-1} + l_{t-2})`` over the last three losses, 0 during warm-up."""
    if any(not math.isfinite(v) for v in loss_history):
        raise ContractViolation("pseudo-loss history contains non-finite values")
    if len(loss_history) < 3:
        return 0.0
    l2, l1, l0 = loss_history[-3:]
    return -(l0 - 2.0 * l1 + l2)


def conditioning(omega: Sequence[float], beta: float) -> np.ndarray:
    """Softmax of ``1 / (beta * omega)``; cheaper actions get more weight."""
    if beta <= 0:
        raise ContractViolation(f"softmax temperature must be > 0, got {beta}")
    omega = np.asarray(omega, dtype=np.float64)
    if np.any(omega <= 0) or not np.all(np.isfinite(omega)):
        raise ContractViolation("action costs must be finite and strictly positive")
    logits = 1.0 / (beta * omega)
    e = np.exp(logits - logits.max())
    return e / e.sum()


def select(values: Sequence[float]) -> int:
    """Greedy argmax; ties go to the cheapest (highest-index) action."""
    v = np.asarray(values, dtype=np.float64)
    return int(len(v) - 1 - np.argmax(v[::-1]))


def update_value(v_j: float, gamma_j: float, alpha: float, r: float) -> float:
    if r >= 0:
        return gamma_j * alpha * r + (1.0 - alpha) * v_j
    return (1.0 - gamma_j) * alpha * r + (1.0 - alpha) * v_j


def calibrate(
    net: ModularNet,
    sample_batch: np.ndarray,
    reps: int = 5,
    mode: str = "flops",
    timer: Callable[[], float] = time.perf_counter,
) -> np.ndarray:
    """Per-action cost of one forward + backward pass on ``sample_batch``.

    ``mode="flops"`` is exact and deterministic. ``mode="wallclock"`` takes the
    median over ``reps`` timed passes.
    """
    if reps < 1:
        raise ContractViolation(f"reps must be >= 1, got {reps}")
    batch = np.atleast_2d(sample_batch)
    if mode == "flops":
        return np.array([float(sum(flops_of(net.dims, suffix_len(j), len(batch)))) for j in range(K)])
    if mode != "wallclock":
        raise ContractViolation(f"unknown cost mode {mode!r}")
    grad = np.ones((len(batch), net.class_count)) / len(batch)
    omega = np.empty(K)
    for j in range(K):
        samples = []
        for _ in range(reps):
            t0 = timer()
            _, cache = forward(net, batch)
            backward_suffix(net, cache, grad, suffix_len(j))
            samples.append(timer() - t0)
        omega[j] = statistics.median(samples)
    if np.any(omega <= 0):
        raise CalibrationError(
            "timer resolution too coarse for wall-clock calibration; use cost mode 'flops'"
        )
    return omega


@dataclass
class AgentState:
    values: np.ndarray
    omega: np.ndarray
    gamma: np.ndarray
    alpha: float
    beta: float
    loss_history: deque = field(default_factory=lambda: deque(maxlen=3))

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ContractViolation(f"alpha must be in (0, 1], got {self.alpha}")


class HAMTAgent:
    """Greedy cost-conditioned suffix selector.

    ``omega`` is divided by ``cost_unit`` before conditioning (defaults to the
    cost of ``T1``), which keeps ``beta`` meaningful whatever unit the costs
    were measured in.
    """

    def __init__(
        self,
        omega: Sequence[float],
        alpha: float = 0.1,
        beta: float = 1.75,
        cost_unit: float | None = None,
        decay_unselected: bool = False,
    ):
        omega = np.asarray(omega, dtype=np.float64)
        if omega.shape != (K,):
            raise ContractViolation(f"need {K} action costs, got {omega.shape}")
        unit = float(omega[0]) if cost_unit is None else float(cost_unit)
        self.state = AgentState(
            values=np.zeros(K),
            omega=omega,
            gamma=conditioning(omega / unit, beta),
            alpha=alpha,
            beta=beta,
        )
        self.last_action: int | None = None
        # literal rule touches only V[j]; the alternative also decays the rest by (1 - alpha)
        self.decay_unselected = decay_unselected

    def select(self) -> int:
        self.last_action = select(self.state.values)
        return self.last_action

    def observe(self, pseudo_loss: float, action: int | None = None) -> float:
        """Record ``l_t`` after training with ``action``; returns the reward used."""
        j = self.last_action if action is None else action
        if j is None:
            raise ContractViolation("observe() called before any action was selected")
        st = self.state
        st.loss_history.append(float(pseudo_loss))
        r = reward(list(st.loss_history))
        if self.decay_unselected:
            keep = st.values[j]
            st.values *= 1.0 - st.alpha
            st.values[j] = keep
        st.values[j] = update_value(st.values[j], st.gamma[j], st.alpha, r)
        return r
