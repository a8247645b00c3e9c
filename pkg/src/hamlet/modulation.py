"""Least-training gate, adaptation budgets and the adaptive learning rate.

All interpolators map the detector level ``B`` linearly from
``[B_source, B_hard]`` onto a ``[min, max]`` range.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

from .errors import ContractViolation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModulationConfig:
    z: float
    b_source: float
    b_hard: float
    k_l_min: float = 20.0
    k_l_max: float = 100.0
    k_eta_min: float = 0.01
    k_eta_max: float = 0.1
    k_cm_min: float = 0.2
    k_cm_max: float = 0.6

    def __post_init__(self) -> None:
        if self.z <= 0:
            raise ContractViolation(f"z must be > 0, got {self.z}")
        if self.b_hard == self.b_source:
            raise ContractViolation("B_hard equals B_source; interpolation is undefined")
        for lo, hi, name in (
            (self.k_l_min, self.k_l_max, "K_l"),
            (self.k_eta_min, self.k_eta_max, "K_eta"),
            (self.k_cm_min, self.k_cm_max, "K_CM"),
        ):
            if lo > hi:
                raise ContractViolation(f"{name} min {lo} exceeds max {hi}")
        if not (0.0 <= self.k_cm_min <= 1.0 and 0.0 <= self.k_cm_max <= 1.0):
            raise ContractViolation("K_CM bounds must lie in [0, 1]")


def _position(b: float, cfg: ModulationConfig) -> float:
    t = (b - cfg.b_source) / (cfg.b_hard - cfg.b_source)
    if t < 0.0 or t > 1.0:
        log.debug("level %.4g outside [B_source, B_hard]; clamping", b)
    return min(max(t, 0.0), 1.0)


def interpolate(b: float, lo: float, hi: float, cfg: ModulationConfig) -> float:
    t = _position(b, cfg)
    if t == 1.0:
        return hi
    return lo + t * (hi - lo)


def peak_lr(b: float, cfg: ModulationConfig) -> float:
    return interpolate(b, cfg.k_eta_min, cfg.k_eta_max, cfg)


def classmix_ratio(b: float, cfg: ModulationConfig) -> float:
    return interpolate(b, cfg.k_cm_min, cfg.k_cm_max, cfg)


def iteration_factor(delta_b: float, b: float, cfg: ModulationConfig) -> float:
    """``K_l``: the max when moving away from source, interpolated when moving back."""
    if delta_b >= 0:
        return cfg.k_l_max
    return interpolate(b, cfg.k_l_min, cfg.k_l_max, cfg)


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def budget(delta_b: float, b: float, cfg: ModulationConfig, k_l: float | None = None) -> int:
    """Optimization steps granted for a shift of ``delta_b`` landing at level ``b``.

    ``k_l`` overrides the adaptive factor (used when the adaptive schedule is off).
    """
    if abs(delta_b) <= cfg.z:
        raise ContractViolation(f"|dB|={abs(delta_b)} does not exceed z={cfg.z}")
    factor = iteration_factor(delta_b, b, cfg) if k_l is None else k_l
    return max(1, round_half_up(factor * abs(delta_b) / cfg.z))


@dataclass(frozen=True)
class ModulationPlan:
    remaining: int = 0
    total: int = 0
    eta_peak: float = 0.0
    k_cm: float = 0.0
    eta_current: float = 0.0

    @property
    def active(self) -> bool:
        return self.remaining > 0


def gate(plan: ModulationPlan, event: object | None) -> bool:
    """True (train) iff a plan is running or a new shift just arrived."""
    return plan.active or event is not None


def accumulate(
    plan: ModulationPlan,
    steps: int,
    eta_peak: float,
    k_cm: float,
) -> ModulationPlan:
    """Add ``steps`` to whatever remains and restart the decay from ``eta_peak``."""
    total = plan.remaining + steps
    return ModulationPlan(remaining=total, total=total, eta_peak=eta_peak, k_cm=k_cm, eta_current=eta_peak)


def step_lr(plan: ModulationPlan, floor: float = 0.0) -> tuple[float, ModulationPlan]:
    """Learning rate for the next step and the plan after consuming it.

    ``eta = floor + (eta_peak - floor) * remaining / total``, so a 4-step plan
    at 0.1 yields 0.1, 0.075, 0.05, 0.025. Written as a decrement from the
    peak so the first step is exactly ``eta_peak``.
    """
    if not plan.active:
        raise ContractViolation("cannot step an idle plan")

    def at(remaining: int) -> float:
        return plan.eta_peak - (plan.eta_peak - floor) * (plan.total - remaining) / plan.total

    eta = at(plan.remaining)
    remaining = plan.remaining - 1
    nxt_eta = at(remaining) if remaining else 0.0
    return eta, replace(plan, remaining=remaining, eta_current=nxt_eta)
