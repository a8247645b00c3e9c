"""Deployment episodes: stream -> detector -> modulation -> HAMT -> trainer."""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

from .. import detector as det
from .. import hamt, modulation as mod
from ..model import forward, module_fwd_flops
from ..stream import (
    CorruptionParams,
    DomainProfile,
    Frame,
    SourceDataset,
    Stream,
    constant_profile,
    fast_storm_profile,
    holdout,
    make_source,
    storm_profile,
)
from ..trainer import AuxHead, ReplayBuffer, TrainerConfig, Triplet, accuracy, adapt_step, pretrain_source
from .config import ExperimentConfig
from .metrics import EpisodeMetrics, FlopCounter, VisitRecord, write_jsonl, write_metrics_csv

log = logging.getLogger(__name__)


def build_profile(cfg: ExperimentConfig) -> DomainProfile:
    s = cfg.stream
    if s.preset == "storm":
        return storm_profile(s.frames_per_domain, cfg.seed)
    if s.preset == "fast_storm":
        return fast_storm_profile(s.frames_per_domain, cfg.seed)
    if s.preset == "constant":
        return constant_profile(s.constant_intensity, s.frames_per_domain, cfg.seed)
    return DomainProfile([tuple(p) for p in s.schedule], cfg.seed)


def corruption_params(cfg: ExperimentConfig) -> CorruptionParams:
    s = cfg.stream
    return CorruptionParams(max_angle=math.radians(s.max_angle_deg), max_noise=s.max_noise, shift=s.shift)


@dataclass
class Pretrained:
    source: SourceDataset
    triplet: Triplet
    head: AuxHead


def _pretrain_key(cfg: ExperimentConfig) -> str:
    return json.dumps(
        {"seed": cfg.seed, "stream": [cfg.stream.classes, cfg.stream.source_size, cfg.stream.skew, cfg.stream.spread], "model": cfg.model.__dict__},
        sort_keys=True,
    )


@lru_cache(maxsize=16)
def _pretrain_cached(key: str) -> Pretrained:
    params = json.loads(key)
    classes, size, skew, spread = params["stream"]
    m = params["model"]
    source = make_source(classes, size, params["seed"], skew, spread)
    triplet, head = pretrain_source(
        source,
        m["dims"],
        m["pretrain_epochs"],
        m["pretrain_lr"],
        params["seed"],
        head_epochs=m["head_epochs"],
        head_weight_decay=m["head_weight_decay"],
    )
    return Pretrained(source, triplet, head)


def pretrain(cfg: ExperimentConfig) -> Pretrained:
    """Source pretraining, memoised per (seed, data, model) settings."""
    p = _pretrain_cached(_pretrain_key(cfg))
    triplet = p.triplet.copy()
    triplet.momentum = cfg.trainer.momentum
    return Pretrained(p.source, triplet, AuxHead(p.head.weights.copy(), p.head.bias.copy()))


@dataclass
class Calibration:
    omega: np.ndarray
    b_source: float
    b_hard: float
    z: float


def calibrate(cfg: ExperimentConfig, pre: Pretrained, profile: DomainProfile) -> Calibration:
    params = corruption_params(cfg)
    omega = hamt.calibrate(
        pre.triplet.student,
        pre.source.x[: cfg.trainer.target_window],
        cfg.hamt.calib_reps,
        cfg.hamt.cost_mode,
    )
    src_x, _ = holdout(
        DomainProfile([("clear", 0.0, 1)], cfg.seed + 10_000), pre.source, "clear", cfg.eval.holdout_size, params, cfg.stream.skew
    )
    hard_x = None
    if cfg.detector.hard_policy == "holdout":
        hard_x, _ = holdout(
            DomainProfile([("hard", 1.0, 1)], cfg.seed + 10_000), pre.source, "hard", cfg.eval.holdout_size, params, cfg.stream.skew
        )
    d = cfg.detector
    b_source, b_hard = det.calibrate_levels(
        pre.triplet.student, pre.head, pre.triplet.static_teacher, src_x, hard_x, d.hard_factor, d.hard_policy
    )
    if d.z is not None:
        z = d.z
    elif d.z_mode == "span":
        z = d.z_factor * (b_hard - b_source)
    else:
        z = d.z_factor * b_source
    return Calibration(omega, b_source, b_hard, z)


def modulation_config(cfg: ExperimentConfig, cal: Calibration) -> mod.ModulationConfig:
    mo = cfg.modulation
    lr = cfg.model.pretrain_lr
    return mod.ModulationConfig(
        z=cal.z,
        b_source=cal.b_source,
        b_hard=cal.b_hard,
        k_l_min=mo.k_l_min,
        k_l_max=mo.k_l_max,
        k_eta_min=mo.k_eta_min_frac * lr,
        k_eta_max=mo.k_eta_max_frac * lr,
        k_cm_min=mo.k_cm_min,
        k_cm_max=mo.k_cm_max,
    )


@dataclass
class EpisodeResult:
    metrics: EpisodeMetrics
    decisions: list[dict]
    modulation_trace: list[dict]
    detector_trace: list[dict]
    loss_trace: list[dict]
    calibration: Calibration
    agent_trace: list[dict] = field(default_factory=list)
    triplet: Triplet = field(repr=False, default=None)

    def write(self, out_dir: str | Path) -> Path:
        out = self.write_traces(out_dir)
        write_metrics_csv(self.metrics, out / "metrics.csv")
        summary = self.metrics.summary()
        summary["calibration"] = {
            "omega": self.calibration.omega.tolist(),
            "B_source": self.calibration.b_source,
            "B_hard": self.calibration.b_hard,
            "z": self.calibration.z,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return out

    def write_traces(self, out_dir: str | Path) -> Path:
        """Line-delimited traces only; safe to call on an aborted episode."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(self.decisions, out / "decisions.jsonl")
        write_jsonl(self.modulation_trace, out / "modulation.jsonl")
        write_jsonl(self.detector_trace, out / "detector.jsonl")
        write_jsonl(self.loss_trace, out / "losses.jsonl")
        write_jsonl(self.agent_trace, out / "agent.jsonl")
        write_jsonl(self.metrics.evaluations, out / "evaluations.jsonl")
        write_jsonl(self.metrics.events, out / "events.jsonl")
        return out


class _Evaluator:
    """Scores snapshots of the student on every domain's holdout set."""

    def __init__(self, cfg: ExperimentConfig, profile: DomainProfile, source: SourceDataset):
        params = corruption_params(cfg)
        self.sets = {
            d: holdout(profile, source, d, cfg.eval.holdout_size, params, cfg.stream.skew) for d in profile.domains
        }

    def __call__(self, student) -> dict[str, float]:
        snapshot = student.copy()
        return {d: 100.0 * accuracy(snapshot, x, y) for d, (x, y) in self.sets.items()}


def run_episode(
    cfg: ExperimentConfig,
    pre: Pretrained | None = None,
    profile: DomainProfile | None = None,
    frames: Iterable[Frame] | None = None,
    partial_dir: str | Path | None = None,
) -> EpisodeResult:
    """Deploy the pretrained triplet on the configured stream.

    Deterministic given ``cfg``; evaluation only reads snapshot copies so
    toggling it leaves every adaptation decision unchanged. ``frames``
    replaces the generated stream (it must follow ``profile``). If the loop
    fails, traces gathered so far are written to ``partial_dir`` before the
    error propagates.
    """
    cfg.validate()
    tg = cfg.toggles
    profile = profile or build_profile(cfg)
    pre = pre or pretrain(cfg)
    triplet = pre.triplet
    head = pre.head
    cal = calibrate(cfg, pre, profile)
    mcfg = modulation_config(cfg, cal)
    tcfg = TrainerConfig(
        lambda_fd=cfg.trainer.lambda_fd,
        source_batch=cfg.trainer.source_batch,
        confidence=cfg.trainer.confidence,
    )
    buffer = ReplayBuffer.from_source(pre.source, cfg.trainer.buffer_size, cfg.seed, cfg.trainer.rcs_temperature)
    agent = hamt.HAMTAgent(cal.omega, cfg.hamt.alpha, cfg.hamt.beta, decay_unselected=cfg.hamt.decay_unselected)
    detector = det.DomainDetector(cfg.detector.m, cal.z, cal.b_source, cal.b_hard)
    use_detector = tg.adapt and (tg.lt or tg.alr or tg.dcm)
    rng = np.random.default_rng([cfg.seed, 0x7A])

    dims = triplet.student.dims
    per_module = module_fwd_flops(dims, 1)
    infer_cost = sum(per_module)
    detect_cost = per_module[0] + 2 * dims[1] * dims[-1]

    evaluator = _Evaluator(cfg, profile, pre.source) if cfg.eval.enabled else None
    directions = profile.directions()
    starts = profile.boundaries()
    visits = [
        VisitRecord(d, directions[p], s, starts[p], n, float("nan")) for p, (d, s, n) in enumerate(profile.schedule)
    ]
    visit_evals: list[list[float]] = [[] for _ in visits]
    evaluations: list[dict] = []
    source_domains = [d for d, s in profile.domains.items() if s == 0.0]
    clear_x, clear_y = None, None
    if evaluator is not None and source_domains:
        clear_x, clear_y = evaluator.sets[source_domains[0]]
    pre_acc = 100.0 * accuracy(triplet.student, clear_x, clear_y) if clear_x is not None else float("nan")

    flops = FlopCounter()
    window: deque = deque(maxlen=cfg.trainer.target_window)
    plan = mod.ModulationPlan()
    decisions, mod_trace, loss_trace, agent_trace, events = [], [], [], [], []
    steps_executed = steps_granted = 0

    stream = Stream(profile, pre.source, corruption_params(cfg), cfg.stream.skew) if frames is None else frames
    try:
        for frame in stream:
            t = frame.index
            phase = profile.phase_at(t)
            vflops = visits[phase].flops
            forward(triplet.student, frame.x)  # the deployed prediction
            flops.inference_fwd += infer_cost
            vflops.inference_fwd += infer_cost
            window.append(frame.x)

            event = None
            if use_detector:
                h = det.sample_signal(triplet.student, head, triplet.static_teacher, frame.x)
                flops.inference_fwd += detect_cost
                vflops.inference_fwd += detect_cost
                event = detector.push(h)
            level = detector.level if detector.level is not None else cal.b_source
            if event is not None:
                rec = {"frame": t, "bin": event.bin_index, "B": event.level, "dB": event.delta}
                if tg.lt or tg.alr:
                    steps = mod.budget(event.delta, event.level, mcfg, None if tg.alr else cfg.modulation.k_l_max)
                    eta_peak = mod.peak_lr(event.level, mcfg) if tg.alr else cfg.trainer.lr
                    plan = mod.accumulate(plan, steps, eta_peak, mod.classmix_ratio(event.level, mcfg))
                    steps_granted += steps
                    rec["L"] = steps
                events.append(rec)

            train = tg.adapt and (mod.gate(plan, event) if tg.lt else True)
            eta = 0.0
            action = None
            if train and plan.active:
                eta_sched, plan = mod.step_lr(plan, cfg.modulation.lr_floor)
                eta = eta_sched if tg.alr else cfg.trainer.lr
            elif train:
                eta = mcfg.k_eta_min if tg.alr else cfg.trainer.lr
            k_cm = mod.classmix_ratio(level, mcfg) if tg.dcm else cfg.trainer.k_cm_fixed
            if train:
                action = agent.select() if tg.hamt else 0
                triplet, report, l_t, cost = adapt_step(
                    triplet, action, eta, np.asarray(window), buffer, k_cm, rng, tcfg, rcs=tg.rcs
                )
                if tg.hamt:
                    r_t = agent.observe(l_t, action)
                    st = agent.state
                    agent_trace.append(
                        {
                            "t": t,
                            "l_t": l_t,
                            "R_t": r_t,
                            "action": hamt.ACTIONS[action],
                            "V": st.values.tolist(),
                            "gamma": st.gamma.tolist(),
                        }
                    )
                flops.adapt_fwd += cost.fwd
                flops.adapt_bwd += cost.bwd
                vflops.adapt_fwd += cost.fwd
                vflops.adapt_bwd += cost.bwd
                steps_executed += 1
                loss_trace.append({"frame": t, "action": hamt.ACTIONS[action], "l_t": l_t, **report.as_dict()})
            decisions.append({"frame": t, "train": bool(train), "action": None if action is None else hamt.ACTIONS[action], "eta": eta})
            mod_trace.append(
                {"frame": t, "gate": "train" if train else "skip", "L_remaining": plan.remaining, "eta": eta, "K_CM": k_cm}
            )

            last_of_phase = t + 1 == starts[phase] + profile.schedule[phase][2]
            if evaluator is not None and ((t + 1) % cfg.eval.cadence == 0 or last_of_phase):
                accs = evaluator(triplet.student)
                visit_evals[phase].append(accs[frame.domain_id])
                evaluations.append({"frame": t, "active": frame.domain_id, "accuracy": accs})
    except Exception:
        if partial_dir is not None:
            partial_metrics = EpisodeMetrics(
                cfg.run_id, cfg.seed, visits, flops, len(profile), pre_acc, float("nan"),
                events, steps_executed, steps_granted, evaluations,
            )  # fmt: skip
            EpisodeResult(
                partial_metrics, decisions, mod_trace, detector.trace, loss_trace, cal, agent_trace, triplet
            ).write_traces(partial_dir)
            log.error("episode aborted; partial traces in %s", partial_dir)
        raise

    for v, accs in zip(visits, visit_evals):
        v.accuracy = float(np.mean(accs)) if accs else float("nan")
    post_acc = 100.0 * accuracy(triplet.student, clear_x, clear_y) if clear_x is not None else float("nan")
    metrics = EpisodeMetrics(
        run_id=cfg.run_id,
        seed=cfg.seed,
        visits=visits,
        flops=flops,
        frames=len(profile),
        pre_source_accuracy=pre_acc,
        post_source_accuracy=post_acc,
        events=events,
        steps_executed=steps_executed,
        steps_granted=steps_granted,
        evaluations=evaluations,
    )
    return EpisodeResult(metrics, decisions, mod_trace, detector.trace, loss_trace, cal, agent_trace, triplet)
