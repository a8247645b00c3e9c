"""Acceptance criteria 1-10, one test each.

Every test prints a single ``criterion N: PASS|FAIL`` line (visible without
``-s``) before asserting. Episode-level criteria run on seeds 0, 1 and 2
with the shipped default configuration.

    pytest tests/test_acceptance.py -v
"""

import importlib
import json
import math
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

import oracles
from hamlet.bench.ablation import STANDARD_ROWS, row_config
from hamlet.bench.config import ExperimentConfig
from hamlet.bench.episode import pretrain, run_episode
from hamlet.bench.metrics import harmonic_mean
from hamlet.detector import DomainDetector, discretize
from hamlet.hamt import HAMTAgent, calibrate, conditioning, reward, suffix_len, update_value
from hamlet.model import NUM_MODULES, backward_suffix, build_net, flops_of, forward
from hamlet.modulation import ModulationConfig, classmix_ratio, iteration_factor, peak_lr
from hamlet.trainer import cross_entropy

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
GOLDEN = Path(__file__).parent / "golden"
DEFAULT = ExperimentConfig()


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, f"criterion {n}: {detail}"

    return emit


@lru_cache(maxsize=None)
def episode(row: str, seed: int):
    """Cached default-config episode for an ablation row, or ``frozen``."""
    if row == "frozen":
        cfg = DEFAULT.replace(**{"toggles.adapt": False, "seed": seed})
    else:
        cfg = row_config(DEFAULT, STANDARD_ROWS[row], seed)
    return run_episode(cfg, pre=pretrain(cfg))


def _worst(values):
    return min(values), max(values)


# -- 1 ---------------------------------------------------------------------------


def test_criterion_1_equation_oracles(report):
    rng = np.random.default_rng(2024)
    n = 1000
    err = {k: 0.0 for k in ("gamma", "V", "R", "discretize", "interp", "hmean")}
    for _ in range(n):
        omega = rng.uniform(0.05, 5.0, 4)
        beta = float(rng.uniform(0.2, 10.0))
        err["gamma"] = max(err["gamma"], float(np.max(np.abs(conditioning(omega, beta) - oracles.gamma(omega, beta, dps=30)))))

        v, g, a, r = rng.uniform(-1, 1), rng.uniform(0, 1), rng.uniform(0.01, 1), rng.uniform(-1, 1)
        err["V"] = max(err["V"], abs(update_value(v, g, a, r) - oracles.value_update(v, g, a, r)))

        hist = rng.uniform(0, 5, int(rng.integers(1, 4))).tolist()
        err["R"] = max(err["R"], abs(reward(hist) - oracles.reward(hist)))

        b_prev = None if rng.uniform() < 0.1 else float(rng.uniform(0, 2))
        a_i, z = float(rng.uniform(0, 2)), float(rng.uniform(0.01, 1))
        got, ref = discretize(b_prev, a_i, z), oracles.discretize(b_prev, a_i, z)
        d = abs(got[0] - ref[0]) + (0.0 if got[1] == ref[1] is None else abs((got[1] or 0) - (ref[1] or 0)))
        if (got[1] is None) != (ref[1] is None):
            d = math.inf
        err["discretize"] = max(err["discretize"], d)

        bs = float(rng.uniform(0, 1))
        bh = bs + float(rng.uniform(0.01, 2))
        lo = float(rng.uniform(0, 0.5))
        hi = lo + float(rng.uniform(0, 0.5))
        cfg = ModulationConfig(z=0.1, b_source=bs, b_hard=bh, k_l_min=lo, k_l_max=hi, k_eta_min=lo, k_eta_max=hi, k_cm_min=lo, k_cm_max=hi)
        b = float(rng.uniform(bs - 1, bh + 1))
        ref = oracles.lerp_clamped(b, bs, bh, lo, hi)
        for got in (peak_lr(b, cfg), classmix_ratio(b, cfg), iteration_factor(-1.0, b, cfg)):
            err["interp"] = max(err["interp"], abs(got - ref))

        vals = rng.uniform(0.1, 100, int(rng.integers(1, 12))).tolist()
        err["hmean"] = max(err["hmean"], abs(harmonic_mean(vals) - oracles.harmonic(vals)))
    ok = all(e <= 1e-12 for e in err.values())
    report(1, ok, f"max abs error over {n} inputs each: " + ", ".join(f"{k} {v:.1e}" for k, v in err.items()))


# -- 2 ---------------------------------------------------------------------------


def _loss(net, x, y):
    logits, _ = forward(net, x)
    return cross_entropy(logits, y)[0]


def test_criterion_2_gradient_check(report):
    worst = 0.0
    slices_exact = True
    for seed in range(20):
        rng = np.random.default_rng(10_000 + seed)
        dims = [int(v) for v in rng.integers(2, 17, 5)]
        net = build_net(dims, rng)
        x = rng.normal(size=(4, dims[0]))
        y = rng.integers(0, dims[-1], 4)
        logits, cache = forward(net, x)
        _, g = cross_entropy(logits, y)
        full = backward_suffix(net, cache, g, NUM_MODULES)
        numeric = []
        for m in net.modules:
            for p in (m.weights, m.bias):
                gp = np.zeros_like(p)
                for i in np.ndindex(p.shape):
                    old = p[i]
                    p[i] = old + 1e-5
                    up = _loss(net, x, y)
                    p[i] = old - 1e-5
                    down = _loss(net, x, y)
                    p[i] = old
                    gp[i] = (up - down) / 2e-5
                numeric.append(gp.ravel())
        numeric = np.concatenate(numeric)
        analytic = full.flat()
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        worst = max(worst, float(rel.max()))
        for k in range(1, NUM_MODULES + 1):
            part = backward_suffix(net, cache, g, k)
            for i in range(NUM_MODULES - k, NUM_MODULES):
                slices_exact &= np.array_equal(part.weights[i], full.weights[i]) and np.array_equal(part.bias[i], full.bias[i])
    ok = worst < 1e-4 and slices_exact
    report(2, ok, f"max relative error {worst:.2e} on 20 nets (< 1e-4); suffix slices exact: {slices_exact}")


# -- 3 ---------------------------------------------------------------------------


def test_criterion_3_hamt_cost_bias(report):
    dims = DEFAULT.model.dims
    batch = DEFAULT.trainer.target_window
    net = build_net(dims, np.random.default_rng(0))
    omega = calibrate(net, np.zeros((batch, dims[0])), mode="flops")
    bwd = [flops_of(dims, suffix_len(j), batch)[1] for j in range(NUM_MODULES)]
    cuts = []
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        losses = 2.0 * np.exp(-np.arange(500) / 100.0) + rng.normal(0.0, 0.02, 500)
        mean_bwd = {}
        for beta in (1.0, 10.0):
            agent = HAMTAgent(omega, DEFAULT.hamt.alpha, beta, decay_unselected=DEFAULT.hamt.decay_unselected)
            acts = []
            for loss in losses:
                acts.append(agent.select())
                agent.observe(float(loss))
            mean_bwd[beta] = float(np.mean([bwd[j] for j in acts]))
        cuts.append(1.0 - mean_bwd[1.0] / mean_bwd[10.0])
    ok = min(cuts) >= 0.20
    report(3, ok, "bwd FLOPs cut at beta=1 vs beta=10 per seed: " + ", ".join(f"{c:.1%}" for c in cuts) + " (>= 20%)")


# -- 4 ---------------------------------------------------------------------------


def test_criterion_4_hamt_ablation(report):
    lines, ok = [], True
    for seed in SEEDS:
        golden = json.loads((GOLDEN / f"baseline_seed{seed}.json").read_text())
        a, b = episode("A", seed).metrics, episode("B", seed).metrics
        for row, m in (("A", a), ("B", b)):
            g = golden[row]
            same = (
                m.flops.adapt_bwd == g["adapt_bwd_flops"]
                and m.flops.total == g["total_flops"]
                and abs(m.hmean() - g["hmean_total"]) <= 1e-9
            )
            ok &= same
            if not same:
                lines.append(f"s{seed} row {row} deviates from golden")
        cut = 1.0 - b.flops.adapt_bwd / a.flops.adapt_bwd
        drop = a.hmean() - b.hmean()
        ok &= cut >= 0.25 and drop <= 2.0
        lines.append(f"s{seed} bwd cut {cut:.1%} h-mean drop {drop:+.2f}")
    report(4, ok, "; ".join(lines) + " (cut >= 25%, drop <= 2)")


# -- 5 ---------------------------------------------------------------------------


def test_criterion_5_lt_gating(report):
    ratios = [episode("B", s).metrics.flops.total / episode("C", s).metrics.flops.total for s in SEEDS]
    idle = []
    for seed in SEEDS:
        for s in (0.0, 0.4, 1.0):
            cfg = DEFAULT.replace(
                **{"seed": seed, "stream.preset": "constant", "stream.constant_intensity": s, "stream.frames_per_domain": 3000}
            )
            m = run_episode(cfg, pre=pretrain(cfg)).metrics
            idle.append(m.flops.adapt_fwd + m.flops.adapt_bwd)
    ok = min(ratios) >= 2.0 and all(v == 0 for v in idle)
    report(
        5,
        ok,
        "B/C total cost per seed: " + ", ".join(f"{r:.2f}x" for r in ratios)
        + f" (>= 2x); constant streams with nonzero adaptation FLOPs: {sum(v != 0 for v in idle)}/{len(idle)}",
    )


# -- 6 ---------------------------------------------------------------------------


def test_criterion_6_detector_exactness(report):
    """Noise at the edge of the stated envelope: post-binning std 0.99 * z/3."""
    m, z = 20, 0.3
    levels = [0.2, 1.2, 2.2, 1.2, 0.2]
    bins_per_level = 10
    sigma = 0.99 * (z / 3.0) * math.sqrt(m)
    clean = 0
    missed = false_pos = 0
    for trial in range(10):
        rng = np.random.default_rng(trial)
        det = DomainDetector(m, z, 0.0, 3.0)
        found = []
        for lvl in levels:
            for _ in range(bins_per_level * m):
                ev = det.push(lvl + rng.normal(0.0, sigma))
                if ev is not None:
                    found.append(ev.bin_index)
        truth = {k * bins_per_level for k in range(1, len(levels))}
        missed += len(truth - set(found))
        false_pos += len(set(found) - truth)
        clean += set(found) == truth
    report(6, clean == 10, f"{clean}/10 trials exact at post-binning std 0.99*z/3 ({missed} missed, {false_pos} false events)")


# -- 7 ---------------------------------------------------------------------------


def test_criterion_7_adaptation_benefit(report):
    lines, ok = [], True
    for seed in SEEDS:
        g, f = episode("G", seed).metrics, episode("frozen", seed).metrics
        dh = g.hardest.accuracy - f.hardest.accuracy
        dm = g.hmean() - f.hmean()
        ok &= dh >= 10.0 and dm >= 5.0
        lines.append(f"s{seed} hardest {dh:+.1f} h-mean {dm:+.1f}")
    report(7, ok, "; ".join(lines) + " (>= +10 / >= +5)")


# -- 8 ---------------------------------------------------------------------------


def test_criterion_8_forgetting_bound(report):
    gaps = []
    for seed in SEEDS:
        m = episode("G", seed).metrics
        gaps.append(m.post_source_accuracy - m.pre_source_accuracy)
    ok = all(abs(v) <= 2.0 for v in gaps)
    report(8, ok, "source accuracy change per seed: " + ", ".join(f"{v:+.2f}" for v in gaps) + " (|.| <= 2)")


# -- 9 ---------------------------------------------------------------------------


def test_criterion_9_determinism(report, tmp_path):
    first = episode("G", 0).write(tmp_path / "first")
    cfg = row_config(DEFAULT, STANDARD_ROWS["G"], 0)
    second = run_episode(cfg).write(tmp_path / "second")
    names = sorted(p.name for p in first.iterdir())
    differ = [n for n in names if (first / n).read_bytes() != (second / n).read_bytes()]
    report(9, not differ and len(names) >= 8, f"{len(names) - len(differ)}/{len(names)} artifact files bit-identical")


# -- 10 --------------------------------------------------------------------------

# module invariant -> (test module, test function) encoding it
INVARIANT_TESTS = {
    "toy-model: gradient correctness": ("test_model", "test_gradients_match_central_differences"),
    "toy-model: suffix consistency": ("test_model", "test_suffix_gradients_are_exact_slices"),
    "toy-model: EMA convexity": ("test_model", "test_ema_is_convex"),
    "toy-model: FLOPs additivity": ("test_model", "test_flops_additivity"),
    "stream-gen: determinism": ("test_stream", "test_stream_is_deterministic"),
    "stream-gen: monotone difficulty": ("test_stream", "test_frozen_accuracy_non_increasing_in_intensity"),
    "stream-gen: exact boundaries": ("test_stream", "test_domain_boundaries_are_exact"),
    "hamt: gamma decreasing in cost": ("test_hamt", "test_gamma_strictly_decreasing_in_cost"),
    "hamt: cheapest-action mass vs beta": ("test_hamt", "test_cheapest_mass_non_increasing_in_beta"),
    "hamt: asymmetry": ("test_hamt", "test_punishment_outweighs_reward_for_expensive_actions"),
    "hamt: update locality": ("test_hamt", "test_literal_update_is_local"),
    "hamt: scripted-trajectory oracle": ("test_hamt", "test_scripted_trajectory_matches_oracle"),
    "detector: hysteresis": ("test_detector", "test_detector_hysteresis_matches_oracle"),
    "detector: event amplitude": ("test_detector", "test_detector_hysteresis_matches_oracle"),
    "detector: denoising": ("test_detector", "test_denoising_recovers_change_points"),
    "detector: scale-free agreement": ("test_detector", "test_signal_zero_iff_certain_agreement"),
    "detector: signal monotonicity": ("test_detector", "test_signal_non_decreasing_in_intensity"),
    "modulation: gate soundness": ("test_modulation", "test_gate_soundness"),
    "modulation: budget proportionality": ("test_modulation", "test_budget_is_linear_in_amplitude"),
    "modulation: endpoint exactness": ("test_modulation", "test_interpolators_hit_endpoints_and_match_oracle"),
    "modulation: decay monotonicity": ("test_modulation", "test_decay_is_strictly_decreasing"),
    "modulation: accumulation conservation": ("test_modulation", "test_accumulation_conservation"),
    "trainer: objective exactness": ("test_trainer", "test_objective_is_exact_weighted_sum"),
    "trainer: pseudo-labels from teacher only": ("test_bench", "test_adaptation_never_reads_labels"),
    "trainer: pseudo-label scale invariance": ("test_trainer", "test_pseudo_labels_scale_invariant"),
    "trainer: frozen prefix and static teacher": ("test_trainer", "test_frozen_prefix_and_static_teacher"),
    "trainer: T1 step reproduces full training": ("test_trainer", "test_full_step_equals_manual_sgd_plus_ema"),
    "bench: accounting completeness": ("test_bench", "test_accounting_is_complete"),
    "bench: no-label leakage": ("test_bench", "test_evaluation_does_not_change_decisions"),
    "bench: h-mean oracle": ("test_bench", "test_harmonic_mean_matches_oracle"),
}


def test_criterion_10_component_isolation(report):
    missing = []
    for inv, (mod, fn) in INVARIANT_TESTS.items():
        module = importlib.import_module(mod)
        if not callable(getattr(module, fn, None)):
            missing.append(inv)
    ok = not missing
    report(10, ok, f"{len(INVARIANT_TESTS) - len(missing)}/{len(INVARIANT_TESTS)} module invariants mapped to property tests"
           + (f"; missing: {missing}" if missing else "") + " (each runs in the main suite)")
