"""Component ablation grid: one episode per (row, seed), mean and std per cell."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .config import ExperimentConfig
from .episode import pretrain, run_episode

log = logging.getLogger(__name__)

TOGGLES = ("hamt", "lt", "alr", "dcm", "rcs")

# Component rows, cumulative in the usual order; F swaps DCM for RCS.
STANDARD_ROWS: dict[str, tuple[str, ...]] = {
    "A": (),
    "B": ("hamt",),
    "C": ("hamt", "lt"),
    "D": ("hamt", "lt", "alr"),
    "E": ("hamt", "lt", "alr", "dcm"),
    "F": ("hamt", "lt", "alr", "rcs"),
    "G": ("hamt", "lt", "alr", "dcm", "rcs"),
}

COLUMNS = (
    "hmean_total",
    "hmean_source",
    "hmean_target",
    "hardest_accuracy",
    "total_flops",
    "adapt_bwd_flops",
    "throughput_proxy",
    "steps",
)


@dataclass
class AblationTable:
    rows: list[str]
    seeds: list[int]
    toggles: dict[str, tuple[str, ...]]
    values: dict[str, dict[str, list[float]]]  # row -> column -> per-seed values

    def mean(self, row: str, col: str) -> float:
        return float(np.mean(self.values[row][col]))

    def std(self, row: str, col: str) -> float:
        return float(np.std(self.values[row][col]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["row", *TOGGLES]
        for c in COLUMNS:
            header += [f"{c}_mean", f"{c}_std"]
        w.writerow(header)
        for r in self.rows:
            line = [r, *(int(t in self.toggles[r]) for t in TOGGLES)]
            for c in COLUMNS:
                line += [f"{self.mean(r, c):.6g}", f"{self.std(r, c):.6g}"]
            w.writerow(line)
        return buf.getvalue()

    def to_text(self) -> str:
        """Aligned table; FLOPs in millions."""
        head = ["row", *(t.upper() for t in TOGGLES), "h-mean", "source", "target", "hardest", "total MFLOPs", "bwd MFLOPs", "fr/MFLOP"]
        body = []
        for r in self.rows:
            cells = [r, *("x" if t in self.toggles[r] else "-" for t in TOGGLES)]
            for c in ("hmean_total", "hmean_source", "hmean_target", "hardest_accuracy"):
                cells.append(f"{self.mean(r, c):.1f} ± {self.std(r, c):.1f}")
            for c in ("total_flops", "adapt_bwd_flops"):
                cells.append(f"{self.mean(r, c) / 1e6:.1f} ± {self.std(r, c) / 1e6:.1f}")
            cells.append(f"{self.mean(r, 'throughput_proxy'):.3f} ± {self.std(r, 'throughput_proxy'):.3f}")
            body.append(cells)
        widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(str(x).rjust(wd) for x, wd in zip(line, widths)) for line in [head, *body]]
        lines.insert(1, "  ".join("-" * wd for wd in widths))
        return "\n".join(lines) + "\n"


def row_config(base: ExperimentConfig, toggles: tuple[str, ...], seed: int) -> ExperimentConfig:
    unknown = set(toggles) - set(TOGGLES)
    if unknown:
        raise ConfigError(f"unknown toggles {sorted(unknown)}")
    over = {f"toggles.{t}": t in toggles for t in TOGGLES}
    over["toggles.adapt"] = True
    over["seed"] = seed
    return base.replace(**over)


def ablation_grid(
    base: ExperimentConfig,
    rows: dict[str, tuple[str, ...]] | None = None,
    seeds: list[int] | tuple[int, ...] = (0, 1, 2),
) -> AblationTable:
    """Run every row on the same seeds. Rows map a label to the enabled toggles."""
    rows = dict(STANDARD_ROWS if rows is None else rows)
    if not rows:
        raise ConfigError("ablation needs at least one toggle set")
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    values: dict[str, dict[str, list[float]]] = {r: {c: [] for c in COLUMNS} for r in rows}
    for seed in seeds:
        pre = None
        for label, toggles in rows.items():
            cfg = row_config(base, tuple(toggles), seed)
            pre = pre or pretrain(cfg)
            m = run_episode(cfg, pre=pre).metrics
            log.info("row %s seed %d: h-mean %.2f", label, seed, m.hmean())
            v = values[label]
            v["hmean_total"].append(m.hmean())
            v["hmean_source"].append(m.hmean("source"))
            v["hmean_target"].append(m.hmean("target"))
            v["hardest_accuracy"].append(m.hardest.accuracy)
            v["total_flops"].append(float(m.flops.total))
            v["adapt_bwd_flops"].append(float(m.flops.adapt_bwd))
            v["throughput_proxy"].append(m.throughput)
            v["steps"].append(float(m.steps_executed))
    return AblationTable(list(rows), seeds, {r: tuple(t) for r, t in rows.items()}, values)
