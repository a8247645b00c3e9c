"""Aggregate metrics and on-disk formats for episode results."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..errors import ContractViolation

CSV_COLUMNS = (
    "run_id",
    "seed",
    "domain_id",
    "direction",
    "accuracy",
    "hmean_group",
    "fwd_flops",
    "bwd_flops",
    "adapt_fwd_flops",
    "adapt_bwd_flops",
    "throughput_proxy",
)

# throughput is reported in frames per this many FLOPs
COST_UNIT = 1e6


def harmonic_mean(values: Sequence[float]) -> float:
    values = list(values)
    if not values:
        raise ContractViolation("harmonic mean of an empty sequence")
    if any(v <= 0 for v in values):
        raise ContractViolation(f"harmonic mean needs positive values, got {values}")
    return len(values) / sum(1.0 / v for v in values)


@dataclass
class FlopCounter:
    inference_fwd: int = 0
    adapt_fwd: int = 0
    adapt_bwd: int = 0

    @property
    def fwd(self) -> int:
        return self.inference_fwd + self.adapt_fwd

    @property
    def bwd(self) -> int:
        return self.adapt_bwd

    @property
    def total(self) -> int:
        return self.inference_fwd + self.adapt_fwd + self.adapt_bwd

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "fwd": self.fwd,
            "bwd": self.bwd,
            "inference_fwd": self.inference_fwd,
            "adapt_fwd": self.adapt_fwd,
            "adapt_bwd": self.adapt_bwd,
        }


def throughput_proxy(frames: int, flops: FlopCounter) -> float:
    """Frames per ``COST_UNIT`` modeled FLOPs (evaluation passes are not counted)."""
    if flops.total == 0:
        return 0.0
    return frames / (flops.total / COST_UNIT)


@dataclass
class VisitRecord:
    domain_id: str
    direction: str
    intensity: float
    start: int
    frames: int
    accuracy: float  # percent
    flops: FlopCounter = field(default_factory=FlopCounter)

    @property
    def group(self) -> str:
        return "source" if self.intensity == 0.0 else "target"


@dataclass
class EpisodeMetrics:
    run_id: str
    seed: int
    visits: list[VisitRecord]
    flops: FlopCounter
    frames: int
    pre_source_accuracy: float
    post_source_accuracy: float
    events: list[dict]
    steps_executed: int
    steps_granted: int
    evaluations: list[dict] = field(default_factory=list)

    def hmean(self, group: str | None = None, direction: str | None = None) -> float:
        vals = [
            max(v.accuracy, 1e-9)
            for v in self.visits
            if (group is None or v.group == group) and (direction is None or v.direction == direction)
        ]
        return harmonic_mean(vals) if vals else float("nan")

    @property
    def hardest(self) -> VisitRecord:
        return max(self.visits, key=lambda v: (v.intensity, v.direction == "F"))

    @property
    def throughput(self) -> float:
        return throughput_proxy(self.frames, self.flops)

    def summary(self) -> dict:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "frames": self.frames,
            "hmean": {
                "source": self.hmean("source"),
                "target": self.hmean("target"),
                "total": self.hmean(),
                "forward": self.hmean(direction="F"),
                "backward": self.hmean(direction="B"),
            },
            "hardest_domain": {"domain_id": self.hardest.domain_id, "accuracy": self.hardest.accuracy},
            "source_accuracy": {"pre": self.pre_source_accuracy, "post": self.post_source_accuracy},
            "flops": self.flops.as_dict(),
            "throughput_proxy": self.throughput,
            "events": len(self.events),
            "steps_executed": self.steps_executed,
            "steps_granted": self.steps_granted,
        }

    def rows(self) -> list[dict]:
        return [
            {
                "run_id": self.run_id,
                "seed": self.seed,
                "domain_id": v.domain_id,
                "direction": v.direction,
                "accuracy": f"{v.accuracy:.6f}",
                "hmean_group": v.group,
                "fwd_flops": v.flops.fwd,
                "bwd_flops": v.flops.bwd,
                "adapt_fwd_flops": v.flops.adapt_fwd,
                "adapt_bwd_flops": v.flops.adapt_bwd,
                "throughput_proxy": f"{throughput_proxy(v.frames, v.flops):.6f}",
            }
            for v in self.visits
        ]


def write_metrics_csv(metrics: EpisodeMetrics, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(metrics.rows())


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ContractViolation(f"{path}: unexpected columns {reader.fieldnames}")
        return list(reader)


def write_jsonl(records, path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
