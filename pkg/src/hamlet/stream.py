"""Synthetic labeled streams with scheduled distribution drift.

Clean data are Gaussian class clusters whose centres sit on a circle in the
(0, 1) plane. A corruption of intensity ``s`` rotates that plane by
``s * max_angle``, adds isotropic noise of std ``s * max_noise`` and
translates along a fixed direction by ``s * shift``. Intensity plays the role
of weather severity: ``s = 0`` is the clear source domain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractViolation

INPUT_DIM = 8

# Rain levels of the storm benchmark, mapped to evenly spaced intensities.
STORM_LEVELS = (("clear", 0.0), ("25mm", 0.2), ("50mm", 0.4), ("75mm", 0.6), ("100mm", 0.8), ("200mm", 1.0))


@dataclass(frozen=True)
class CorruptionParams:
    max_angle: float = math.radians(45.0)
    max_noise: float = 0.15
    shift: float = 8.0
    plane: tuple[int, int] = (0, 1)
    shift_axis: int = 2


@dataclass
class SourceDataset:
    x: np.ndarray
    y: np.ndarray
    class_count: int
    centers: np.ndarray
    spread: float = 0.4

    @property
    def frequencies(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.class_count) / len(self.y)

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class Frame:
    x: np.ndarray
    y_true: int
    domain_id: str
    intensity: float
    index: int


@dataclass
class DomainProfile:
    """Ordered ``(domain_id, intensity, frame_count)`` phases plus a seed."""

    schedule: list[tuple[str, float, int]]
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.schedule:
            raise ContractViolation("schedule must be nonempty")
        seen: dict[str, float] = {}
        for dom, s, n in self.schedule:
            if n <= 0:
                raise ContractViolation(f"frame_count must be > 0 for {dom!r}")
            if not (math.isfinite(s) and 0.0 <= s <= 1.0):
                raise ContractViolation(f"intensity for {dom!r} must be in [0, 1], got {s}")
            if seen.setdefault(dom, s) != s:
                raise ContractViolation(f"domain {dom!r} appears with two intensities")
        self.schedule = [(str(d), float(s), int(n)) for d, s, n in self.schedule]

    def __len__(self) -> int:
        return sum(n for _, _, n in self.schedule)

    @property
    def domains(self) -> dict[str, float]:
        """Distinct domains in first-appearance order."""
        out: dict[str, float] = {}
        for d, s, _ in self.schedule:
            out.setdefault(d, s)
        return out

    def boundaries(self) -> list[int]:
        """Start index of every phase."""
        starts, pos = [], 0
        for _, _, n in self.schedule:
            starts.append(pos)
            pos += n
        return starts

    def phase_at(self, index: int) -> int:
        if not 0 <= index < len(self):
            raise IndexError(index)
        pos = 0
        for p, (_, _, n) in enumerate(self.schedule):
            pos += n
            if index < pos:
                return p
        raise IndexError(index)  # pragma: no cover

    def directions(self) -> list[str]:
        """'F' for phases up to and including the first peak, 'B' after it."""
        peak = max(range(len(self.schedule)), key=lambda p: (self.schedule[p][1], -p))
        return ["F" if p <= peak else "B" for p in range(len(self.schedule))]


def storm_profile(frames_per_domain: int = 1000, seed: int = 0) -> DomainProfile:
    """Pyramid clear -> 200mm -> clear, one phase per level each way."""
    up = list(STORM_LEVELS)
    levels = up + up[-2::-1]
    return DomainProfile([(d, s, frames_per_domain) for d, s in levels], seed)


def fast_storm_profile(frames_per_domain: int = 1000, seed: int = 0) -> DomainProfile:
    """Same pyramid with phases three times shorter."""
    return storm_profile(max(1, frames_per_domain // 3), seed)


def step_profile(intensities: Iterable[float], frames_per_domain: int = 1000, seed: int = 0) -> DomainProfile:
    return DomainProfile([(f"s{s:g}", float(s), frames_per_domain) for s in intensities], seed)


def constant_profile(intensity: float = 0.0, frames: int = 1000, seed: int = 0) -> DomainProfile:
    return DomainProfile([(f"s{intensity:g}", float(intensity), frames)], seed)


PRESETS = {
    "storm": storm_profile,
    "fast_storm": fast_storm_profile,
}


def class_priors(class_count: int, skew: float = 3.0) -> np.ndarray:
    """Geometric class prior; the most frequent class is ``skew`` times the rarest."""
    ratio = skew ** (-1.0 / max(class_count - 1, 1))
    p = ratio ** np.arange(class_count)
    return p / p.sum()


def cluster_centers(class_count: int, dim: int = INPUT_DIM, radius: float = 4.0, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xC3])
    angles = 2 * np.pi * np.arange(class_count) / class_count
    centers = np.zeros((class_count, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    centers[:, 2:] = rng.normal(0.0, 0.3, size=(class_count, dim - 2))
    return centers


def sample_clean(
    centers: np.ndarray, priors: np.ndarray, n: int, rng: np.random.Generator, spread: float = 0.4
) -> tuple[np.ndarray, np.ndarray]:
    y = rng.choice(len(priors), size=n, p=priors)
    x = centers[y] + rng.normal(0.0, spread, size=(n, centers.shape[1]))
    return x, y


def make_source(class_count: int, n: int, seed: int, skew: float = 3.0, spread: float = 0.4) -> SourceDataset:
    """Labeled clear-domain samples; the first ``class_count`` rows cover every class once."""
    if class_count < 2:
        raise ContractViolation(f"need at least 2 classes, got {class_count}")
    if n < class_count:
        raise ContractViolation(f"n={n} is smaller than class_count={class_count}")
    centers = cluster_centers(class_count, seed=seed)
    rng = np.random.default_rng([seed, 0x50])
    x, y = sample_clean(centers, class_priors(class_count, skew), n, rng, spread)
    y[:class_count] = np.arange(class_count)
    x[:class_count] = centers + rng.normal(0.0, spread, size=centers.shape)
    return SourceDataset(x, y, class_count, centers, spread)


def corrupt(
    x: np.ndarray,
    s: float,
    rng: np.random.Generator,
    params: CorruptionParams = CorruptionParams(),
) -> np.ndarray:
    """Apply intensity-``s`` corruption to a vector or a batch of rows."""
    if not (math.isfinite(s) and 0.0 <= s <= 1.0):
        raise ContractViolation(f"intensity must be in [0, 1], got {s}")
    x = np.asarray(x, dtype=np.float64)
    if s == 0.0:
        return x.copy()
    out = np.atleast_2d(x).copy()
    a, b = params.plane
    theta = s * params.max_angle
    c, sn = math.cos(theta), math.sin(theta)
    xa, xb = out[:, a].copy(), out[:, b].copy()
    out[:, a] = c * xa - sn * xb
    out[:, b] = sn * xa + c * xb
    out[:, params.shift_axis] += s * params.shift
    out += rng.normal(0.0, s * params.max_noise, size=out.shape)
    return out[0] if x.ndim == 1 else out


class Stream:
    """Frame-by-frame iterator over a profile.

    Everything is a pure function of ``(profile, source centres)``; replaying
    with the same profile yields the same frames.
    """

    def __init__(
        self,
        profile: DomainProfile,
        source: SourceDataset,
        params: CorruptionParams = CorruptionParams(),
        skew: float = 3.0,
    ):
        self.profile = profile
        self.centers = source.centers
        self.spread = source.spread
        self.priors = class_priors(source.class_count, skew)
        self.params = params
        self._rng = np.random.default_rng([profile.seed, 0xD1])
        self._phase = 0
        self._in_phase = 0
        self.cursor = 0

    def __iter__(self) -> Iterator[Frame]:
        return self

    def __next__(self) -> Frame:
        frame = self.next_frame()
        if frame is None:
            raise StopIteration
        return frame

    def next_frame(self) -> Frame | None:
        """Next frame, or ``None`` once the schedule is exhausted."""
        sched = self.profile.schedule
        while self._phase < len(sched) and self._in_phase >= sched[self._phase][2]:
            self._phase += 1
            self._in_phase = 0
        if self._phase >= len(sched):
            return None
        dom, s, _ = sched[self._phase]
        x, y = sample_clean(self.centers, self.priors, 1, self._rng, self.spread)
        x = corrupt(x[0], s, self._rng, self.params)
        frame = Frame(x, int(y[0]), dom, s, self.cursor)
        self.cursor += 1
        self._in_phase += 1
        return frame


def holdout(
    profile: DomainProfile,
    source: SourceDataset,
    domain_id: str,
    n: int,
    params: CorruptionParams = CorruptionParams(),
    skew: float = 3.0,
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` labeled evaluation samples at ``domain_id``'s intensity.

    Drawn from a seed stream disjoint from the deployment frames.
    """
    domains = profile.domains
    if domain_id not in domains:
        raise ContractViolation(f"unknown domain {domain_id!r}")
    s = domains[domain_id]
    key = int.from_bytes(domain_id.encode()[:8].ljust(8, b"\0"), "little")
    rng = np.random.default_rng([profile.seed, 0xE7, key])
    x, y = sample_clean(source.centers, class_priors(source.class_count, skew), n, rng, source.spread)
    return corrupt(x, s, rng, params), y


# -- line-delimited export/import ---------------------------------------------


def frame_to_record(frame: Frame) -> dict:
    return {
        "index": frame.index,
        "domain_id": frame.domain_id,
        "intensity": frame.intensity,
        "x": frame.x.tolist(),
        "y_true": frame.y_true,
    }


def export_stream(frames: Iterable[Frame], path: str | Path) -> int:
    count = 0
    with open(path, "w") as fh:
        for frame in frames:
            fh.write(json.dumps(frame_to_record(frame)) + "\n")
            count += 1
    return count


def import_stream(path: str | Path) -> Iterator[Frame]:
    """Read frames written by :func:`export_stream` (or a third party)."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                x = np.asarray(rec["x"], dtype=np.float64)
                frame = Frame(x, int(rec["y_true"]), str(rec["domain_id"]), float(rec["intensity"]), int(rec["index"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ContractViolation(f"{path}:{lineno}: malformed frame record ({exc})") from exc
            if not np.all(np.isfinite(x)):
                raise ContractViolation(f"{path}:{lineno}: non-finite input")
            yield frame
