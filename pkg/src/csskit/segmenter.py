"""Energy VAD and the long-segment cutter used by continuous scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import Waveform


@dataclass(frozen=True)
class VadConfig:
    frame_ms: int = 30
    floor_percentile: float = 10.0
    threshold_db: float = 6.0
    hangover: int = 10
    absolute_floor_db: float = -100.0

    def __post_init__(self):
        if self.frame_ms not in (10, 20, 30):
            raise ValueError("frame_ms must be 10, 20 or 30")
        if self.hangover < 0:
            raise ValueError("hangover must be non-negative")
        if not 0 <= self.floor_percentile <= 100:
            raise ValueError("floor_percentile must be within [0, 100]")


@dataclass(frozen=True)
class SpeechRegions:
    regions: tuple[tuple[float, float], ...]

    def __post_init__(self):
        prev = -np.inf
        for s, e in self.regions:
            if not s < e or s < prev:
                raise ValueError("regions must be sorted, disjoint and non-empty")
            prev = e

    def __len__(self):
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)


def frame_energy_db(x: np.ndarray, frame: int) -> np.ndarray:
    n = len(x) // frame + (len(x) % frame > 0)
    padded = np.zeros(n * frame)
    padded[:len(x)] = x
    power = np.mean(padded.reshape(n, frame) ** 2, axis=1)
    return 10 * np.log10(np.maximum(power, 1e-30))


def energy_vad(x, cfg: VadConfig = VadConfig()) -> SpeechRegions:
    """Frames louder than ``floor + threshold_db`` are speech.

    The floor is a low percentile of the frame energies, so the detector
    adapts to the noise level; the threshold is capped below the loudest
    frame so a stationary signal counts as speech rather than as floor.
    Gaps of fewer than ``hangover`` frames are bridged.
    """
    if isinstance(x, Waveform):
        if x.n_channels != 1:
            raise ValueError("energy_vad expects a single channel")
        rate, samples = x.sample_rate, x.samples[0]
    else:
        rate, samples = 16000, np.asarray(x, dtype=float)
        if samples.ndim != 1:
            raise ValueError("energy_vad expects a single channel")
    if samples.size == 0:
        raise ValueError("empty input")
    frame = rate * cfg.frame_ms // 1000
    e = frame_energy_db(samples, frame)
    loud = e.max()
    if loud <= cfg.absolute_floor_db:
        return SpeechRegions(())
    floor = max(np.percentile(e, cfg.floor_percentile), cfg.absolute_floor_db)
    thr = min(floor + cfg.threshold_db, loud - cfg.threshold_db)
    active = (e > thr) & (e > cfg.absolute_floor_db)
    regions = _runs(active)
    merged: list[list[int]] = []
    for s, t in regions:
        if merged and s - merged[-1][1] < cfg.hangover:
            merged[-1][1] = t
        else:
            merged.append([s, t])
    dur = len(samples) / rate
    sec = frame / rate
    return SpeechRegions(tuple((s * sec, min(t * sec, dur)) for s, t in merged))


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    d = np.diff(np.concatenate([[0], mask.astype(int), [0]]))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


@dataclass(frozen=True)
class SegmentCut:
    boundaries: tuple[float, ...]   # interior cut points, seconds
    duration: float
    flagged: tuple[int, ...] = ()   # boundaries placed outside [min_s, max_s]

    @property
    def segments(self) -> list[tuple[float, float]]:
        edges = (0.0, *self.boundaries, self.duration)
        return list(zip(edges[:-1], edges[1:]))


def cut_long_segments(truth, min_s: float = 60.0, max_s: float = 120.0) -> SegmentCut:
    """Cut a session at silent instants into segments of ``min_s`` to ``max_s``.

    Each boundary goes at the midpoint of the earliest silence that reaches
    into ``[start + min_s, start + max_s]`` (the midpoint of the part inside
    that window).  If no such silence exists the longest silence after
    ``start`` is used and the boundary is flagged.  The tail is kept as a
    last segment once fewer than ``max_s`` seconds remain.
    """
    if min_s <= 0 or max_s < min_s:
        raise ValueError("need 0 < min_s <= max_s")
    duration = truth.duration
    silences = [(s, e) for s, e in truth.silences() if e > s]
    bounds, flagged = [], []
    start = 0.0
    while duration - start > max_s:
        lo, hi = start + min_s, start + max_s
        pick = None
        for s, e in silences:
            a, b = max(s, lo), min(e, hi)
            if a < b or (a == b and s < a < e):
                pick = 0.5 * (a + b)
                break
            if s > hi:
                break
        if pick is None:
            later = [(e - s, s, e) for s, e in silences if e > start + 1e-9 and s < duration]
            later = [c for c in later if 0.5 * (max(c[1], start) + c[2]) > start]
            if not later:
                break
            _, s, e = max(later)
            pick = 0.5 * (max(s, start) + e)
            flagged.append(len(bounds))
        if pick >= duration:
            break
        bounds.append(pick)
        start = pick
    return SegmentCut(tuple(bounds), duration, tuple(flagged))


def vad_recall(regions: SpeechRegions, truth, frame_s: float = 0.01) -> float:
    """Fraction of truth speech time (sampled every ``frame_s``) inside the regions."""
    t = np.arange(0.0, truth.duration, frame_s) + frame_s / 2
    speech = np.zeros(len(t), bool)
    for e in truth.entries:
        speech |= (t >= e.start) & (t < e.end)
    found = np.zeros(len(t), bool)
    for s, e in regions:
        found |= (t >= s) & (t < e)
    n = speech.sum()
    return float((speech & found).sum() / n) if n else 1.0
