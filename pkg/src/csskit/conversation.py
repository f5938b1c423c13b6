"""Simulated conversations: overlap-controlled session planning and rendering."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .room import (ArrayGeometry, RoomSpec, image_method_rir, isotropic_noise, reverberant_image,
                   snr_gain)
from .signal import SAMPLE_RATE, Waveform, read_wav

log = logging.getLogger(__name__)

CONDITIONS = ("0S", "0L", "10", "20", "30", "40")
SHORT_SILENCE = (0.1, 0.5)
LONG_SILENCE = (2.9, 3.0)
SPEAKER_DISTANCE = (0.33, 4.09)
SUITE_UTTERANCES = (52, 125)


class PoolError(ValueError):
    """The utterance pool cannot satisfy a request."""


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    path: Path | None
    duration: float
    transcript: tuple[str, ...]
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"{self.utterance_id}: duration must be positive")
        if not self.transcript:
            raise ValueError(f"{self.utterance_id}: empty transcript")

    def load(self, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
        if self.samples is not None:
            return np.asarray(self.samples, dtype=float)
        if self.path is None:
            raise PoolError(f"{self.utterance_id}: no audio attached")
        w = read_wav(self.path, expected_rate=sample_rate)
        return w.samples[0]


def write_pool_index(directory, records) -> Path:
    """``pool.tsv``: utterance_id, speaker_id, wav path (relative), duration, transcript."""
    directory = Path(directory)
    path = directory / "pool.tsv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for r in records:
            rel = Path(r.path).relative_to(directory) if r.path else ""
            w.writerow([r.utterance_id, r.speaker_id, str(rel), f"{r.duration:.6f}",
                        " ".join(r.transcript)])
    return path


def load_pool(directory) -> list[UtteranceRecord]:
    directory = Path(directory)
    index = directory / "pool.tsv"
    if not index.is_file():
        raise PoolError(f"{directory}: no pool.tsv index")
    records = []
    with index.open() as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if not row or row[0].startswith("#"):
                continue
            uid, spk, rel, dur, words = row
            records.append(UtteranceRecord(uid, spk, directory / rel, float(dur),
                                           tuple(normalize_words(words))))
    return records


def normalize_words(text: str) -> list[str]:
    """Upper-case, strip punctuation except apostrophes, split on whitespace."""
    keep = "".join(ch if ch.isalnum() or ch in "' " else " " for ch in text.upper())
    return keep.split()


@dataclass(frozen=True)
class OverlapSpec:
    target_ovr: float
    silence_range: tuple[float, float] = SHORT_SILENCE

    def __post_init__(self):
        lo, hi = self.silence_range
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid silence range {self.silence_range}")
        if not 0 <= self.target_ovr < 1:
            raise ValueError(f"target_ovr must lie in [0, 1), got {self.target_ovr}")


def condition_spec(condition: str) -> OverlapSpec:
    if condition == "0S":
        return OverlapSpec(0.0, SHORT_SILENCE)
    if condition == "0L":
        return OverlapSpec(0.0, LONG_SILENCE)
    if condition in CONDITIONS:
        return OverlapSpec(int(condition) / 100, SHORT_SILENCE)
    raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")


@dataclass(frozen=True)
class Placement:
    utterance_id: str
    speaker_id: str
    position: int
    start: float
    end: float


@dataclass(frozen=True)
class SessionPlan:
    placements: tuple[Placement, ...]
    duration: float
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "placements", tuple(self.placements))
        starts = [p.start for p in self.placements]
        if any(b < a for a, b in zip(starts, starts[1:])):
            raise ValueError("placements must be sorted by start time")
        by_spk: dict[str, list[Placement]] = {}
        for p in self.placements:
            if p.end <= p.start:
                raise ValueError(f"{p.utterance_id}: empty placement")
            by_spk.setdefault(p.speaker_id, []).append(p)
        for spk, ps in by_spk.items():
            for a, b in zip(ps, ps[1:]):
                if b.start < a.end:
                    raise ValueError(f"speaker {spk} overlaps themself at {b.start:.3f} s")
        if max_active(self) > 2:
            raise ValueError("more than two placements active at once")

    @property
    def speakers(self) -> list[str]:
        return sorted({p.speaker_id for p in self.placements})


def _activity_profile(intervals):
    """(boundaries, active count on each [b_i, b_i+1)) of a set of intervals."""
    events = sorted([(s, 1) for s, _ in intervals] + [(e, -1) for _, e in intervals],
                    key=lambda x: (x[0], x[1]))
    times, counts, n = [], [], 0
    for t, d in events:
        n += d
        times.append(t)
        counts.append(n)
    return np.array(times), np.array(counts)


def max_active(plan: SessionPlan) -> int:
    if not plan.placements:
        return 0
    _, counts = _activity_profile([(p.start, p.end) for p in plan.placements])
    return int(counts.max())


def measure_overlap(plan: SessionPlan) -> float:
    """Overlapped length (>= 2 active) over the union of speech activity."""
    if not plan.placements:
        return 0.0
    times, counts = _activity_profile([(p.start, p.end) for p in plan.placements])
    span = np.diff(times)
    c = counts[:-1]
    l_all = float(span[c >= 1].sum())
    l_ovl = float(span[c >= 2].sum())
    return l_ovl / l_all if l_all > 0 else 0.0


def _choose_speaker(speakers, usage, exclude, rng):
    cands = [s for s in speakers if s != exclude]
    low = min(usage[s] for s in cands)
    cands = [s for s in cands if usage[s] == low]
    return cands[rng.integers(len(cands))]


class _Queue:
    """Shuffled per-speaker utterance queue; reshuffles when exhausted."""

    def __init__(self, records, rng):
        self.records, self.rng, self.items = list(records), rng, []

    def pop(self):
        if not self.items:
            self.items = [self.records[i] for i in self.rng.permutation(len(self.records))]
        return self.items.pop()


def _build_timeline(queues, speakers, spec: OverlapSpec, target_duration, rng,
                    p_base=0.8, gain=4.0, min_tail=0.3):
    r = spec.target_ovr
    lo, hi = spec.silence_range
    usage = {s: 0 for s in speakers}
    pos_of = {s: i for i, s in enumerate(speakers)}
    placements = []
    l_ovl = l_all = 0.0
    prev_end = prev_floor = 0.0
    last = None
    while True:
        spk = _choose_speaker(speakers, usage, last, rng)
        rec = queues[spk].pop()
        d = rec.duration
        ov = 0.0
        if not placements:
            start = rng.uniform(lo, hi)
        else:
            start = prev_end + rng.uniform(lo, hi)
            if r > 0:
                measured = l_ovl / l_all if l_all > 0 else 0.0
                p = float(np.clip(p_base + gain * (r - measured) / r, 0.05, 1.0))
                room = min(prev_end - prev_floor, d - min_tail)
                if room > 0.05 and rng.random() < p:
                    nominal = r * d / ((1 + r) * p_base)
                    boost = float(np.clip(1 + gain * (r - measured) / r, 0.25, 3.0))
                    ov = min(room, nominal * boost * rng.uniform(0.5, 1.5))
                    start = max(prev_end - ov, prev_floor)
                    ov = prev_end - start
        end = start + d
        if end > target_duration:
            break
        placements.append(Placement(rec.utterance_id, spk, pos_of[spk], float(start), float(end)))
        usage[spk] += 1
        l_ovl += ov
        l_all += d - ov
        # the next overlap may not reach back past the current one's start or
        # the end of the one before it
        prev_floor = max(prev_end, start)
        prev_end = end
        last = spk
    return placements


def plan_session(pool, spec: OverlapSpec, n_speakers: int, target_duration: float, seed,
                 tolerance: float = 0.02, max_attempts: int = 50) -> SessionPlan:
    """Greedy overlap-controlled timeline.

    Each new utterance comes from a speaker other than the one whose utterance
    is currently ending.  It either starts before that utterance ends or after
    a silence drawn from ``spec.silence_range``; the overlap probability and
    amount are pushed up or down according to how far the running overlap
    ratio sits from the target.  Positions are speaker indices into the
    session's loudspeaker list.  For sessions of at least 600 s a plan is
    re-drawn until its overlap ratio is within ``tolerance`` of the target.
    """
    speakers_all = sorted({r.speaker_id for r in pool})
    if len(speakers_all) < n_speakers:
        raise PoolError(f"pool has {len(speakers_all)} speakers, need {n_speakers}")
    if spec.target_ovr > 0 and n_speakers < 2:
        raise ValueError("overlap needs at least two speakers")
    if n_speakers < 1:
        raise ValueError("need at least one speaker")
    rng = np.random.default_rng(seed)
    speakers = sorted(rng.choice(speakers_all, n_speakers, replace=False).tolist())
    by_spk = {s: [r for r in pool if r.speaker_id == s] for s in speakers}
    best, best_err = None, np.inf
    for _ in range(max_attempts):
        queues = {s: _Queue(by_spk[s], rng) for s in speakers}
        placements = _build_timeline(queues, speakers, spec, target_duration, rng)
        plan = SessionPlan(tuple(placements), float(target_duration), seed)
        err = abs(measure_overlap(plan) - spec.target_ovr)
        if err < best_err:
            best, best_err = plan, err
        if err <= tolerance or target_duration < 600:
            return plan if err <= tolerance else best
    raise ValueError(f"could not reach OVR {spec.target_ovr} within {tolerance} "
                     f"(best deviation {best_err:.3f})")


@dataclass(frozen=True)
class TruthEntry:
    utterance_id: str
    speaker_id: str
    start: float
    end: float
    words: tuple[str, ...]


@dataclass(frozen=True)
class SegmentationTruth:
    entries: tuple[TruthEntry, ...]
    duration: float

    def active_count(self, t: float) -> int:
        return sum(e.start <= t < e.end for e in self.entries)

    def silences(self) -> list[tuple[float, float]]:
        """Maximal intervals of [0, duration] where nobody is active."""
        out, cursor = [], 0.0
        for s, e in merge_intervals([(x.start, x.end) for x in self.entries]):
            if s > cursor:
                out.append((cursor, s))
            cursor = max(cursor, e)
        if cursor < self.duration:
            out.append((cursor, self.duration))
        return out


def merge_intervals(intervals):
    merged = []
    for s, e in sorted(intervals):
        if merged and s <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
        else:
            merged.append((s, e))
    return merged


def truth_from_plan(plan: SessionPlan, pool_index: dict) -> SegmentationTruth:
    return SegmentationTruth(
        tuple(TruthEntry(p.utterance_id, p.speaker_id, p.start, p.end,
                         tuple(pool_index[p.utterance_id].transcript))
              for p in plan.placements),
        plan.duration)


def draw_positions(room: RoomSpec, center, n: int, rng, distance=SPEAKER_DISTANCE,
                   height=(1.0, 1.8), margin: float = 0.3, min_separation: float = 0.3):
    """Loudspeaker positions uniform in the room, within ``distance`` of ``center``."""
    c = np.asarray(center, dtype=float)
    dims = np.asarray(room.dimensions)
    pts = []
    for _ in range(100000):
        if len(pts) == n:
            break
        p = np.array([rng.uniform(margin, dims[0] - margin), rng.uniform(margin, dims[1] - margin),
                      rng.uniform(*height)])
        d = np.linalg.norm(p - c)
        if not distance[0] <= d <= distance[1]:
            continue
        if any(np.linalg.norm(p - q) < min_separation for q in pts):
            continue
        pts.append(p)
    if len(pts) < n:
        raise ValueError("could not place loudspeakers; room too small for the distance band")
    return np.array(pts)


@dataclass(frozen=True)
class UtteranceImage:
    """Reverberant image of one placed utterance, ``samples`` (channels, length)."""

    utterance_id: str
    speaker_id: str
    start: int
    samples: np.ndarray
    dry_start: int
    dry_end: int

    @property
    def stop(self) -> int:
        return self.start + self.samples.shape[1]


@dataclass
class RenderedSession:
    mixture: Waveform
    truth: SegmentationTruth
    references: list[UtteranceImage]
    noise: np.ndarray
    reference_channels: tuple[int, ...]
    noise_gain: float = 0.0


@dataclass(frozen=True)
class SessionSetup:
    """Everything besides the plan that a render needs."""

    room: RoomSpec
    geometry: ArrayGeometry
    positions: np.ndarray
    noise_snr_db: float | None = 10.0


def default_setup(rng, n_positions: int = 8, t60: float = 0.3,
                  dimensions=(7.0, 6.0, 3.0), noise_snr_db: float | None = 15.0) -> SessionSetup:
    room = RoomSpec(dimensions, t60)
    center = np.array([dimensions[0] / 2, dimensions[1] / 2, 0.8])
    center[:2] += rng.uniform(-0.3, 0.3, 2)
    geometry = ArrayGeometry.circular7(center)
    positions = draw_positions(room, geometry.mic_positions[0], n_positions, rng)
    return SessionSetup(room, geometry, positions, noise_snr_db)


def render_session(plan: SessionPlan, pool, setup: SessionSetup, seed,
                   reference_channels=None, sample_rate: int = SAMPLE_RATE) -> RenderedSession:
    """Mixture = sum of reverberant placements + isotropic noise at ``noise_snr_db``.

    The noise level is set against the total speech on channel 0.  Reference
    images and the scaled noise are kept for ``reference_channels`` (all
    channels by default); the mixture equals their sum exactly.
    """
    index = {r.utterance_id: r for r in pool}
    M = setup.geometry.n_mics
    chans = tuple(range(M)) if reference_channels is None else tuple(reference_channels)
    length = int(round(plan.duration * sample_rate))
    canvas = np.zeros((M, length))
    rirs = {}
    refs = []
    for p in plan.placements:
        if p.position >= len(setup.positions):
            raise ValueError(f"placement {p.utterance_id} uses undefined position {p.position}")
        if p.position not in rirs:
            rirs[p.position] = image_method_rir(setup.room, setup.positions[p.position],
                                                setup.geometry, sample_rate=sample_rate)
        start = int(round(p.start * sample_rate))
        dry = Waveform(index[p.utterance_id].load(sample_rate), sample_rate)
        image = reverberant_image(dry, rirs[p.position])[:, :max(0, length - start)]
        canvas[:, start:start + image.shape[1]] += image
        refs.append(UtteranceImage(p.utterance_id, p.speaker_id, start, image[list(chans)].copy(),
                                   start, start + dry.length))
    gain = 0.0
    noise_ref = np.zeros((len(chans), length))
    if setup.noise_snr_db is not None and length > 0:
        noise = isotropic_noise(setup.geometry, plan.duration, _child_seed(seed, 1), sample_rate)
        gain = snr_gain(canvas[0], noise.samples[0], setup.noise_snr_db)
        noise_ref = gain * noise.samples[list(chans)]
        canvas += gain * noise.samples
        del noise
    truth = truth_from_plan(plan, index)
    return RenderedSession(Waveform(canvas, sample_rate), truth, refs, noise_ref, chans, gain)


def _child_seed(seed, k: int) -> int:
    ss = np.random.SeedSequence(0 if seed is None else seed)
    return int(ss.spawn(k + 1)[k].generate_state(1)[0])


def make_libricss_suite(pool, seed, target_duration: float = 600.0, n_speakers: int = 8,
                        utterance_range=SUITE_UTTERANCES, max_attempts: int = 20,
                        conditions=CONDITIONS):
    """One plan per condition in ``CONDITIONS``, each with its own ``n_speakers``.

    Utterance counts are checked against ``utterance_range`` only for
    full-length (>= 600 s) mini sessions.  Seeds depend on the condition's
    position in ``CONDITIONS``, so a subset plans exactly as in the full suite.
    """
    if len({r.speaker_id for r in pool}) < n_speakers:
        raise PoolError(f"suite needs a pool with at least {n_speakers} speakers")
    suite = {}
    for i, cond in enumerate(CONDITIONS):
        if cond not in conditions:
            continue
        spec = condition_spec(cond)
        for attempt in range(max_attempts):
            sub = _child_seed(seed, 100 * i + attempt)
            plan = plan_session(pool, spec, n_speakers, target_duration, sub)
            n = len(plan.placements)
            if target_duration < 600 or utterance_range[0] <= n <= utterance_range[1]:
                break
        else:
            raise PoolError(f"{cond}: utterance count {n} outside {utterance_range}")
        if len(plan.speakers) != n_speakers:
            raise PoolError(f"{cond}: only {len(plan.speakers)} speakers placed")
        suite[cond] = plan
    return suite


# -- session manifest ---------------------------------------------------------

def session_manifest(session_id: str, condition: str, seed, plan: SessionPlan,
                     setup: SessionSetup, truth: SegmentationTruth, **extra) -> dict:
    doc = {
        "session_id": session_id,
        "condition": condition,
        "seed": seed,
        "duration": plan.duration,
        "sample_rate": SAMPLE_RATE,
        "room": {"dims": list(setup.room.dimensions), "t60": setup.room.t60,
                 "speed_of_sound": setup.room.speed_of_sound},
        "geometry": setup.geometry.mic_positions.tolist(),
        "positions": np.asarray(setup.positions).tolist(),
        "noise_snr_db": setup.noise_snr_db,
        "placements": [{"utt": p.utterance_id, "spk": p.speaker_id, "pos": p.position,
                        "start": p.start, "end": p.end} for p in plan.placements],
        "truth": [{"utt": e.utterance_id, "spk": e.speaker_id, "start": e.start, "end": e.end,
                   "words": " ".join(e.words)} for e in truth.entries],
    }
    doc.update(extra)
    return doc


def plan_from_manifest(doc: dict) -> SessionPlan:
    return SessionPlan(tuple(Placement(p["utt"], p["spk"], int(p["pos"]), float(p["start"]),
                                       float(p["end"])) for p in doc["placements"]),
                       float(doc["duration"]), doc.get("seed"))


def setup_from_manifest(doc: dict) -> SessionSetup:
    room = RoomSpec(tuple(doc["room"]["dims"]), float(doc["room"]["t60"]),
                    float(doc["room"].get("speed_of_sound", 343.0)))
    return SessionSetup(room, ArrayGeometry(np.array(doc["geometry"])),
                        np.array(doc["positions"]), doc.get("noise_snr_db"))


def truth_from_manifest(doc: dict) -> SegmentationTruth:
    return SegmentationTruth(
        tuple(TruthEntry(t["utt"], t["spk"], float(t["start"]), float(t["end"]),
                         tuple(t["words"].split())) for t in doc["truth"]),
        float(doc["duration"]))


def write_manifest(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
