"""WER, the two scoring protocols, SI-SNR tables and condition reports."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .conversation import CONDITIONS, normalize_words
from .signal import si_snr


@dataclass(frozen=True)
class WerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    n_ref: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.n_ref == 0:
            return 0.0 if self.errors == 0 else math.inf
        return self.errors / self.n_ref

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(self.substitutions + other.substitutions, self.deletions + other.deletions,
                         self.insertions + other.insertions, self.n_ref + other.n_ref)

    def as_dict(self) -> dict:
        return {"S": self.substitutions, "D": self.deletions, "I": self.insertions,
                "N": self.n_ref, "wer": self.wer}


def _words(x) -> list[str]:
    return normalize_words(x) if isinstance(x, str) else [w.upper() for w in x]


def wer(hyp, ref) -> WerReport:
    """Levenshtein alignment on words with S/D/I counts.

    Among minimum-cost paths the backtrace prefers the diagonal (match or
    substitution), then deletion, then insertion.
    """
    h, r = _words(hyp), _words(ref)
    n, m = len(r), len(h)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    hs = np.array(h, dtype=object)
    for i in range(1, n + 1):
        sub = d[i - 1, :-1] + (hs != r[i - 1]) if m else np.zeros(0, np.int64)
        row = np.minimum(np.concatenate([[i], sub]), d[i - 1] + 1)
        d[i] = _propagate_insertions(row)
    i, j = n, m
    S = D = I = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (r[i - 1] != h[j - 1]):
            S += r[i - 1] != h[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return WerReport(int(S), D, I, n)


def edit_distance(hyp, ref) -> int:
    return wer(hyp, ref).errors


def utterance_eval(hyp1, hyp2, ref) -> WerReport:
    """Report of the hypothesis with the lower WER; ties go to ``hyp1``."""
    return wer(hyp1, ref) if pick_stream(hyp1, hyp2, ref) == 0 else wer(hyp2, ref)


def pick_stream(hyp1, hyp2, ref) -> int:
    return 0 if wer(hyp1, ref).errors <= wer(hyp2, ref).errors else 1


# -- transcripts -----------------------------------------------------------------

@dataclass(frozen=True)
class TranscriptEntry:
    start: float
    end: float
    words: tuple[str, ...]


@dataclass(frozen=True)
class Transcript:
    stream_id: str
    entries: tuple[TranscriptEntry, ...] = ()

    def __post_init__(self):
        starts = [e.start for e in self.entries]
        if starts != sorted(starts):
            raise ValueError(f"stream {self.stream_id}: entries are not time-sorted")
        if any(not e.words for e in self.entries):
            raise ValueError(f"stream {self.stream_id}: entry without words")

    def words_in(self, start: float, end: float) -> list[str]:
        """Words of entries whose midpoint falls in ``[start, end)``."""
        out = []
        for e in self.entries:
            if start <= 0.5 * (e.start + e.end) < end:
                out.extend(e.words)
        return out


class TranscriptError(ValueError):
    pass


def read_transcripts(path) -> tuple[str | None, dict[str, Transcript]]:
    """``stream_id<TAB>start<TAB>end<TAB>words`` lines; ``#session_id`` header optional."""
    session = None
    rows: dict[str, list[TranscriptEntry]] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            if key.strip() in ("session", "session_id"):
                session = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise TranscriptError(f"{path}:{n}: expected 4 tab-separated fields")
        try:
            s, e = float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise TranscriptError(f"{path}:{n}: bad time stamp") from exc
        words = tuple(normalize_words(parts[3]))
        if words:
            rows.setdefault(parts[0], []).append(TranscriptEntry(s, e, words))
    return session, {k: Transcript(k, tuple(sorted(v, key=lambda x: x.start)))
                     for k, v in rows.items()}


def write_transcripts(path, transcripts: Sequence[Transcript], session_id: str | None = None) -> None:
    lines = [f"#session_id={session_id}"] if session_id else []
    for t in transcripts:
        for e in t.entries:
            lines.append(f"{t.stream_id}\t{e.start:.3f}\t{e.end:.3f}\t{' '.join(e.words)}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- continuous protocol -----------------------------------------------------------

@dataclass(frozen=True)
class RefUtterance:
    start: float
    end: float
    words: tuple[str, ...]
    utterance_id: str = ""


@dataclass
class AlignmentResult:
    assignment: list[int]                  # stream index per reference, time order
    per_stream: list[WerReport]
    total: WerReport
    references: list[RefUtterance] = field(default_factory=list)


def _propagate_insertions(row: np.ndarray) -> np.ndarray:
    """row[j] = min_k<=j row[k] + (j - k), along the last axis."""
    j = np.arange(row.shape[-1])
    return np.minimum.accumulate(row - j, axis=-1) + j


def _segment_costs(r: list[str], h: list[str]) -> np.ndarray:
    """C[a, b] = edit distance of ``r`` against ``h[a:b]`` (inf for b < a).

    One edit-distance recursion over the whole of ``h`` with every start
    offset ``a`` carried as its own row.
    """
    m = len(h)
    j = np.arange(m + 1)
    E = np.where(j[None, :] >= j[:, None], (j[None, :] - j[:, None]).astype(float), np.inf)
    hs = np.array(h, dtype=object)
    for word in r:
        cur = np.empty_like(E)
        cur[:, 0] = E[:, 0] + 1
        cur[:, 1:] = np.minimum(E[:, :-1] + (hs != word).astype(float)[None, :], E[:, 1:] + 1)
        E = _propagate_insertions(cur)
    return E


def _minplus_rows(D: np.ndarray, C: np.ndarray):
    """new[i', j] = min_i D[i, j] + C[i, i'] with argmin; ties to the smallest i."""
    n1, n2 = D.shape
    new = np.full((n1, n2), np.inf)
    arg = np.zeros((n1, n2), dtype=np.int64)
    for ip in range(n1):
        tot = D + C[:, ip:ip + 1]
        k = np.argmin(tot, axis=0)
        new[ip] = tot[k, np.arange(n2)]
        arg[ip] = k
    return new, arg


def _stream_words(hyps, start, end):
    return [t.words_in(start, end) if isinstance(t, Transcript) else list(t) for t in hyps]


def assign_dp(refs: Sequence[Sequence[str]], h1: Sequence[str], h2: Sequence[str]):
    """Exact minimum of ED(R1, h1) + ED(R2, h2) over 2-stream assignments.

    Refs are taken in the given (time) order.  The state after each
    reference is the pair of hypothesis prefixes consumed; a reference
    appended to a stream consumes a contiguous run of that stream's words.
    States that cannot beat a known feasible assignment are pruned.
    """
    h1, h2 = list(h1), list(h2)
    n1, n2 = len(h1) + 1, len(h2) + 1
    ub = _assignment_cost(refs, [0] * len(refs), h1, h2)
    D = np.full((n1, n2), np.inf)
    D[0, 0] = 0.0
    trace = []
    for r in refs:
        r = list(r)
        A, a1 = _minplus_rows(D, _segment_costs(r, h1))
        B, b2 = _minplus_rows(D.T, _segment_costs(r, h2))
        B, b2 = B.T, b2.T
        take2 = B < A
        D = np.where(take2, B, A)
        D[D > ub] = np.inf
        trace.append((take2, a1, b2))
    tail = D + (len(h1) - np.arange(n1))[:, None] + (len(h2) - np.arange(n2))[None, :]
    i, j = np.unravel_index(np.argmin(tail), tail.shape)
    best = tail[i, j]
    assignment = []
    for take2, a1, b2 in reversed(trace):
        if take2[i, j]:
            assignment.append(1)
            j = b2[i, j]
        else:
            assignment.append(0)
            i = a1[i, j]
    return int(best), assignment[::-1]


def _assignment_cost(refs, assignment, h1, h2) -> int:
    r1 = [w for r, a in zip(refs, assignment) if a == 0 for w in r]
    r2 = [w for r, a in zip(refs, assignment) if a == 1 for w in r]
    return edit_distance(h1, r1) + edit_distance(h2, r2)


def assign_exhaustive(refs, h1, h2, limit: int = 12):
    if len(refs) > limit:
        raise ValueError(f"exhaustive search limited to {limit} references")
    best = None
    for assignment in itertools.product((0, 1), repeat=len(refs)):
        c = _assignment_cost(refs, assignment, h1, h2)
        if best is None or c < best[0]:
            best = (c, list(assignment))
    return best


def continuous_eval(hyps: Sequence, refs: Sequence[RefUtterance], segment=None,
                    method: str = "dp") -> AlignmentResult:
    """Speaker-agnostic two-stream WER for one long segment.

    ``hyps`` are two :class:`Transcript` objects (words whose entry midpoint
    lies in ``segment`` are used) or two plain word sequences.  Every
    reference is assigned to exactly one stream.
    """
    if len(hyps) != 2:
        raise ValueError("continuous evaluation expects two hypothesis streams")
    refs = sorted(refs, key=lambda r: (r.start, r.end))
    if segment is None:
        segment = (-math.inf, math.inf)
    h1, h2 = _stream_words(hyps, *segment)
    words = [list(r.words) for r in refs]
    if method == "dp":
        cost, assignment = assign_dp(words, h1, h2)
    elif method == "exhaustive":
        cost, assignment = assign_exhaustive(words, h1, h2)
    else:
        raise ValueError(f"unknown method {method!r}")
    r1 = [w for r, a in zip(words, assignment) if a == 0 for w in r]
    r2 = [w for r, a in zip(words, assignment) if a == 1 for w in r]
    per = [wer(h1, r1), wer(h2, r2)]
    total = per[0] + per[1]
    assert total.errors == cost
    return AlignmentResult(assignment, per, total, refs)


def refs_from_truth(truth, segment=None) -> list[RefUtterance]:
    lo, hi = segment if segment is not None else (-math.inf, math.inf)
    return [RefUtterance(e.start, e.end, tuple(e.words), e.utterance_id) for e in truth.entries
            if lo <= 0.5 * (e.start + e.end) < hi]


# -- signal metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class SignalRow:
    utterance_id: str
    speaker_id: str
    start: float
    end: float
    per_stream: tuple[float, float]

    @property
    def best(self) -> float:
        return max(self.per_stream)


def reference_span(image, start: int, stop: int, channel: int = 0) -> np.ndarray:
    """Reverberant image of one utterance cut to ``[start, stop)`` samples."""
    out = np.zeros(stop - start)
    lo, hi = max(image.start, start), min(image.stop, stop)
    if hi > lo:
        out[lo - start:hi - start] = image.samples[channel, lo - image.start:hi - image.start]
    return out


def signal_eval(outputs, references, channel: int = 0, offset: int = 0) -> list[SignalRow]:
    """Best-stream SI-SNR per utterance over its dry span.

    ``references`` are rendered utterance images; ``offset`` is the session
    sample at which the outputs begin.
    """
    a_out, b_out = (np.asarray(o.samples[0] if hasattr(o, "samples") else o) for o in outputs)
    n = len(a_out)
    rate = getattr(outputs[0], "sample_rate", 16000)
    rows = []
    for img in references:
        s, e = img.dry_start - offset, img.dry_end - offset
        if s < 0 or e > n:
            raise ValueError(f"utterance {img.utterance_id} span [{s}, {e}) outside output length {n}")
        ref = reference_span(img, img.dry_start, img.dry_end, channel)
        rows.append(SignalRow(img.utterance_id, img.speaker_id, img.dry_start / rate,
                              img.dry_end / rate, (si_snr(a_out[s:e], ref), si_snr(b_out[s:e], ref))))
    return rows


# -- reports -----------------------------------------------------------------------

@dataclass
class ConditionResult:
    wer: WerReport | None = None
    si_snr: list[float] | None = None


@dataclass
class Report:
    columns: list[str]
    rows: dict[str, dict[str, float]]
    notices: list[str]

    def to_dict(self) -> dict:
        return {"columns": self.columns, "rows": self.rows, "notices": self.notices}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_tsv(self) -> str:
        lines = ["metric\t" + "\t".join(self.columns)]
        for metric, vals in self.rows.items():
            lines.append(metric + "\t" + "\t".join(_fmt(vals.get(c)) for c in self.columns))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = ["Overlap ratio in %"] + self.columns
        body = [[m] + [_fmt(v.get(c)) for c in self.columns] for m, v in self.rows.items()]
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        out = ["  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip() for r in [head] + body]
        out += [f"note: {n}" for n in self.notices]
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, int):
        return str(v)
    return f"{v:.2f}"


def report(results: dict[str, ConditionResult]) -> Report:
    """Table keyed by condition in the order 0S, 0L, 10, 20, 30, 40."""
    columns, notices = [], []
    rows: dict[str, dict[str, float]] = {}
    extra = [c for c in results if c not in CONDITIONS]
    for cond in list(CONDITIONS) + extra:
        res = results.get(cond)
        if res is None or ((res.wer is None or res.wer.n_ref == 0) and not res.si_snr):
            notices.append(f"condition {cond} has no results and is omitted")
            continue
        columns.append(cond)
        if res.wer is not None and res.wer.n_ref:
            rows.setdefault("WER %", {})[cond] = 100 * res.wer.wer
            rows.setdefault("errors", {})[cond] = res.wer.errors
            rows.setdefault("ref words", {})[cond] = res.wer.n_ref
        if res.si_snr:
            v = np.asarray(res.si_snr, dtype=float)
            rows.setdefault("SI-SNR median dB", {})[cond] = float(np.median(v))
            rows.setdefault("SI-SNR mean dB", {})[cond] = float(np.mean(v))
            rows.setdefault("utterances", {})[cond] = int(len(v))
    return Report(columns, rows, notices)
