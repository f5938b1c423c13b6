import itertools
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csskit.conversation import normalize_words
from csskit.scoring import (ConditionResult, RefUtterance, Transcript, TranscriptEntry,
                            TranscriptError, WerReport, assign_dp, continuous_eval, pick_stream,
                            read_transcripts, report, signal_eval, utterance_eval, wer,
                            write_transcripts)

VOCAB = list("abcde")


def brute_edit(h, r):
    """Top-down search over every edit path (memoised)."""
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(r):
            return len(h) - j
        if j == len(h):
            return len(r) - i
        return min(go(i + 1, j + 1) + (r[i] != h[j]), go(i + 1, j) + 1, go(i, j + 1) + 1)
    return go(0, 0)


def brute_continuous(refs, h1, h2):
    best = None
    for a in itertools.product((0, 1), repeat=len(refs)):
        r1 = tuple(w for r, s in zip(refs, a) if s == 0 for w in r)
        r2 = tuple(w for r, s in zip(refs, a) if s == 1 for w in r)
        c = brute_edit(tuple(h1), r1) + brute_edit(tuple(h2), r2)
        best = c if best is None else min(best, c)
    return best


words = st.lists(st.sampled_from(VOCAB), max_size=8)


def test_wer_examples():
    assert wer("a b c", "a b c") == WerReport(0, 0, 0, 3)
    rep = wer("a x c d", "a b c")
    assert (rep.substitutions, rep.deletions, rep.insertions) == (1, 0, 1)
    assert rep.wer == pytest.approx(2 / 3)
    # equal-cost paths: two substitutions beat a deletion/insertion pair
    rep = wer("b a", "a b")
    assert (rep.substitutions, rep.deletions, rep.insertions) == (2, 0, 0)
    assert wer("", "") == WerReport(0, 0, 0, 0)
    assert wer("a b", "").insertions == 2
    assert wer("", "a b").deletions == 2
    assert wer("x y z w", "a").wer == 4.0   # above 100% reported as is


def test_normalisation():
    assert normalize_words("Hello, world! It's") == ["HELLO", "WORLD", "IT'S"]
    assert wer("hello world", "HELLO, WORLD.").errors == 0


@settings(max_examples=300, deadline=None)
@given(h=words, r=words)
def test_wer_matches_brute_force(h, r):
    rep = wer(h, r)
    assert rep.errors == brute_edit(tuple(h), tuple(r))
    # path bookkeeping: hits are the same count seen from both sides
    assert len(r) - rep.substitutions - rep.deletions == len(h) - rep.substitutions - rep.insertions >= 0


@settings(max_examples=100, deadline=None)
@given(h1=words, h2=words, r=words)
def test_utterance_eval_rule(h1, h2, r):
    e1, e2 = wer(h1, r).errors, wer(h2, r).errors
    assert utterance_eval(h1, h2, r).errors == min(e1, e2)
    assert utterance_eval(h1, h2, r).wer == utterance_eval(h2, h1, r).wer
    assert pick_stream(h1, h2, r) == (0 if e1 <= e2 else 1)


def test_utterance_eval_cases():
    assert utterance_eval("a b c", "x y", "a b c").wer == 0
    tie = utterance_eval("a x c", "a b y", "a b c")
    assert tie == wer("a x c", "a b c")
    assert pick_stream("a x c", "a b y", "a b c") == 0


def _refs(ws):
    return [RefUtterance(float(i), float(i) + 1, tuple(w)) for i, w in enumerate(ws)]


def test_continuous_examples():
    single = continuous_eval([["A", "B"], []], _refs([["A", "B"]]))
    assert single.total.errors == 0 and single.assignment == [0]
    overlapped = [RefUtterance(0, 5, ("A", "B")), RefUtterance(0, 5, ("C", "D"))]
    assert continuous_eval([["A", "B"], ["C", "D"]], overlapped).total.errors == 0
    assert continuous_eval([["A", "B", "C", "D"], []], overlapped).total.errors == 0
    assert continuous_eval([["C", "D", "A", "B"], []], overlapped).total.errors > 0
    # a reference nobody transcribed still counts, as deletions
    lost = continuous_eval([["A"], []], _refs([["A"], ["B", "C"]]))
    assert lost.total.errors == 2 and lost.total.deletions == 2


def test_continuous_dp_matches_exhaustive():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = rng.integers(1, 7)
        refs = [list(rng.choice(VOCAB, rng.integers(1, 5))) for _ in range(n)]
        h1 = list(rng.choice(VOCAB, rng.integers(0, 12)))
        h2 = list(rng.choice(VOCAB, rng.integers(0, 12)))
        dp = continuous_eval([h1, h2], _refs(refs))
        ex = continuous_eval([h1, h2], _refs(refs), method="exhaustive")
        assert dp.total.errors == ex.total.errors == brute_continuous(refs, h1, h2)
        assert set(dp.assignment) <= {0, 1}
        assert len(dp.assignment) == n


def test_continuous_uses_segment_window_and_midpoints():
    t1 = Transcript("0", (TranscriptEntry(0, 2, ("A",)), TranscriptEntry(9, 12, ("B",))))
    t2 = Transcript("1", ())
    res = continuous_eval([t1, t2], [RefUtterance(0, 2, ("A",))], segment=(0.0, 10.0))
    assert res.total.errors == 0   # the second entry's midpoint (10.5) is outside


def test_dp_scales(rng):
    refs = [list(rng.choice(VOCAB, 25)) for _ in range(10)]
    h1 = [w for r in refs[::2] for w in r]
    h2 = [w for r in refs[1::2] for w in r]
    cost, a = assign_dp(refs, h1, h2)
    assert cost == 0 and a == [0, 1] * 5


def test_transcript_file_round_trip(tmp_path):
    ts = [Transcript("0", (TranscriptEntry(0.5, 1.25, ("HI", "THERE")),)),
          Transcript("1", (TranscriptEntry(2.0, 3.0, ("OK",)),))]
    write_transcripts(tmp_path / "t.tsv", ts, session_id="session_0S")
    sid, back = read_transcripts(tmp_path / "t.tsv")
    assert sid == "session_0S" and back["0"] == ts[0] and back["1"] == ts[1]
    (tmp_path / "bad.tsv").write_text("0\t1.0\tHELLO\n")
    with pytest.raises(TranscriptError):
        read_transcripts(tmp_path / "bad.tsv")


class _Img:
    def __init__(self, samples, start, uid):
        self.samples = samples[None]
        self.start, self.stop = start, start + len(samples)
        self.dry_start, self.dry_end = start, start + len(samples)
        self.utterance_id, self.speaker_id = uid, "s"


def test_signal_eval_cap_and_swap(rng):
    n = 16000
    a, b = np.zeros(n), np.zeros(n)
    a[1000:5000] = rng.standard_normal(4000)
    b[3000:9000] = rng.standard_normal(6000)
    refs = [_Img(a[1000:5000], 1000, "u0"), _Img(b[3000:9000], 3000, "u1")]
    rows = signal_eval([a, b], refs)
    assert [r.best for r in rows] == [60.0, 60.0]
    mix = a + b
    fwd = signal_eval([mix, a], refs)
    rev = signal_eval([a, mix], refs)
    assert [r.best for r in fwd] == [r.best for r in rev]
    with pytest.raises(ValueError):
        signal_eval([a[:4000], b[:4000]], refs)


def test_report_layout():
    res = {"40": ConditionResult(si_snr=[1.0, 3.0]), "0S": ConditionResult(wer=WerReport(1, 0, 0, 10)),
           "10": ConditionResult()}
    rep = report(res)
    assert rep.columns == ["0S", "40"]
    assert any("10" in n for n in rep.notices)
    tsv = rep.to_tsv().splitlines()
    assert tsv[0].split("\t") == ["metric", "0S", "40"]
    doc = rep.to_dict()
    for line in tsv[1:]:
        metric, *vals = line.split("\t")
        for col, v in zip(rep.columns, vals):
            got = doc["rows"][metric].get(col)
            assert v == "-" if got is None else float(v) == pytest.approx(got, abs=5e-3)
    full = report({c: ConditionResult(si_snr=[0.0]) for c in ["40", "30", "20", "10", "0L", "0S"]})
    assert full.columns == ["0S", "0L", "10", "20", "30", "40"]
