import json
import subprocess
import sys

import numpy as np
import pytest

from csskit import conversation as conv
from csskit.cli import main
from csskit.signal import read_wav
from csskit.scoring import Transcript, TranscriptEntry, write_transcripts


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-pool", "--out", str(root / "pool"), "--speakers", "9",
                 "--utterances", "5", "--seed", "1"]) == 0
    args = ["simulate", "--pool", str(root / "pool"), "--conditions", "0S,40",
            "--duration", "80", "--seed", "7"]
    assert main(args + ["--out", str(root / "a")]) == 0
    assert main(args + ["--out", str(root / "b")]) == 0
    return root


def _checksums(d):
    out = {}
    for f in sorted(d.rglob("artifacts.json")):
        out[str(f.relative_to(d))] = json.loads(f.read_text())
    return out


def test_simulate_is_reproducible(work):
    a, b = _checksums(work / "a"), _checksums(work / "b")
    assert a == b
    assert "session_0S/artifacts.json" in a
    suite = json.loads((work / "a" / "suite.json").read_text())
    assert suite["sessions"] == ["session_0S", "session_40"]
    doc = conv.read_manifest(work / "a" / "session_40" / "manifest.json")
    assert doc["condition"] == "40" and "segments" in doc


def test_pool_needs_eight_speakers(tmp_path, capsys):
    assert main(["make-pool", "--out", str(tmp_path / "p"), "--speakers", "5",
                 "--utterances", "2"]) == 0
    code = main(["simulate", "--pool", str(tmp_path / "p"), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert code == 3
    assert err.startswith("csskit: input error:") and "at least 8 speakers" in err


def test_separate_latency_and_channels(work):
    out = work / "sep"
    assert main(["separate", "--sessions", str(work / "a"), "--out", str(out),
                 "--chunk", "1.2,0.8,0.4", "--mode", "mvdr", "--channels", "1,0,4",
                 "--dump-masks", "--dump-weights"]) == 0
    rec = json.loads((out / "session_0S" / "separation.json").read_text())
    assert rec["latency_s"] == pytest.approx(1.2)
    assert rec["channels"] == [1, 0, 4] and rec["reference_channel"] == 1
    assert (out / "session_0S" / "stream0.wav").exists()
    assert (out / "session_0S" / "stream1.wav").exists()
    assert (out / "session_0S" / "weights.cssw").read_bytes()[:4] == b"CSSW"


def test_separate_external_masks_replay(work):
    first = work / "sep_masking"
    assert main(["separate", "--sessions", str(work / "a"), "--out", str(first),
                 "--mode", "masking", "--channels", "0,1", "--dump-masks"]) == 0
    second = work / "sep_replay"
    mask_dir = first / "session_0S" / "masks"
    assert main(["separate", "--sessions", str(work / "a"), "--out", str(second),
                 "--mode", "masking", "--channels", "0,1",
                 "--estimator", f"file:{mask_dir.parent.parent}"]) == 0
    # masks travel as float32, so the replay agrees to float32 precision
    a = read_wav(first / "session_0S" / "stream0.wav").samples
    b = read_wav(second / "session_0S" / "stream0.wav").samples
    assert np.sqrt(np.mean((a - b) ** 2) / np.mean(a ** 2)) < 1e-5


def test_bad_chunk_and_channels(work, capsys):
    assert main(["separate", "--sessions", str(work / "a"), "--out", str(work / "x"),
                 "--chunk", "1.2,0.8"]) == 2
    assert "usage error" in capsys.readouterr().err
    assert main(["separate", "--sessions", str(work / "a"), "--out", str(work / "x"),
                 "--channels", "0,9"]) == 2


def test_score_signal_only(work):
    out = work / "report_sig"
    assert main(["score", "--sessions", str(work / "a"), "--separated", str(work / "sep_masking"),
                 "--signal-only", "--out", str(out)]) == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["columns"] == ["0S", "40"]
    assert doc["rows"]["SI-SNR median dB"]["0S"] > 5


def _oracle_transcripts(work, session, sid=None):
    doc = conv.read_manifest(work / "a" / session / "manifest.json")
    truth = conv.truth_from_manifest(doc)
    tdir = work / f"tr_{sid or session}"
    tdir.mkdir(exist_ok=True)
    entries = tuple(TranscriptEntry(e.start, e.end, e.words) for e in truth.entries)
    write_transcripts(tdir / f"{session}.tsv", [Transcript("0", entries)], session_id=sid or session)
    return tdir, doc


def test_score_with_transcripts(work, tmp_path):
    tdir, _ = _oracle_transcripts(work, "session_0S")
    for s in ("session_40",):
        t2, _ = _oracle_transcripts(work, s)
        (tdir / f"{s}.tsv").write_bytes((t2 / f"{s}.tsv").read_bytes())
    assert main(["score", "--sessions", str(work / "a"), "--separated", str(work / "sep"),
                 "--transcripts", str(tdir), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    # every reference word on one stream: zero errors in the sequential session
    assert doc["rows"]["WER %"]["0S"] == 0.0
    assert doc["rows"]["ref words"]["0S"] > 0


def test_score_session_mismatch(work, tmp_path, capsys):
    tdir, _ = _oracle_transcripts(work, "session_0S", sid="session_99")
    code = main(["score", "--sessions", str(work / "a"), "--separated", str(work / "sep"),
                 "--transcripts", str(tdir), "--out", str(tmp_path)])
    assert code == 3
    assert "does not match" in capsys.readouterr().err


def test_score_requires_transcripts_or_signal(work):
    assert main(["score", "--sessions", str(work / "a"), "--separated", str(work / "sep")]) == 2


def test_missing_suite_is_input_error(tmp_path):
    assert main(["separate", "--sessions", str(tmp_path), "--out", str(tmp_path / "o")]) == 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "csskit", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("make-pool", "simulate", "separate", "score"):
        assert sub in res.stdout


def test_utterance_wise_and_threads(work, monkeypatch):
    outs = []
    for threads in ("1", "2"):
        monkeypatch.setenv("CSSKIT_THREADS", threads)
        out = work / f"utt_{threads}"
        assert main(["separate", "--sessions", str(work / "a"), "--out", str(out),
                     "--mode", "masking", "--utterance-wise"]) == 0
        outs.append(out)
    assert _checksums(outs[0]) == _checksums(outs[1])
    rec = json.loads((outs[0] / "session_40" / "separation.json").read_text())
    assert rec["utterance_wise"] and rec["latency_s"] is None
    assert main(["score", "--sessions", str(work / "a"), "--separated", str(outs[0]),
                 "--signal-only", "--out", str(work / "utt_report")]) == 0
    doc = json.loads((work / "utt_report" / "report.json").read_text())
    assert doc["rows"]["SI-SNR median dB"]["40"] > 5


def test_bad_thread_override(work, monkeypatch):
    monkeypatch.setenv("CSSKIT_THREADS", "many")
    assert main(["separate", "--sessions", str(work / "a"), "--out", str(work / "t")]) == 2
