"""Command line front end: ``csskit make-pool | simulate | separate | score``.

Every output directory gets an ``artifacts.json`` mapping each written file
to its SHA-256, so reruns with the same seed can be compared byte for byte.
Sessions are processed concurrently on ``CSSKIT_THREADS`` worker threads
(default 1).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import conversation as conv
from .conversation import CONDITIONS, PoolError
from .css import (ChunkConfig, ExternalMasks, MaskFileError, OracleIRM, load_external_masks,
                  plan_chunks, run_css, save_masks)
from .beamform import save_weights
from .room import CHANNEL_SUBSETS
from .scoring import (ConditionResult, Transcript, TranscriptError, WerReport, continuous_eval,
                      read_transcripts, refs_from_truth, report, signal_eval, utterance_eval)
from .segmenter import cut_long_segments, energy_vad
from .signal import SAMPLE_RATE, StftConfig, WavFormatError, Waveform, read_wav, write_wav

log = logging.getLogger("csskit")

DEFAULTS = {
    "duration": 600.0,
    "n_speakers": 8,
    "t60": 0.3,
    "room_dims": [7.0, 6.0, 3.0],
    "noise_snr_db": 15.0,
    "reference_channels": [0, 1],
    "conditions": list(CONDITIONS),
    "chunk": "1.2,0.8,0.4",
    "mode": "mvdr",
    "channels": "7ch",
    "segment_min": 60.0,
    "segment_max": 120.0,
}


class CliError(Exception):
    category = "error"
    code = 1


class UsageError(CliError):
    category, code = "usage error", 2


class InputError(CliError):
    category, code = "input error", 3


class OutputError(CliError):
    category, code = "output error", 4


# -- helpers ---------------------------------------------------------------------

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_artifacts(root: Path, files) -> None:
    """Merge checksums of ``files`` into ``root/artifacts.json``."""
    path = root / "artifacts.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    for f in files:
        doc[str(Path(f).relative_to(root))] = sha256(Path(f))
    path.write_text(json.dumps(dict(sorted(doc.items())), indent=2) + "\n")


def load_config(path) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        try:
            cfg.update(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f"cannot read session config {path}: {e}") from e
    return cfg


def override(cfg: dict, args, keys) -> dict:
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def parse_channels(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(c) for c in text)
    if text in CHANNEL_SUBSETS:
        return CHANNEL_SUBSETS[text]
    try:
        chans = tuple(int(c) for c in str(text).split(","))
    except ValueError as e:
        raise UsageError(f"bad channel list {text!r}") from e
    if len(set(chans)) != len(chans) or not chans:
        raise UsageError(f"bad channel list {text!r}")
    return chans


def workers() -> int:
    try:
        return max(1, int(os.environ.get("CSSKIT_THREADS", "1")))
    except ValueError as e:
        raise UsageError("CSSKIT_THREADS must be an integer") from e


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create {path}: {e}") from e
    if not os.access(path, os.W_OK):
        raise OutputError(f"{path} is not writable")
    return path


def _run_all(fn, items):
    with ThreadPoolExecutor(workers()) as ex:
        return list(ex.map(fn, items))


def _session_dirs(root: Path) -> list[Path]:
    suite = root / "suite.json"
    if not suite.exists():
        raise InputError(f"{root} holds no simulated suite (suite.json missing)")
    return [root / s for s in json.loads(suite.read_text())["sessions"]]


# -- make-pool -------------------------------------------------------------------

def cmd_make_pool(args) -> int:
    from .synth import synth_pool
    out = _mkdir(Path(args.out))
    synth_pool(args.speakers, args.utterances, seed=args.seed, directory=out)
    files = sorted(out.glob("*.wav")) + [out / "pool.tsv"]
    write_artifacts(out, files)
    print(f"wrote {len(files) - 1} utterances to {out}")
    return 0


# -- simulate --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = override(load_config(args.config), args,
                   ["duration", "n_speakers", "t60", "noise_snr_db"])
    conds = args.conditions.split(",") if args.conditions else cfg["conditions"]
    bad = [c for c in conds if c not in CONDITIONS]
    if bad:
        raise UsageError(f"unknown conditions {bad}; choose from {','.join(CONDITIONS)}")
    try:
        pool = conv.load_pool(args.pool)
    except (OSError, PoolError, WavFormatError, ValueError) as e:
        raise InputError(f"cannot load utterance pool {args.pool}: {e}") from e
    n_spk = int(cfg["n_speakers"])
    if len({r.speaker_id for r in pool}) < n_spk:
        raise InputError(f"the pool needs at least {n_spk} speakers, "
                         f"found {len({r.speaker_id for r in pool})}")
    out = _mkdir(Path(args.out))
    seed = args.seed
    try:
        suite = conv.make_libricss_suite(pool, seed, float(cfg["duration"]), n_spk,
                                         conditions=conds)
    except (PoolError, ValueError) as e:
        raise InputError(str(e)) from e
    chans = tuple(cfg["reference_channels"])
    jobs = [(i, c) for i, c in enumerate(CONDITIONS) if c in conds]

    def one(job):
        i, cond = job
        sid = f"session_{cond}"
        d = _mkdir(out / sid)
        sub = conv._child_seed(seed, 1000 + i)
        rng = np.random.default_rng(sub)
        setup = conv.default_setup(rng, n_positions=n_spk, t60=float(cfg["t60"]),
                                   dimensions=tuple(cfg["room_dims"]),
                                   noise_snr_db=cfg["noise_snr_db"])
        plan = suite[cond]
        rendered = conv.render_session(plan, pool, setup, sub, reference_channels=chans)
        files = [d / "mixture.wav"]
        write_wav(files[0], rendered.mixture)
        refs = []
        _mkdir(d / "references")
        for n, r in enumerate(rendered.references):
            f = d / "references" / f"{n:03d}_{r.utterance_id}.wav"
            write_wav(f, Waveform(r.samples, SAMPLE_RATE))
            files.append(f)
            refs.append({"utt": r.utterance_id, "spk": r.speaker_id, "start": r.start,
                         "dry_start": r.dry_start, "dry_end": r.dry_end,
                         "file": str(f.relative_to(d))})
        files.append(d / "noise.wav")
        write_wav(files[-1], Waveform(rendered.noise, SAMPLE_RATE))
        cut = cut_long_segments(rendered.truth, cfg["segment_min"], cfg["segment_max"])
        vad = energy_vad(Waveform(rendered.mixture.samples[0], SAMPLE_RATE))
        doc = conv.session_manifest(
            sid, cond, sub, plan, setup, rendered.truth,
            overlap_ratio=conv.measure_overlap(plan), reference_channels=list(chans),
            references=refs, noise_gain=rendered.noise_gain,
            segments={"boundaries": list(cut.boundaries), "flagged": list(cut.flagged)},
            vad_regions=[list(r) for r in vad])
        conv.write_manifest(d / "manifest.json", doc)
        files.append(d / "manifest.json")
        write_artifacts(d, files)
        return sid

    sids = _run_all(one, jobs)
    (out / "suite.json").write_text(json.dumps({"seed": seed, "sessions": sids}, indent=2) + "\n")
    write_artifacts(out, [out / "suite.json"] + [out / s / "artifacts.json" for s in sids])
    print(f"simulated {len(sids)} sessions in {out}")
    return 0


class _LoadedSession:
    def __init__(self, d: Path):
        try:
            self.doc = conv.read_manifest(d / "manifest.json")
            self.mixture = read_wav(d / "mixture.wav")
            noise = read_wav(d / "noise.wav").samples
        except (OSError, ValueError) as e:
            raise InputError(f"{d}: incomplete simulated session ({e})") from e
        self.dir = d
        self.truth = conv.truth_from_manifest(self.doc)
        self.reference_channels = tuple(self.doc["reference_channels"])
        refs = []
        for r in self.doc["references"]:
            s = read_wav(d / r["file"]).samples
            refs.append(conv.UtteranceImage(r["utt"], r["spk"], int(r["start"]), s,
                                            int(r["dry_start"]), int(r["dry_end"])))
        self.rendered = conv.RenderedSession(self.mixture, self.truth, refs, noise,
                                             self.reference_channels)

    @property
    def session_id(self):
        return self.doc["session_id"]

    def segments(self):
        b = [0.0, *self.doc["segments"]["boundaries"], self.truth.duration]
        rate = self.mixture.sample_rate
        return [(int(round(x * rate)), int(round(y * rate))) for x, y in zip(b[:-1], b[1:])]


# -- separate --------------------------------------------------------------------

def cmd_separate(args) -> int:
    cfg = override(load_config(args.config), args, ["chunk", "mode", "channels"])
    stft_cfg = StftConfig()
    try:
        chunk_cfg = ChunkConfig.parse(str(cfg["chunk"]), stft_cfg)
    except ValueError as e:
        raise UsageError(f"bad chunk triple {cfg['chunk']!r}: {e}") from e
    if cfg["mode"] not in ("masking", "mvdr"):
        raise UsageError(f"unknown mode {cfg['mode']!r}")
    chans = parse_channels(cfg["channels"])
    estimator = args.estimator
    if estimator != "oracle" and not estimator.startswith("file:"):
        raise UsageError("estimator must be 'oracle' or 'file:DIR'")
    out = _mkdir(Path(args.out))
    sessions = _session_dirs(Path(args.sessions))
    latency = chunk_cfg.latency_seconds(stft_cfg)

    def one(d: Path):
        s = _LoadedSession(d)
        M = s.mixture.n_channels
        if max(chans) >= M:
            raise UsageError(f"channel subset {chans} invalid for a {M}-channel array")
        ref = chans[0]
        if estimator == "oracle" and ref not in s.reference_channels:
            raise InputError(f"oracle masks need references on channel {ref}; "
                             f"session has {s.reference_channels}")
        od = _mkdir(out / s.session_id)
        if args.dump_masks:
            _mkdir(od / "masks")
        files = []
        mix = s.mixture.select(chans)
        if args.utterance_wise:
            spans = [(r.dry_start, min(r.dry_end, mix.length)) for r in s.rendered.references]
            names = [f"utt{n:03d}" for n in range(len(s.rendered.references))]
            _mkdir(od / "utterances")
        else:
            spans = s.segments()
            names = [f"seg{k:02d}" for k in range(len(spans))]
        streams = np.zeros((2, mix.length))
        weights = []
        for (a, b), name in zip(spans, names):
            piece = mix.crop(a, b)
            cfg_k = None if args.utterance_wise else chunk_cfg
            n_frames = stft_cfg.frames_for(b - a)
            chunks = plan_chunks(n_frames, cfg_k or ChunkConfig(0, n_frames, 0))
            if estimator == "oracle":
                est = OracleIRM.from_session(s.rendered, ref, a, b, stft_cfg)
                masksets = None
            else:
                path = Path(estimator[5:]) / s.session_id / "masks" / f"{name}.cssm"
                try:
                    masksets = load_external_masks(path, chunks, stft_cfg.n_bins)
                except MaskFileError as e:
                    raise InputError(f"estimator file mismatch: {e}") from e
                est = ExternalMasks(masksets)
            res = run_css(piece, cfg_k, est, mode=cfg["mode"], ref_channel=0, stft_cfg=stft_cfg,
                          interferer_in_noise=not args.noise_only_scm,
                          scm_scope="chunk" if args.scm_scope == "chunk" else "input",
                          masksets=masksets)
            if args.dump_masks:
                f = od / "masks" / f"{name}.cssm"
                save_masks(f, res.masksets)
                files.append(f)
            if res.weights is not None:
                weights.append(res.weights)
            if args.utterance_wise:
                for k in range(2):
                    f = od / "utterances" / f"{name}_s{k}.wav"
                    write_wav(f, res.streams[k])
                    files.append(f)
            else:
                streams[:, a:b] = np.stack([w.samples[0] for w in res.streams])
        if not args.utterance_wise:
            for k in range(2):
                f = od / f"stream{k}.wav"
                write_wav(f, Waveform(streams[k], SAMPLE_RATE))
                files.append(f)
        if args.dump_weights and weights:
            f = od / "weights.cssw"
            save_weights(f, weights)
            files.append(f)
        record = {"session_id": s.session_id, "condition": s.doc["condition"],
                  "mode": cfg["mode"], "channels": list(chans), "reference_channel": ref,
                  "estimator": estimator, "utterance_wise": bool(args.utterance_wise),
                  "chunk_frames": [chunk_cfg.n_left, chunk_cfg.n_center, chunk_cfg.n_right],
                  "latency_s": None if args.utterance_wise else latency,
                  "scm_scope": args.scm_scope, "interferer_in_noise": not args.noise_only_scm,
                  "inputs": names}
        f = od / "separation.json"
        f.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        files.append(f)
        write_artifacts(od, files)
        return s.session_id

    sids = _run_all(one, sessions)
    print(f"separated {len(sids)} sessions; inherent latency {latency:.3f} s")
    return 0


# -- score -----------------------------------------------------------------------

def cmd_score(args) -> int:
    if not args.signal_only and not args.transcripts:
        raise UsageError("need --transcripts DIR or --signal-only")
    sessions = _session_dirs(Path(args.sessions))
    sep = Path(args.separated)
    results: dict[str, ConditionResult] = {}

    def one(d: Path):
        s = _LoadedSession(d)
        od = sep / s.session_id
        rec_path = od / "separation.json"
        if not rec_path.exists():
            raise InputError(f"no separated output for {s.session_id} in {sep}")
        rec = json.loads(rec_path.read_text())
        utt_wise = rec["utterance_wise"]
        ref_ch = rec["reference_channel"]
        k = s.reference_channels.index(ref_ch)
        res = ConditionResult()
        if args.signal_only or args.with_signal:
            if utt_wise:
                vals = []
                for n, r in enumerate(s.rendered.references):
                    outs = [read_wav(od / "utterances" / f"utt{n:03d}_s{j}.wav")
                            for j in range(2)]
                    vals.append(signal_eval(outs, [r], channel=k, offset=r.dry_start)[0].best)
            else:
                outs = [read_wav(od / f"stream{j}.wav") for j in range(2)]
                vals = [row.best for row in signal_eval(outs, s.rendered.references, channel=k)]
            res.si_snr = vals
        if args.transcripts:
            tpath = Path(args.transcripts) / f"{s.session_id}.tsv"
            try:
                tsid, streams = read_transcripts(tpath)
            except (OSError, TranscriptError) as e:
                raise InputError(f"cannot read transcripts {tpath}: {e}") from e
            if tsid is not None and tsid != s.session_id:
                raise InputError(f"transcript session id {tsid!r} does not match audio "
                                 f"session {s.session_id!r}")
            ids = sorted(streams)
            if len(ids) > 2:
                raise InputError(f"{tpath}: expected at most two streams, found {ids}")
            hyps = [streams.get(i) for i in ids] + [None] * (2 - len(ids))
            hyps = [h if h is not None else Transcript(str(j)) for j, h in enumerate(hyps)]
            total = WerReport()
            if utt_wise:
                for e in s.truth.entries:
                    h = [t.words_in(e.start, e.end) for t in hyps]
                    total = total + utterance_eval(h[0], h[1], e.words)
            else:
                for a, b in s.segments():
                    seg = (a / SAMPLE_RATE, b / SAMPLE_RATE)
                    total = total + continuous_eval(hyps, refs_from_truth(s.truth, seg), seg).total
            res.wer = total
        return s.doc["condition"], res

    for cond, res in _run_all(one, sessions):
        results[cond] = res
    rep = report(results)
    out = Path(args.out) if args.out else sep
    _mkdir(out)
    files = []
    for ext, text in (("tsv", rep.to_tsv()), ("txt", rep.to_text()), ("json", rep.to_json() + "\n")):
        f = out / f"report.{ext}"
        f.write_text(text)
        files.append(f)
    write_artifacts(out, files)
    sys.stdout.write(rep.to_text())
    return 0


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csskit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    mp = sub.add_parser("make-pool", help="write a synthetic utterance pool")
    mp.add_argument("--out", required=True)
    mp.add_argument("--speakers", type=int, default=10)
    mp.add_argument("--utterances", type=int, default=16)
    mp.add_argument("--seed", type=int, default=0)
    mp.set_defaults(func=cmd_make_pool)

    sm = sub.add_parser("simulate", help="render the six mini sessions")
    sm.add_argument("--pool", required=True, help="directory with pool.tsv")
    sm.add_argument("--out", required=True)
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--config", help="session-config JSON; flags override it")
    sm.add_argument("--conditions", help="comma list, default all of " + ",".join(CONDITIONS))
    sm.add_argument("--duration", type=float)
    sm.add_argument("--n-speakers", dest="n_speakers", type=int)
    sm.add_argument("--t60", type=float)
    sm.add_argument("--snr", dest="noise_snr_db", type=float)
    sm.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("separate", help="run sliding-window separation")
    sp.add_argument("--sessions", required=True, help="output directory of simulate")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--chunk", help="left,center,right seconds, e.g. 1.2,0.8,0.4")
    sp.add_argument("--mode", choices=["masking", "mvdr"])
    sp.add_argument("--channels", help="comma list or one of " + ",".join(CHANNEL_SUBSETS))
    sp.add_argument("--estimator", default="oracle", help="oracle or file:DIR")
    sp.add_argument("--utterance-wise", action="store_true")
    sp.add_argument("--dump-masks", action="store_true")
    sp.add_argument("--dump-weights", action="store_true")
    sp.add_argument("--scm-scope", choices=["segment", "chunk"], default="segment",
                    help="MVDR statistics per input segment (default) or per chunk window")
    sp.add_argument("--noise-only-scm", action="store_true",
                    help="leave the competing speaker out of the MVDR noise covariance")
    sp.set_defaults(func=cmd_separate)

    sc = sub.add_parser("score", help="score separated streams")
    sc.add_argument("--sessions", required=True)
    sc.add_argument("--separated", required=True)
    sc.add_argument("--transcripts", help="directory of <session_id>.tsv files")
    sc.add_argument("--signal-only", action="store_true")
    sc.add_argument("--with-signal", action="store_true", help="add SI-SNR rows to a WER report")
    sc.add_argument("--out")
    sc.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"csskit: {e.category}: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"csskit: output error: {e}", file=sys.stderr)
        return OutputError.code


if __name__ == "__main__":
    sys.exit(main())
