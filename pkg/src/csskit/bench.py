"""Suite-level drivers: render mini sessions and score them utterance by utterance."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import conversation as conv
from .css import OracleIRM, run_css
from .scoring import reference_span
from .signal import si_snr


@dataclass
class UtteranceScores:
    condition: str
    scores: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def median(self, key: str) -> float:
        return float(np.median(self.scores[key]))


def score_utterance_wise(rendered: conv.RenderedSession, modes=("masking", "mvdr"),
                         ref_channel: int = 0, channels=None, condition: str = "") -> UtteranceScores:
    """Best-stream SI-SNR per utterance, each utterance separated as one batch.

    The unprocessed reference-channel mixture is scored under ``"mixture"``.
    ``channels`` restricts the array used by the beamformer; the first
    entry is the reference channel.
    """
    t0 = time.perf_counter()
    chans = tuple(range(rendered.mixture.n_channels)) if channels is None else tuple(channels)
    if channels is not None:
        ref_channel = chans[0]
    k = rendered.reference_channels.index(ref_channel)
    mix_all = rendered.mixture.select(chans)
    out = UtteranceScores(condition, {"mixture": [], **{m: [] for m in modes}})
    for img in rendered.references:
        a, b = img.dry_start, min(img.dry_end, mix_all.length)
        ref = reference_span(img, a, b, k)
        piece = mix_all.crop(a, b)
        out.scores["mixture"].append(si_snr(piece.samples[0], ref))
        est = OracleIRM.from_session(rendered, ref_channel, a, b)
        for mode in modes:
            res = run_css(piece, None, est, mode=mode, ref_channel=0)
            out.scores[mode].append(max(si_snr(s.samples[0], ref) for s in res.streams))
    out.seconds = time.perf_counter() - t0
    return out


def run_suite(pool, seed, target_duration: float = 600.0, conditions=conv.CONDITIONS,
              t60: float = 0.3, noise_snr_db: float = 15.0, modes=("masking", "mvdr"),
              progress=None) -> dict[str, UtteranceScores]:
    """Plan, render and score each condition in turn (one session in memory at a time)."""
    suite = conv.make_libricss_suite(pool, seed, target_duration, conditions=conditions)
    results = {}
    for i, cond in enumerate(conv.CONDITIONS):
        if cond not in conditions:
            continue
        t0 = time.perf_counter()
        sub = conv._child_seed(seed, 1000 + i)
        setup = conv.default_setup(np.random.default_rng(sub), t60=t60, noise_snr_db=noise_snr_db)
        rendered = conv.render_session(suite[cond], pool, setup, sub, reference_channels=(0,))
        res = score_utterance_wise(rendered, modes, condition=cond)
        res.seconds = time.perf_counter() - t0
        results[cond] = res
        del rendered
        if progress:
            progress(cond, res)
    return results
