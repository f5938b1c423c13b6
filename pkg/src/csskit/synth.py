"""Speech-like test material: pulse-train "syllables" with moving formants.

Stands in for LibriSpeech when no corpus is at hand.  Each speaker has its own
pitch range and vocal-tract scale, each utterance is a run of syllables with
short intra-utterance pauses, and every utterance comes with a pseudo-word
transcript so the scoring path has something to chew on.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .signal import SAMPLE_RATE, Waveform, istft, stft, write_wav

# (F1, F2, F3) in Hz for a handful of vowels of an adult male voice
_VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [530, 1840, 2480], [660, 1720, 2410],
    [300, 870, 2240], [570, 840, 2410], [440, 1020, 2240], [490, 1350, 1690],
])
_BANDWIDTHS = np.array([90.0, 110.0, 170.0])
_ONSETS = ["b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "sh", "th", "w", "z"]
_NUCLEI = ["a", "e", "i", "o", "u", "ai", "ou", "ee"]


@dataclass(frozen=True)
class SpeakerVoice:
    speaker_id: str
    f0: float
    tract_scale: float
    tilt: float


def make_voice(speaker_id: str, rng: np.random.Generator) -> SpeakerVoice:
    female = rng.random() < 0.5
    f0 = rng.uniform(170, 240) if female else rng.uniform(90, 140)
    scale = rng.uniform(1.1, 1.22) if female else rng.uniform(0.92, 1.05)
    return SpeakerVoice(speaker_id, f0, scale, rng.uniform(0.6, 1.0))


def vocabulary(size: int = 400, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    words: set[str] = set()
    while len(words) < size:
        n = rng.integers(1, 4)
        words.add("".join(rng.choice(_ONSETS) + rng.choice(_NUCLEI) for _ in range(n)).upper())
    return sorted(words)


def synth_utterance(voice: SpeakerVoice, duration: float, rng: np.random.Generator,
                    sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """About ``duration`` seconds of speech-like signal at -26 dBFS RMS."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    # syllable grid with word-level pauses
    bounds, voiced = [0.0], []
    while bounds[-1] < duration:
        if voiced and rng.random() < 0.12:
            bounds.append(bounds[-1] + rng.uniform(0.08, 0.25))
            voiced.append(False)
        bounds.append(bounds[-1] + rng.uniform(0.14, 0.3))
        voiced.append(True)
    bounds = np.minimum(np.array(bounds), duration)
    seg = np.clip(np.searchsorted(bounds, t, side="right") - 1, 0, len(voiced) - 1)
    voiced = np.array(voiced)

    # piecewise-linear formant tracks between per-syllable vowel targets
    targets = _VOWELS[rng.integers(0, len(_VOWELS), len(voiced))] * voice.tract_scale
    centers = 0.5 * (bounds[:-1] + bounds[1:])
    formants = np.stack([np.interp(t, centers, targets[:, k]) for k in range(3)], axis=1)

    # f0 with declination and slow wander; glottal pulses at phase wraps
    drift = np.cumsum(rng.standard_normal(n)) / np.sqrt(sample_rate) * 0.6
    f0 = voice.f0 * (1.1 - 0.2 * t / max(duration, 1e-3)) * np.exp(0.08 * np.tanh(drift))
    cycles = np.cumsum(f0) / sample_rate
    source = np.diff(np.floor(cycles), prepend=0.0) + 0.02 * rng.standard_normal(n)

    # vocal-tract envelope applied frame by frame
    S = stft(Waveform(source, sample_rate))
    centers_t = np.clip(np.arange(S.n_frames) * S.config.hop_length, 0, n - 1)
    freqs = np.maximum(S.frequencies(), 50.0)
    fr = formants[centers_t]                                   # (frames, 3)
    env = np.zeros((S.n_frames, S.n_bins))
    for j in range(3):
        env += _BANDWIDTHS[j] ** 2 / ((freqs[None, :] - fr[:, j:j + 1]) ** 2 + _BANDWIDTHS[j] ** 2)
    env *= (freqs / 100.0) ** (-voice.tilt)
    out = istft(S.with_bins(S.bins * env[None])).samples[0]

    # syllable envelopes: raised-cosine bumps on voiced segments
    rel = (t - bounds[seg]) / np.maximum(bounds[seg + 1] - bounds[seg], 1e-3)
    env = np.where(voiced[seg], np.sin(np.pi * np.clip(rel, 0, 1)) ** 0.6, 0.0)
    env *= np.repeat(rng.uniform(0.5, 1.0, len(voiced)), np.bincount(seg, minlength=len(voiced)))
    out *= env

    # fricative bursts at some syllable onsets
    fric = lfilter([1, -0.95], [1], rng.standard_normal(n))
    burst = np.zeros(n)
    for i in np.flatnonzero(voiced & (rng.random(len(voiced)) < 0.35)):
        a = int(bounds[i] * sample_rate)
        L = int(rng.uniform(0.03, 0.07) * sample_rate)
        burst[a:a + L] = np.hanning(L)[: max(0, min(L, n - a))] * 0.3
    out += fric * burst

    fade = min(n // 2, int(0.01 * sample_rate))
    ramp = np.linspace(0, 1, fade)
    out[:fade] *= ramp
    out[n - fade:] *= ramp[::-1]
    rms = np.sqrt(np.mean(out ** 2))
    return out * (10 ** (-26 / 20) / rms) if rms > 0 else out


def synth_transcript(duration: float, words: list[str], rng: np.random.Generator) -> list[str]:
    n = max(1, int(round(duration * rng.uniform(2.3, 3.0))))
    return [words[i] for i in rng.integers(0, len(words), n)]


def synth_pool(n_speakers: int = 10, utterances_per_speaker: int = 16, seed: int = 0,
               duration_range=(4.0, 11.0), directory=None, sample_rate: int = SAMPLE_RATE):
    """Synthetic utterance pool as a list of :class:`UtteranceRecord`.

    With ``directory`` the audio is written there as float32 WAV together with
    a ``pool.tsv`` index readable by :func:`csskit.conversation.load_pool`.
    """
    from .conversation import UtteranceRecord, write_pool_index

    rng = np.random.default_rng(seed)
    words = vocabulary(seed=seed)
    records = []
    for s in range(n_speakers):
        voice = make_voice(f"spk{s:02d}", rng)
        for u in range(utterances_per_speaker):
            dur = float(np.round(rng.uniform(*duration_range), 3))
            # float32-exact so in-memory and on-disk pools render identically
            audio = synth_utterance(voice, dur, rng, sample_rate).astype(np.float32).astype(float)
            uid = f"{voice.speaker_id}-u{u:03d}"
            path = None
            if directory is not None:
                path = Path(directory) / f"{uid}.wav"
                path.parent.mkdir(parents=True, exist_ok=True)
                write_wav(path, Waveform(audio, sample_rate))
            records.append(UtteranceRecord(uid, voice.speaker_id, path, len(audio) / sample_rate,
                                           tuple(synth_transcript(dur, words, rng)), audio))
    if directory is not None:
        write_pool_index(directory, records)
    return records
