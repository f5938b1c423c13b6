"""Sampled audio containers, WAV I/O, STFT/iSTFT and SI-SNR.

Shape conventions used throughout the package:

    Waveform.samples:   (channels, length)
    Spectrogram.bins:   (channels, frames, window_length // 2 + 1)

Frame ``k`` of a spectrogram is centred on sample ``k * hop_length``; the input
is reflect-padded by half a window at both ends (plus enough extra samples on
the right to complete the last frame), so frame indices line up exactly for
any two signals sampled on the same clock.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
SI_SNR_CEILING = 60.0

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class WavFormatError(ValueError):
    """Raised for malformed, truncated or unsupported WAV files."""


@dataclass(frozen=True)
class Waveform:
    """Multichannel sampled audio."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2:
            raise ValueError(f"samples must be (channels, length), got shape {x.shape}")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples contain non-finite values")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate

    def channel(self, index: int) -> np.ndarray:
        return self.samples[index]

    def select(self, channels) -> "Waveform":
        return Waveform(self.samples[list(channels)], self.sample_rate)

    def crop(self, start: int, stop: int) -> "Waveform":
        """Samples in ``[start, stop)``; zero-filled where the range leaves the signal."""
        out = np.zeros((self.n_channels, stop - start))
        lo, hi = max(start, 0), min(stop, self.length)
        if hi > lo:
            out[:, lo - start:hi - start] = self.samples[:, lo:hi]
        return Waveform(out, self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 512
    hop_length: int = 256
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.window_length <= 0 or self.hop_length <= 0:
            raise ValueError("window_length and hop_length must be positive")
        if self.hop_length > self.window_length:
            raise ValueError(
                f"hop_length ({self.hop_length}) exceeds window_length ({self.window_length})")
        if self.window_length % self.hop_length:
            raise ValueError("hop_length must divide window_length")
        if self.window_length % 2:
            raise ValueError("window_length must be even")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}; choose from {sorted(_WINDOWS)}")
        w = self.taper()
        ola = np.zeros(self.hop_length)
        for k in range(self.window_length // self.hop_length):
            ola += (w * w)[k * self.hop_length:(k + 1) * self.hop_length]
        if np.ptp(ola) > 1e-10 * ola.max():
            raise ValueError(f"{self.window} taper does not satisfy COLA at this hop")

    @property
    def n_bins(self) -> int:
        return self.window_length // 2 + 1

    def taper(self) -> np.ndarray:
        return _WINDOWS[self.window](self.window_length)

    def frames_for(self, length: int) -> int:
        return -(-length // self.hop_length) + 1

    def seconds_to_frames(self, seconds: float, sample_rate: int = SAMPLE_RATE) -> int:
        frames = seconds * sample_rate / self.hop_length
        n = int(round(frames))
        if abs(frames - n) > 1e-6:
            raise ValueError(f"{seconds} s is not a whole number of {self.hop_length}-sample hops")
        return n


def _sqrt_hann(n):
    return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n))


def _hann(n):
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _rect(n):
    return np.ones(n)


# analysis == synthesis taper; COLA is checked on the squared taper
_WINDOWS = {"sqrt_hann": _sqrt_hann, "hann": _hann, "rect": _rect}


@dataclass(frozen=True)
class Spectrogram:
    bins: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = SAMPLE_RATE
    length: int | None = None

    def __post_init__(self):
        b = np.asarray(self.bins)
        if b.ndim == 2:
            b = b[None]
        if b.ndim != 3 or b.shape[-1] != self.config.n_bins:
            raise ValueError(
                f"bins must be (channels, frames, {self.config.n_bins}), got {b.shape}")
        if self.length is not None and self.config.frames_for(self.length) != b.shape[1]:
            raise ValueError(
                f"{b.shape[1]} frames inconsistent with length {self.length}")
        object.__setattr__(self, "bins", b.astype(np.complex128, copy=False))

    @property
    def n_channels(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    @property
    def n_bins(self) -> int:
        return self.bins.shape[2]

    def with_bins(self, bins) -> "Spectrogram":
        return Spectrogram(bins, self.config, self.sample_rate, self.length)

    def frequencies(self) -> np.ndarray:
        return np.fft.rfftfreq(self.config.window_length, 1.0 / self.sample_rate)


def frame_signal(padded: np.ndarray, n_frames: int, cfg: StftConfig) -> np.ndarray:
    """Tapered frames of an already padded signal, shape (..., n_frames, window)."""
    idx = np.arange(cfg.window_length)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    return padded[..., idx] * cfg.taper()


def stft(x: Waveform, cfg: StftConfig | None = None) -> Spectrogram:
    cfg = cfg or StftConfig()
    if x.length == 0:
        raise ValueError("cannot transform an empty waveform")
    half = cfg.window_length // 2
    n_frames = cfg.frames_for(x.length)
    right = (n_frames - 1) * cfg.hop_length + cfg.window_length - half - x.length
    if x.length > 1:
        padded = np.pad(x.samples, ((0, 0), (half, right)), mode="reflect")
    else:
        padded = np.pad(x.samples, ((0, 0), (half, right)), mode="edge")
    bins = np.fft.rfft(frame_signal(padded, n_frames, cfg), axis=-1)
    return Spectrogram(bins, cfg, x.sample_rate, x.length)


def istft(S: Spectrogram, length: int | None = None) -> Waveform:
    """Weighted overlap-add synthesis; output trimmed to the original length."""
    cfg = S.config
    n_frames = S.n_frames
    length = length if length is not None else S.length
    if length is None:
        length = (n_frames - 1) * cfg.hop_length
    if cfg.frames_for(length) != n_frames:
        raise ValueError(f"{n_frames} frames cannot synthesise {length} samples")
    w = cfg.taper()
    frames = np.fft.irfft(S.bins, n=cfg.window_length, axis=-1) * w
    total = (n_frames - 1) * cfg.hop_length + cfg.window_length
    out = np.zeros((S.n_channels, total))
    norm = np.zeros(total)
    hop, win = cfg.hop_length, cfg.window_length
    # frames k, k + win/hop, ... tile contiguously, so each group is one reshape
    for g in range(win // hop):
        n = len(range(g, n_frames, win // hop))
        if n == 0:
            continue
        lo = g * hop
        out[:, lo:lo + n * win] += frames[:, g::win // hop, :].reshape(S.n_channels, n * win)
        norm[lo:lo + n * win] += np.tile(w * w, n)
    half = win // 2
    out = out[:, half:half + length]
    norm = norm[half:half + length]
    return Waveform(out / np.maximum(norm, 1e-12), S.sample_rate)


def si_snr(estimate, reference, ceiling: float = SI_SNR_CEILING) -> float:
    """Scale-invariant SNR in dB (no mean removal), clipped to [-ceiling, ceiling].

    A silent or orthogonal estimate scores ``-ceiling``.
    """
    e = _mono(estimate)
    s = _mono(reference)
    if e.shape != s.shape:
        raise ValueError(f"length mismatch: {e.shape[0]} vs {s.shape[0]}")
    ss = float(np.dot(s, s))
    if ss <= 0.0:
        raise ValueError("reference is all zero")
    if not np.any(e):
        return -ceiling
    target = (np.dot(e, s) / ss) * s
    residual = e - target
    num = float(np.dot(target, target))
    den = float(np.dot(residual, residual))
    if den <= num * 10 ** (-ceiling / 10):
        return ceiling
    if num <= den * 10 ** (-ceiling / 10):
        return -ceiling
    return min(ceiling, 10 * np.log10(num / den))


def _mono(x) -> np.ndarray:
    if isinstance(x, Waveform):
        if x.n_channels != 1:
            raise ValueError("SI-SNR needs single-channel waveforms")
        return x.samples[0]
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 1:
        raise ValueError("SI-SNR needs single-channel signals")
    return x


def write_wav(path, x: Waveform, subtype: str = "float32") -> None:
    """Write RIFF/WAVE, ``subtype`` in {"float32", "pcm16"}."""
    data = x.samples.T
    if subtype == "float32":
        fmt_tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
        payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    elif subtype == "pcm16":
        fmt_tag, bits = _WAVE_FORMAT_PCM, 16
        q = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
        payload = np.ascontiguousarray(q).tobytes()
    else:
        raise ValueError(f"unsupported subtype {subtype!r}")
    ch = x.n_channels
    block = ch * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_tag, ch, x.sample_rate, x.sample_rate * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    if fmt_tag == _WAVE_FORMAT_IEEE_FLOAT:
        chunks += b"fact" + struct.pack("<II", 4, x.length)
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) % 2:
        chunks += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)


def read_wav(path, expected_rate: int | None = SAMPLE_RATE) -> Waveform:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: truncated {cid.decode(errors='replace')!r} chunk")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, ch, rate, _, block, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _WAVE_FORMAT_EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack("<H", fmt[24:26])[0]
    if (tag, bits) == (_WAVE_FORMAT_PCM, 16):
        x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif (tag, bits) == (_WAVE_FORMAT_IEEE_FLOAT, 32):
        x = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported codec (format {tag}, {bits} bit)")
    if ch == 0 or len(data) % block:
        raise WavFormatError(f"{path}: data size not a whole number of frames")
    if expected_rate is not None and rate != expected_rate:
        raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    return Waveform(x.reshape(-1, ch).T, rate)
