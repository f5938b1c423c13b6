"""Shoebox room acoustics: image-method RIRs, source placement and diffuse noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .signal import SAMPLE_RATE, StftConfig, Spectrogram, Waveform, istft

# Channel subsets of the default 7-mic circular array.
CHANNEL_SUBSETS = {
    "7ch": (0, 1, 2, 3, 4, 5, 6),
    "5ch": (0, 1, 2, 4, 5),
    "3ch_linear": (1, 0, 4),
    "3ch_triangular": (1, 3, 5),
    "1ch": (0,),
}

_SINC_HALF_WIDTH = 32


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple[float, float, float]
    t60: float
    speed_of_sound: float = 343.0

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dimensions)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"room dimensions must be three positive lengths, got {dims}")
        if not 0.05 <= self.t60 <= 2.0:
            raise ValueError(f"t60 must lie in [0.05, 2.0] s, got {self.t60}")
        object.__setattr__(self, "dimensions", dims)

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dimensions
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dimensions
        return 2 * (lx * ly + ly * lz + lx * lz)

    def contains(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p > margin) and np.all(p < np.asarray(self.dimensions) - margin))

    def sabine_absorption(self) -> float:
        """Wall absorption coefficient from Sabine's formula."""
        c = self.speed_of_sound
        return 24 * np.log(10) * self.volume / (c * self.surface * self.t60)

    def reflection_coefficient(self, model: str = "sabine") -> float:
        """Pressure reflection coefficient shared by all six walls.

        ``"sabine"`` is sqrt(1 - alpha) with Sabine's alpha; it decays faster
        than the target once alpha grows past roughly 0.6.  ``"eyring"``
        matches the mean reflection rate of the image lattice instead.
        """
        if model == "sabine":
            alpha = self.sabine_absorption()
            if alpha >= 1.0:
                raise ValueError(f"t60={self.t60} s unattainable in this room under Sabine")
            return float(np.sqrt(1.0 - alpha))
        if model == "eyring":
            return float(np.exp(-0.5 * self.sabine_absorption()))
        raise ValueError(f"unknown absorption model {model!r}")


@dataclass(frozen=True)
class ArrayGeometry:
    mic_positions: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.mic_positions, dtype=float))
        if p.shape[1] != 3:
            raise ValueError("mic positions must be 3-D coordinates")
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        if np.any(d[np.triu_indices(len(p), 1)] < 1e-9):
            raise ValueError("mic positions must be distinct")
        object.__setattr__(self, "mic_positions", p)

    @property
    def n_mics(self) -> int:
        return len(self.mic_positions)

    @property
    def center(self) -> np.ndarray:
        return self.mic_positions.mean(axis=0)

    def select(self, channels) -> "ArrayGeometry":
        return ArrayGeometry(self.mic_positions[list(channels)])

    @classmethod
    def circular7(cls, center=(0.0, 0.0, 0.0), radius: float = 0.0425) -> "ArrayGeometry":
        """Centre mic (index 0) plus six mics evenly spaced on a horizontal circle."""
        c = np.asarray(center, dtype=float)
        ang = np.arange(6) * np.pi / 3
        ring = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(6)], axis=1)
        return cls(np.vstack([c, c + ring]))


@dataclass(frozen=True)
class Rir:
    """Impulse responses, ``taps`` shaped (mics, length)."""

    taps: np.ndarray
    sample_rate: int = SAMPLE_RATE
    order: int = 0

    @property
    def n_mics(self) -> int:
        return self.taps.shape[0]


def _image_lattice(room: RoomSpec, source, max_order=None, radius=None):
    """Image positions and reflection counts.

    Along each axis, index u maps to ``u * L + (x if u even else L - x)``; the
    image has ``|u|`` reflections on that axis.  Either keep every image with at
    most ``max_order`` reflections in total, or every image within ``radius``
    of the room (covering all mics inside it).
    """
    dims = np.asarray(room.dimensions)
    s = np.asarray(source, dtype=float)
    if max_order is not None:
        bound = np.full(3, max_order)
    else:
        bound = np.ceil(radius / dims).astype(int) + 1
    axes = []
    for a in range(3):
        u = np.arange(-bound[a], bound[a] + 1)
        pos = u * dims[a] + np.where(u % 2 == 0, s[a], dims[a] - s[a])
        axes.append((u, pos))
    ux, uy, uz = np.meshgrid(axes[0][0], axes[1][0], axes[2][0], indexing="ij")
    px, py, pz = np.meshgrid(axes[0][1], axes[1][1], axes[2][1], indexing="ij")
    refl = np.abs(ux) + np.abs(uy) + np.abs(uz)
    pos = np.stack([px, py, pz], axis=-1).reshape(-1, 3)
    refl = refl.ravel()
    if max_order is not None:
        keep = refl <= max_order
    else:
        # farthest in-room point from the source image lattice is within the room diagonal
        keep = np.linalg.norm(pos - dims / 2, axis=1) <= radius + np.linalg.norm(dims) / 2
    return pos[keep], refl[keep]


def auto_radius(room: RoomSpec, tail_energy: float = 1e-3) -> float:
    """Propagation distance beyond which the exponential decay holds < tail_energy."""
    return room.speed_of_sound * room.t60 * (-10 * np.log10(tail_energy)) / 60.0


def image_method_rir(room: RoomSpec, source, mics: ArrayGeometry, max_order: int | None = None,
                     sample_rate: int = SAMPLE_RATE, tail_energy: float = 1e-3,
                     absorption: str = "sabine") -> Rir:
    """Image-method impulse responses from ``source`` to every mic.

    With ``max_order=None`` all images whose delay is below the time the
    reverberant energy needs to decay to ``tail_energy`` of its total are kept,
    and the RIR is truncated there.  ``max_order=0`` gives the anechoic direct
    path.  Fractional delays use a Hann-windowed full-band sinc.
    """
    src = np.asarray(source, dtype=float)
    if not room.contains(src):
        raise ValueError(f"source {src.tolist()} is outside the room")
    for m in mics.mic_positions:
        if not room.contains(m):
            raise ValueError(f"mic {m.tolist()} is outside the room")
    dist0 = np.linalg.norm(mics.mic_positions - src, axis=1)
    if np.any(dist0 < 1e-6):
        raise ValueError("source coincides with a microphone")

    c = room.speed_of_sound
    beta = room.reflection_coefficient(absorption) if max_order != 0 else 0.0
    if max_order is None:
        radius = auto_radius(room, tail_energy)
        images, refl = _image_lattice(room, src, radius=radius)
        max_delay = radius / c
    else:
        images, refl = _image_lattice(room, src, max_order=max_order)
        max_delay = None

    taps_per_mic = []
    for mic in mics.mic_positions:
        d = np.linalg.norm(images - mic, axis=1)
        keep = d / c <= max_delay if max_delay is not None else np.ones(len(d), bool)
        d_k, r_k = d[keep], refl[keep]
        amp = np.power(beta, r_k) / (4 * np.pi * d_k)
        amp[r_k == 0] = 1.0 / (4 * np.pi * d_k[r_k == 0])
        taps_per_mic.append(_fractional_delays(d_k / c * sample_rate, amp))
    n = max(len(t) for t in taps_per_mic)
    if max_delay is not None:
        n = min(n, int(np.ceil(max_delay * sample_rate)) + _SINC_HALF_WIDTH + 1)
    taps = np.zeros((mics.n_mics, n))
    for i, t in enumerate(taps_per_mic):
        taps[i, :min(n, len(t))] = t[:n]
    return Rir(taps, sample_rate, int(refl.max()) if len(refl) else 0)


def _fractional_delays(delays: np.ndarray, amps: np.ndarray) -> np.ndarray:
    base = np.floor(delays).astype(int)
    frac = delays - base
    k = np.arange(-_SINC_HALF_WIDTH + 1, _SINC_HALF_WIDTH + 1)
    t = k[None, :] - frac[:, None]
    kernel = np.sinc(t) * (0.5 + 0.5 * np.cos(np.pi * t / _SINC_HALF_WIDTH))
    idx = base[:, None] + k[None, :]
    valid = idx >= 0
    length = int(idx.max()) + 1 if idx.size else 1
    return np.bincount(idx[valid], weights=(kernel * amps[:, None])[valid], minlength=length)


def direct_path_delay(room: RoomSpec, source, mic, sample_rate: int = SAMPLE_RATE) -> int:
    d = np.linalg.norm(np.asarray(source, float) - np.asarray(mic, float))
    return int(round(d / room.speed_of_sound * sample_rate))


def convolve_place(utterance: Waveform, rir: Rir, start: int, canvas: np.ndarray) -> np.ndarray:
    """Add the RIR-convolved utterance into ``canvas`` (mics, length) at ``start``.

    The canvas is modified in place and returned; the part of the image past
    the end of the canvas is dropped.
    """
    if start < 0:
        raise ValueError("start must be non-negative")
    if canvas.shape[0] != rir.n_mics:
        raise ValueError(f"canvas has {canvas.shape[0]} channels, RIR has {rir.n_mics} mics")
    image = reverberant_image(utterance, rir)
    stop = min(canvas.shape[1], start + image.shape[1])
    if stop > start:
        canvas[:, start:stop] += image[:, :stop - start]
    return canvas


def reverberant_image(utterance: Waveform, rir: Rir) -> np.ndarray:
    if utterance.n_channels != 1:
        raise ValueError("utterances are single-channel")
    x = utterance.samples[0]
    return fftconvolve(x[None, :], rir.taps, axes=-1)


def plane_wave_directions(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` unit vectors uniformly distributed on the sphere."""
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def isotropic_noise(geometry: ArrayGeometry, duration: float, seed, sample_rate: int = SAMPLE_RATE,
                    n_waves: int = 256, speed_of_sound: float = 343.0, method: str = "covariance",
                    cfg: StftConfig | None = None) -> Waveform:
    """Spherically isotropic noise at the array as a sum of random plane waves.

    Every plane wave carries independent white Gaussian noise and arrives from
    a direction drawn uniformly on the sphere.  ``method="plane_waves"`` sums
    the waves explicitly in the STFT domain.  ``method="covariance"`` (default)
    draws the same Gaussian field through an M x M factor of the per-bin
    plane-wave covariance, which is far cheaper for long signals.  Each
    channel is normalised to unit variance.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if n_waves < 256:
        raise ValueError("use at least 256 plane waves")
    cfg = cfg or StftConfig()
    rng = np.random.default_rng(seed)
    length = int(round(duration * sample_rate))
    n_frames = cfg.frames_for(length)
    dirs = plane_wave_directions(n_waves, rng)
    freqs = np.fft.rfftfreq(cfg.window_length, 1.0 / sample_rate)
    delays = -(geometry.mic_positions @ dirs.T) / speed_of_sound           # (M, K)
    steer = np.exp(-2j * np.pi * freqs[:, None, None] * delays[None])      # (F, M, K)
    steer /= np.sqrt(n_waves)
    M = geometry.n_mics

    if method == "plane_waves":
        amps = _complex_normal(rng, (n_waves, n_frames, cfg.n_bins))
        bins = np.einsum("fmk,ktf->mtf", steer, amps)
        noise = istft(Spectrogram(bins, cfg, sample_rate, length)).samples
    elif method == "covariance":
        cov = steer @ steer.conj().transpose(0, 2, 1)                        # (F, M, M)
        vals, vecs = np.linalg.eigh(cov)
        factor = vecs * np.sqrt(np.clip(vals, 0, None))[:, None, :]
        noise = np.zeros((M, length))
        block = 2048
        for f0 in range(0, n_frames, block):
            f1 = min(n_frames, f0 + block)
            z = _complex_normal(rng, (M, f1 - f0, cfg.n_bins))
            bins = np.einsum("fmn,ntf->mtf", factor, z)
            _overlap_add(noise, bins, f0, cfg)
        noise = _normalise_overlap(noise, n_frames, length, cfg)
    else:
        raise ValueError(f"unknown method {method!r}")
    std = noise.std(axis=1, keepdims=True)
    return Waveform(noise / np.where(std > 0, std, 1.0), sample_rate)


def _complex_normal(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def _overlap_add(out: np.ndarray, bins: np.ndarray, first_frame: int, cfg: StftConfig) -> None:
    """Accumulate windowed frames into ``out`` (unpadded coordinates)."""
    frames = np.fft.irfft(bins, n=cfg.window_length, axis=-1) * cfg.taper()
    half = cfg.window_length // 2
    for i in range(frames.shape[1]):
        s = (first_frame + i) * cfg.hop_length - half
        lo, hi = max(s, 0), min(s + cfg.window_length, out.shape[1])
        if hi > lo:
            out[:, lo:hi] += frames[:, i, lo - s:hi - s]


def _normalise_overlap(out, n_frames, length, cfg):
    w2 = cfg.taper() ** 2
    norm = np.zeros(length)
    half = cfg.window_length // 2
    for k in range(n_frames):
        s = k * cfg.hop_length - half
        lo, hi = max(s, 0), min(s + cfg.window_length, length)
        if hi > lo:
            norm[lo:hi] += w2[lo - s:hi - s]
    return out / np.maximum(norm, 1e-12)


def snr_gain(speech: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """Gain putting ``noise`` ``snr_db`` below ``speech`` in energy."""
    es = float(np.dot(speech, speech))
    en = float(np.dot(noise, noise))
    if es <= 0:
        raise ValueError("speech is silent on the reference channel")
    if en <= 0:
        raise ValueError("noise is silent on the reference channel")
    return float(np.sqrt(es / (en * 10 ** (snr_db / 10))))


def scale_noise_to_snr(speech: Waveform, noise: Waveform, snr_db: float,
                       ref_channel: int = 0) -> Waveform:
    """Noise rescaled so the reference-channel speech/noise energy ratio is ``snr_db``."""
    if speech.samples.shape != noise.samples.shape:
        raise ValueError(
            f"speech {speech.samples.shape} and noise {noise.samples.shape} shapes differ")
    gain = snr_gain(speech.samples[ref_channel], noise.samples[ref_channel], snr_db)
    return Waveform(noise.samples * gain, noise.sample_rate)


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float, ref_channel: int = 0) -> Waveform:
    scaled = scale_noise_to_snr(speech, noise, snr_db, ref_channel)
    return Waveform(speech.samples + scaled.samples, speech.sample_rate)


def schroeder_t60(rir: np.ndarray, sample_rate: int = SAMPLE_RATE,
                  fit_range=(-5.0, -25.0)) -> float:
    """T60 extrapolated from a linear fit to the backward-integrated energy decay."""
    h = np.asarray(rir, dtype=float)
    edc = np.cumsum((h ** 2)[::-1])[::-1]
    edc_db = 10 * np.log10(edc / edc[0] + 1e-300)
    hi, lo = fit_range
    sel = (edc_db <= hi) & (edc_db >= lo)
    t = np.arange(len(h))[sel] / sample_rate
    slope, _ = np.polyfit(t, edc_db[sel], 1)
    return -60.0 / slope
