"""Sliding-window continuous separation.

The input spectrogram is cut into windows of ``n_left + n_center + n_right``
frames that advance by ``n_center``.  An estimator returns three masks per
window (two speakers, one noise); consecutive windows are put in a common
speaker order by comparing the speech masks on the frames they share, and the
global masks are assembled from each window's centre part only.
"""

from __future__ import annotations

import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .beamform import MvdrWeights, accumulate_scm, beamform_spectrum, mvdr_weights, steering_vector
from .signal import SAMPLE_RATE, Spectrogram, StftConfig, Waveform, frame_signal, istft, stft

log = logging.getLogger(__name__)

MASK_MAGIC = b"CSSM"
MASK_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
IRM_EPS = 1e-8


class MaskFileError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkConfig:
    n_left: int
    n_center: int
    n_right: int

    def __post_init__(self):
        if self.n_center < 1:
            raise ValueError("n_center must be at least one frame")
        if self.n_left < 0 or self.n_right < 0:
            raise ValueError("context frame counts must be non-negative")

    @classmethod
    def from_seconds(cls, left: float, center: float, right: float,
                     stft_cfg: StftConfig | None = None, sample_rate: int = SAMPLE_RATE):
        cfg = stft_cfg or StftConfig()
        return cls(*(cfg.seconds_to_frames(s, sample_rate) for s in (left, center, right)))

    @classmethod
    def parse(cls, text: str, stft_cfg: StftConfig | None = None):
        """``"1.2,0.8,0.4"`` or ``"1.2-0.8-0.4"`` in seconds."""
        parts = text.replace("-", ",").split(",")
        if len(parts) != 3:
            raise ValueError(f"chunk config needs three values, got {text!r}")
        return cls.from_seconds(*(float(p) for p in parts), stft_cfg=stft_cfg)

    @property
    def window(self) -> int:
        return self.n_left + self.n_center + self.n_right

    def latency_frames(self) -> int:
        return self.n_center + self.n_right

    def latency_seconds(self, stft_cfg: StftConfig | None = None,
                        sample_rate: int = SAMPLE_RATE) -> float:
        hop = (stft_cfg or StftConfig()).hop_length
        return self.latency_frames() * hop / sample_rate


def inherent_latency(cfg: ChunkConfig, stft_cfg: StftConfig | None = None,
                     sample_rate: int = SAMPLE_RATE) -> float:
    """Algorithmic delay, (N_C + N_R) frames, in seconds."""
    return cfg.latency_seconds(stft_cfg, sample_rate)


@dataclass(frozen=True)
class Chunk:
    index: int
    window_start: int   # may be negative; out-of-range frames repeat the edge
    window_stop: int
    center_start: int
    center_stop: int
    total_frames: int

    @property
    def frames(self) -> np.ndarray:
        return np.clip(np.arange(self.window_start, self.window_stop), 0, self.total_frames - 1)

    @property
    def center_slice(self) -> slice:
        a = self.center_start - self.window_start
        return slice(a, a + self.center_stop - self.center_start)


def plan_chunks(total_frames: int, cfg: ChunkConfig) -> list[Chunk]:
    if total_frames < 1:
        raise ValueError("cannot chunk an empty spectrogram")
    n = math.ceil(total_frames / cfg.n_center)
    if n > 1 and cfg.n_left + cfg.n_right == 0:
        raise ValueError("consecutive chunks share no frames (n_left + n_right = 0); "
                         "permutations cannot be aligned")
    chunks = []
    for i in range(n):
        c0 = i * cfg.n_center
        chunks.append(Chunk(i, c0 - cfg.n_left, c0 + cfg.n_center + cfg.n_right,
                            c0, min(c0 + cfg.n_center, total_frames), total_frames))
    return chunks


def batch_config(total_frames: int) -> ChunkConfig:
    """Whole input as one chunk (utterance-wise processing)."""
    return ChunkConfig(0, max(1, total_frames), 0)


@dataclass(frozen=True)
class MaskSet:
    """Masks shaped (3, frames, bins): speaker 0, speaker 1, noise."""

    masks: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masks, dtype=float)
        if m.ndim != 3 or m.shape[0] != 3:
            raise ValueError(f"mask set must be (3, frames, bins), got {m.shape}")
        if not np.all(np.isfinite(m)) or m.min(initial=0) < 0 or m.max(initial=0) > 1:
            raise ValueError("mask values must be finite and in [0, 1]")
        object.__setattr__(self, "masks", m)

    @property
    def speech(self) -> np.ndarray:
        return self.masks[:2]

    @property
    def noise(self) -> np.ndarray:
        return self.masks[2]

    def permuted(self, perm) -> "MaskSet":
        return MaskSet(self.masks[[perm[0], perm[1], 2]])


@dataclass
class StitchedMasks:
    masks: np.ndarray                       # (3, frames, bins)
    permutations: list[tuple[int, int]]
    source: np.ndarray = field(repr=False)  # chunk index per frame

    @property
    def speech(self) -> np.ndarray:
        return self.masks[:2]

    @property
    def noise(self) -> np.ndarray:
        return self.masks[2]


IDENTITY = (0, 1)
SWAP = (1, 0)


def align_permutation(prev: MaskSet, cur: MaskSet, shared) -> tuple[int, int]:
    """Order of ``cur``'s speech masks that best matches ``prev`` on shared frames.

    ``shared`` is either one index array valid for both sets or a pair
    ``(prev_frames, cur_frames)``.  Squared error decides; equal cost keeps
    the identity.
    """
    if isinstance(shared, tuple) and len(shared) == 2:
        pi, ci = (np.asarray(s) for s in shared)
    else:
        pi = ci = np.asarray(shared)
    if pi.size == 0:
        raise ValueError("no shared frames to align on")
    p = prev.speech[:, pi]
    c = cur.speech[:, ci]
    keep = np.sum((p[0] - c[0]) ** 2) + np.sum((p[1] - c[1]) ** 2)
    swap = np.sum((p[0] - c[1]) ** 2) + np.sum((p[1] - c[0]) ** 2)
    return SWAP if swap < keep else IDENTITY


def shared_frames(prev: Chunk, cur: Chunk) -> tuple[np.ndarray, np.ndarray]:
    """Local indices of the real frames both windows contain."""
    lo = max(prev.window_start, cur.window_start, 0)
    hi = min(prev.window_stop, cur.window_stop, cur.total_frames)
    g = np.arange(lo, hi)
    return g - prev.window_start, g - cur.window_start


def stitch(masksets: Sequence[MaskSet], chunks: Sequence[Chunk]) -> StitchedMasks:
    if len(masksets) != len(chunks):
        raise ValueError(f"{len(masksets)} mask sets for {len(chunks)} chunks")
    if not chunks:
        raise ValueError("nothing to stitch")
    T = chunks[0].total_frames
    F = masksets[0].masks.shape[2]
    out = np.zeros((3, T, F))
    source = np.full(T, -1)
    perms = []
    prev = None
    for ms, ch in zip(masksets, chunks):
        if ms.masks.shape[1] != ch.window_stop - ch.window_start:
            raise ValueError(f"chunk {ch.index}: {ms.masks.shape[1]} frames, "
                             f"window has {ch.window_stop - ch.window_start}")
        perm = IDENTITY if prev is None else align_permutation(prev[0], ms, shared_frames(prev[1], ch))
        aligned = ms.permuted(perm)
        perms.append(perm)
        out[:, ch.center_start:ch.center_stop] = aligned.masks[:, ch.center_slice]
        source[ch.center_start:ch.center_stop] = ch.index
        prev = (aligned, ch)
    return StitchedMasks(out, perms, source)


# -- oracle estimator ----------------------------------------------------------

class OracleIRM:
    """Ideal ratio masks from the known reverberant images on one channel.

    ``sources`` holds ``(start, samples, dry_start, dry_end)`` tuples in input
    sample coordinates; ``samples`` is 1-D.  A source is active in a frame
    when the frame centre lies in its dry span.  Sources active somewhere in
    a chunk get a slot in order of first activity, reusing a slot once its
    previous occupant has finished; energy of sources only present as a
    reverberant tail counts as noise.
    """

    def __init__(self, sources, noise, length: int, stft_cfg: StftConfig | None = None,
                 eps: float = IRM_EPS):
        self.cfg = stft_cfg or StftConfig()
        self.length = length
        self.eps = eps
        self.sources = [(int(s), np.asarray(x, dtype=float), int(a), int(b))
                        for s, x, a, b in sources]
        self.n_frames = self.cfg.frames_for(length)
        if noise is None:
            self.noise_mag = np.zeros((self.n_frames, self.cfg.n_bins), np.float32)
        else:
            self.noise_mag = np.abs(stft(Waveform(np.asarray(noise, dtype=float)), self.cfg).bins[0]).astype(np.float32)
        self._mag: dict[int, tuple[int, np.ndarray]] = {}
        hop = self.cfg.hop_length
        self._active = []
        for s, x, a, b in self.sources:
            k0 = max(0, -(-a // hop))
            k1 = min(self.n_frames, -(-b // hop))
            self._active.append((k0, k1))

    @classmethod
    def from_session(cls, rendered, ref_channel: int = 0, start: int = 0, stop: int | None = None,
                     stft_cfg: StftConfig | None = None):
        """Oracle for the input ``mixture[start:stop]`` of a rendered session."""
        stop = rendered.mixture.length if stop is None else stop
        k = rendered.reference_channels.index(ref_channel)
        srcs = []
        for r in rendered.references:
            if r.stop <= start or r.start >= stop:
                continue
            srcs.append((r.start - start, r.samples[k], r.dry_start - start, r.dry_end - start))
        noise = rendered.noise[k, start:stop] if rendered.noise is not None else None
        return cls(srcs, noise, stop - start, stft_cfg)

    def _magnitude(self, i: int):
        if i in self._mag:
            return self._mag[i]
        s, x, _, _ = self.sources[i]
        cfg = self.cfg
        hop, half = cfg.hop_length, cfg.window_length // 2
        lo, hi = max(s, 0), min(s + len(x), self.length)
        if hi <= lo:
            self._mag[i] = (0, np.zeros((0, cfg.n_bins), np.float32))
            return self._mag[i]
        k0 = max(0, (lo - half) // hop)
        k1 = min(self.n_frames, (hi + half) // hop + 1)
        base = k0 * hop - half
        buf = np.zeros((k1 - k0 - 1) * hop + cfg.window_length)
        buf[lo - base:hi - base] = x[lo - s:hi - s]
        mag = np.abs(np.fft.rfft(frame_signal(buf, k1 - k0, cfg), axis=-1)).astype(np.float32)
        self._mag[i] = (k0, mag)
        return self._mag[i]

    def _gather(self, i, frames):
        k0, mag = self._magnitude(i)
        out = np.zeros((len(frames), self.cfg.n_bins), np.float32)
        rel = frames - k0
        ok = (rel >= 0) & (rel < len(mag))
        out[ok] = mag[rel[ok]]
        return out

    def slots(self, frames: np.ndarray) -> tuple[list[list[int]], list[int]]:
        """Slot membership and tail-only sources for a chunk's frame indices."""
        lo, hi = frames.min(), frames.max() + 1
        present, firsts, spans = [], [], {}
        for i, (s, x, _, _) in enumerate(self.sources):
            k0, k1 = self._active[i]
            if k1 <= k0 or k1 <= lo or k0 >= hi:
                k0m, magm = self._magnitude(i)
                if len(magm) and k0m < hi and k0m + len(magm) > lo:
                    present.append(i)
                continue
            act = (frames >= k0) & (frames < k1)
            if not act.any():
                present.append(i)
                continue
            spans[i] = act
            firsts.append((int(np.argmax(act)), s, i))
        slots: list[list[int]] = [[], []]
        for _, _, i in sorted(firsts):
            for members in slots:
                if not any(np.any(spans[i] & spans[j]) for j in members):
                    members.append(i)
                    break
            else:
                raise ValueError("more than two speakers active at once in a chunk")
        return slots, present

    def __call__(self, window: Spectrogram, chunk: Chunk) -> MaskSet:
        frames = chunk.frames
        slots, tails = self.slots(frames)
        F = self.cfg.n_bins
        mags = np.zeros((3, len(frames), F), np.float32)
        for k, members in enumerate(slots):
            for i in members:
                mags[k] += self._gather(i, frames)
        mags[2] = self.noise_mag[frames]
        for i in tails:
            mags[2] += self._gather(i, frames)
        den = mags.sum(axis=0, dtype=float) + self.eps
        return MaskSet(np.clip(mags / den, 0.0, 1.0))


class ExternalMasks:
    """Estimator that replays precomputed per-chunk mask sets."""

    def __init__(self, masksets: Sequence[MaskSet]):
        self.masksets = list(masksets)

    def __call__(self, window: Spectrogram, chunk: Chunk) -> MaskSet:
        return self.masksets[chunk.index]


# -- mask exchange file --------------------------------------------------------

def save_masks(path, masksets: Sequence[MaskSet]) -> None:
    if not masksets:
        raise ValueError("no masks to save")
    arr = np.stack([m.masks for m in masksets]).astype("<f4")
    n, k, t, f = arr.shape
    Path(path).write_bytes(_HEADER.pack(MASK_MAGIC, MASK_VERSION, n, t, f, k) + arr.tobytes())


def read_mask_file(path) -> np.ndarray:
    """Raw (chunks, 3, frames, bins) float32 array from a mask file."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise MaskFileError(f"cannot read mask file {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise MaskFileError(f"{path}: truncated header")
    magic, version, n, t, f, k = _HEADER.unpack_from(raw)
    if magic != MASK_MAGIC:
        raise MaskFileError(f"{path}: bad magic {magic!r}")
    if version != MASK_VERSION:
        raise MaskFileError(f"{path}: unsupported version {version}")
    if k != 3:
        raise MaskFileError(f"{path}: expected 3 masks per chunk, found {k}")
    need = n * k * t * f * 4
    if len(raw) - _HEADER.size != need:
        raise MaskFileError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, header implies {need}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, k, t, f)


def load_external_masks(path, chunks: Sequence[Chunk], n_bins: int) -> list[MaskSet]:
    arr = read_mask_file(path)
    frames = chunks[0].window_stop - chunks[0].window_start if chunks else 0
    expected = (len(chunks), 3, frames, n_bins)
    if arr.shape != expected:
        raise MaskFileError(f"mask file shape {arr.shape} does not match expected {expected} "
                            "(chunks, masks, frames, bins)")
    bad = int(np.count_nonzero((arr < 0) | (arr > 1) | ~np.isfinite(arr)))
    if bad:
        warnings.warn(f"clamped {bad} mask values outside [0, 1]", stacklevel=2)
    clean = np.clip(np.nan_to_num(arr.astype(float), nan=0.0), 0.0, 1.0)
    return [MaskSet(m) for m in clean]


# -- pipeline ------------------------------------------------------------------

Estimator = Callable[[Spectrogram, Chunk], MaskSet]


def estimate_chunks(X: Spectrogram, chunks: Sequence[Chunk], estimator: Estimator) -> list[MaskSet]:
    return [estimator(Spectrogram(X.bins[:, ch.frames], X.config, X.sample_rate), ch)
            for ch in chunks]


def apply_masks(mix: Spectrogram, masks, ref_channel: int = 0) -> tuple[Waveform, Waveform]:
    m = masks.masks if isinstance(masks, StitchedMasks) else np.asarray(masks)
    if m.shape[1:] != mix.bins.shape[1:]:
        raise ValueError(f"masks {m.shape[1:]} do not match spectrogram {mix.bins.shape[1:]}")
    ref = mix.bins[ref_channel]
    return tuple(istft(mix.with_bins((m[i] * ref)[None])) for i in range(2))


@dataclass
class CssResult:
    streams: tuple[Waveform, Waveform]
    masks: StitchedMasks
    chunks: list[Chunk]
    latency: float
    weights: list[MvdrWeights] | None = None
    masksets: list[MaskSet] | None = None


def run_css(mix: Waveform, cfg: ChunkConfig | None, estimator: Estimator, mode: str = "masking",
            ref_channel: int = 0, stft_cfg: StftConfig | None = None,
            interferer_in_noise: bool = True, scm_scope: str = "input",
            masksets: Sequence[MaskSet] | None = None) -> CssResult:
    """Chunk, estimate, stitch, then mask or beamform.

    ``cfg=None`` processes the whole input as one chunk.  In ``mvdr`` mode
    the covariances are gathered over the whole input (``scm_scope="input"``)
    or over each chunk's window and applied to its centre frames
    (``scm_scope="chunk"``).
    """
    if mode not in ("masking", "mvdr"):
        raise ValueError(f"unknown output mode {mode!r}")
    if scm_scope not in ("input", "chunk"):
        raise ValueError(f"unknown covariance scope {scm_scope!r}")
    X = stft(mix, stft_cfg)
    if not 0 <= ref_channel < X.n_channels:
        raise ValueError(f"reference channel {ref_channel} outside 0..{X.n_channels - 1}")
    cfg = cfg or batch_config(X.n_frames)
    chunks = plan_chunks(X.n_frames, cfg)
    if masksets is None:
        masksets = estimate_chunks(X, chunks, estimator)
    stitched = stitch(masksets, chunks)
    latency = cfg.latency_seconds(X.config, X.sample_rate)
    if mode == "masking":
        return CssResult(apply_masks(X, stitched, ref_channel), stitched, chunks, latency,
                         masksets=list(masksets))

    m = stitched.masks
    if scm_scope == "input":
        Y, weights = _mvdr_block(X, m, ref_channel, interferer_in_noise)
    else:
        Y = np.zeros((2, X.n_frames, X.n_bins), complex)
        weights = []
        for ch in chunks:
            fr = np.arange(max(ch.window_start, 0), min(ch.window_stop, ch.total_frames))
            sub = Spectrogram(X.bins[:, fr], X.config, X.sample_rate)
            Yc, w = _mvdr_block(sub, m[:, fr], ref_channel, interferer_in_noise)
            keep = (fr >= ch.center_start) & (fr < ch.center_stop)
            Y[:, fr[keep]] = Yc[:, keep]
            weights.extend(w)
    streams = tuple(istft(X.with_bins(Y[i][None])) for i in range(2))
    return CssResult(streams, stitched, chunks, latency, weights, list(masksets))


def _mvdr_block(X: Spectrogram, m: np.ndarray, ref_channel: int, interferer_in_noise: bool):
    out = np.zeros((2, X.n_frames, X.n_bins), complex)
    weights = []
    for i in range(2):
        noise = m[2] + m[1 - i] if interferer_in_noise else m[2]
        speech = accumulate_scm(X, m[i])
        w = mvdr_weights(accumulate_scm(X, np.clip(noise, 0, 1)),
                         steering_vector(speech, ref_channel), ref_channel)
        out[i] = beamform_spectrum(X, w)
        weights.append(w)
    return out, weights
