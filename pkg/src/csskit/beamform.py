"""Mask-based MVDR beamforming.

Shapes: spectrogram bins are (mics, frames, freqs); masks are (frames, freqs);
covariances are (freqs, mics, mics); steering vectors and weights (freqs, mics).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signal import Spectrogram, Waveform, istft

WEIGHTS_MAGIC = b"CSSW"


@dataclass(frozen=True)
class SpatialCovariance:
    matrices: np.ndarray
    weight: np.ndarray
    flagged: np.ndarray

    @property
    def n_mics(self) -> int:
        return self.matrices.shape[-1]


@dataclass(frozen=True)
class SteeringVectors:
    vectors: np.ndarray
    converged: np.ndarray
    isotropic: np.ndarray


@dataclass(frozen=True)
class MvdrWeights:
    weights: np.ndarray
    steering: np.ndarray
    ref_channel: int
    loading: np.ndarray
    flagged: np.ndarray


def accumulate_scm(mix: Spectrogram, mask) -> SpatialCovariance:
    """Mask-weighted spatial covariance per frequency.

    Frequencies whose total mask weight is zero are flagged and filled with
    an identity scaled by the mean channel power at that frequency.
    """
    X = mix.bins
    m = np.asarray(mask, dtype=float)
    if m.shape != X.shape[1:]:
        raise ValueError(f"mask shape {m.shape} does not match (frames, bins) {X.shape[1:]}")
    if m.min(initial=0.0) < 0 or m.max(initial=0.0) > 1:
        raise ValueError("mask values must lie in [0, 1]")
    total = m.sum(axis=0)
    phi = np.einsum("tf,mtf,ntf->fmn", m, X, X.conj(), optimize=True)
    flagged = total <= 1e-10
    phi[~flagged] /= total[~flagged, None, None]
    phi = 0.5 * (phi + phi.conj().transpose(0, 2, 1))
    if flagged.any():
        power = np.mean(np.abs(X[:, :, flagged]) ** 2, axis=(0, 1))
        power = np.where(power > 0, power, 1.0)
        phi[flagged] = power[:, None, None] * np.eye(X.shape[0])
    return SpatialCovariance(phi, total, flagged)


def steering_vector(scm: SpatialCovariance, ref_channel: int = 0, tol: float = 1e-10,
                    max_iter: int = 200) -> SteeringVectors:
    """Principal eigenvector of each covariance by power iteration.

    Each step multiplies the iterate by the current matrix power and then
    squares that power, so after k steps the iterate has seen Phi**(2**k - 1)
    and the subdominant components die off doubly exponentially.  Bins that
    do not settle within ``max_iter`` steps fall back to the normalised
    largest column and are marked unconverged.  The result is phase-rotated
    so the reference component is real and non-negative.
    """
    phi = scm.matrices
    F, M, _ = phi.shape
    tr = np.real(np.trace(phi, axis1=1, axis2=2))
    scale = np.where(tr > 0, tr, 1.0)
    A = phi / scale[:, None, None]
    cols = np.linalg.norm(A, axis=1)
    start = A[np.arange(F), :, np.argmax(cols, axis=1)]
    v = _unit(np.where(np.linalg.norm(start, axis=1, keepdims=True) > 0, start, 1.0))
    converged = np.zeros(F, bool)
    for _ in range(max_iter):
        nxt = _unit(np.einsum("fmn,fn->fm", A, v))
        nxt = _align_phase(nxt, v)
        delta = np.linalg.norm(nxt - v, axis=1)
        v = np.where(converged[:, None], v, nxt)
        converged |= delta < tol
        if converged.all():
            break
        A = A @ A
        A /= np.maximum(np.real(np.trace(A, axis1=1, axis2=2)), 1e-300)[:, None, None]
    for _ in range(2):
        v = _align_phase(_unit(np.einsum("fmn,fn->fm", phi, v)), v)
    if not converged.all():
        fallback = _unit(start)
        v[~converged] = fallback[~converged]
    lam = np.real(np.einsum("fm,fmn,fn->f", v.conj(), phi, v))
    isotropic = lam <= (tr / M) * (1 + 1e-8)
    return SteeringVectors(_reference_phase(v, ref_channel), converged, isotropic)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _align_phase(v, ref):
    ip = np.sum(ref.conj() * v, axis=-1, keepdims=True)
    mag = np.abs(ip)
    return v * np.where(mag > 0, ip.conj() / np.where(mag > 0, mag, 1.0), 1.0)


def _reference_phase(v, ref_channel):
    r = v[:, ref_channel:ref_channel + 1]
    mag = np.abs(r)
    return v * np.where(mag > 0, r.conj() / np.where(mag > 0, mag, 1.0), 1.0)


def mvdr_weights(noise_scm: SpatialCovariance, steering, ref_channel: int = 0,
                 delta: float = 1e-6, max_delta: float = 1e-2, max_cond: float = 1e10) -> MvdrWeights:
    """w = Phi_n^-1 h / (h^H Phi_n^-1 h) on the diagonally loaded noise covariance.

    ``h`` is first rescaled to unit gain on ``ref_channel`` so the
    distortionless output is the target as heard at that mic; the rescaled
    vector is what :attr:`MvdrWeights.steering` stores.  Loading starts at
    ``delta * trace / M`` and grows tenfold up to ``max_delta`` while the
    loaded matrix stays ill-conditioned; bins still ill-conditioned are flagged.
    """
    h = steering.vectors if isinstance(steering, SteeringVectors) else np.asarray(steering)
    h = h.astype(complex)
    phi = noise_scm.matrices
    F, M, _ = phi.shape
    href = h[:, ref_channel]
    ok = np.abs(href) > 1e-8 * np.linalg.norm(h, axis=1)
    g = np.where(ok[:, None], h / np.where(ok, href, 1.0)[:, None], h)
    tr = np.real(np.trace(phi, axis1=1, axis2=2)) / M
    tr = np.where(tr > 0, tr, 1.0)
    eye = np.eye(M)
    loading = np.full(F, delta)
    loaded = phi + (loading * tr)[:, None, None] * eye
    cond = np.linalg.cond(loaded)
    while np.any(bad := (cond > max_cond) & (loading < max_delta)):
        loading[bad] = np.minimum(loading[bad] * 10, max_delta)
        loaded[bad] = phi[bad] + (loading[bad] * tr[bad])[:, None, None] * eye
        cond[bad] = np.linalg.cond(loaded[bad])
    flagged = (cond > max_cond) | ~ok
    num = np.linalg.solve(loaded, g[..., None])[..., 0]
    den = np.einsum("fm,fm->f", g.conj(), num)
    w = num / den[:, None]
    return MvdrWeights(w, g, ref_channel, loading, flagged)


def apply_beamformer(mix: Spectrogram, w: MvdrWeights) -> Waveform:
    weights = w.weights if isinstance(w, MvdrWeights) else np.asarray(w)
    if weights.shape != (mix.n_bins, mix.n_channels):
        raise ValueError(
            f"weights {weights.shape} do not match (bins, mics) {(mix.n_bins, mix.n_channels)}")
    y = np.einsum("fm,mtf->tf", weights.conj(), mix.bins)
    return istft(mix.with_bins(y[None]))


def beamform_spectrum(mix: Spectrogram, w: MvdrWeights) -> np.ndarray:
    return np.einsum("fm,mtf->tf", w.weights.conj(), mix.bins)


def mask_mvdr(mix: Spectrogram, target_mask, noise_mask, ref_channel: int = 0) -> MvdrWeights:
    """MVDR weights from a target mask and a noise (plus interference) mask."""
    speech = accumulate_scm(mix, target_mask)
    noise = accumulate_scm(mix, np.clip(noise_mask, 0, 1))
    return mvdr_weights(noise, steering_vector(speech, ref_channel), ref_channel)


def save_weights(path, weights: list[list[MvdrWeights]]) -> None:
    """Weights per (segment, stream) in the mask-file layout with magic ``CSSW``.

    The "frames" axis holds 2 * mics rows: real parts then imaginary parts.
    """
    n_seg = len(weights)
    n_streams = len(weights[0]) if n_seg else 0
    F, M = weights[0][0].weights.shape if n_seg else (0, 0)
    out = np.zeros((n_seg, n_streams, 2 * M, F), dtype="<f4")
    for i, seg in enumerate(weights):
        for j, w in enumerate(seg):
            out[i, j, :M] = w.weights.real.T
            out[i, j, M:] = w.weights.imag.T
    header = struct.pack("<4sIIIII", WEIGHTS_MAGIC, 1, n_seg, 2 * M, F, n_streams)
    Path(path).write_bytes(header + out.tobytes())


def load_weights(path) -> np.ndarray:
    """Complex weights shaped (segments, streams, bins, mics)."""
    raw = Path(path).read_bytes()
    magic, version, n_seg, rows, F, n_streams = struct.unpack("<4sIIIII", raw[:24])
    if magic != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    data = np.frombuffer(raw[24:], dtype="<f4").reshape(n_seg, n_streams, rows, F)
    M = rows // 2
    return (data[:, :, :M] + 1j * data[:, :, M:]).transpose(0, 1, 3, 2)
