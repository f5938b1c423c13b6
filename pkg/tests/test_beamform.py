import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csskit.beamform import (SpatialCovariance, accumulate_scm, apply_beamformer, load_weights,
                             mask_mvdr, mvdr_weights, save_weights, steering_vector)
from csskit.room import ArrayGeometry
from csskit.signal import SAMPLE_RATE, Spectrogram, StftConfig, Waveform, stft

C = 343.0


def _scm(mats):
    mats = np.asarray(mats)
    return SpatialCovariance(mats, np.ones(len(mats)), np.zeros(len(mats), bool))


def random_psd(rng, F, M, rank=None):
    rank = rank or M
    A = rng.standard_normal((F, M, rank)) + 1j * rng.standard_normal((F, M, rank))
    return A @ A.conj().transpose(0, 2, 1)


def angle(u, v):
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    ip = np.sum(u.conj() * v, axis=-1)
    perp = np.linalg.norm(v - ip[..., None] * u, axis=-1)
    return np.arctan2(perp, np.abs(ip))


def plane_wave_delays(geometry, azimuth):
    direction = np.array([np.cos(azimuth), np.sin(azimuth), 0.0])
    rel = geometry.mic_positions - geometry.mic_positions[0]
    return -(rel @ direction) / C


def delayed(x, delays, rate=SAMPLE_RATE):
    """Apply fractional delays exactly in the frequency domain (circular)."""
    n = len(x)
    X = np.fft.rfft(x)
    f = np.fft.rfftfreq(n, 1 / rate)
    return np.stack([np.fft.irfft(X * np.exp(-2j * np.pi * f * d), n) for d in delays])


def test_rank_one_plane_wave(rng):
    # narrowband plane wave built in the STFT domain: X_m(t, f) = S(t, f) h_m(f)
    geo = ArrayGeometry.circular7((0, 0, 0))
    d = plane_wave_delays(geo, 0.7)
    cfg = StftConfig()
    f = np.arange(cfg.n_bins) * SAMPLE_RATE / cfg.window_length
    h = np.exp(-2j * np.pi * f[:, None] * d[None])
    S = rng.standard_normal((60, cfg.n_bins)) + 1j * rng.standard_normal((60, cfg.n_bins))
    X = Spectrogram(np.einsum("tf,fm->mtf", S, h), cfg)
    scm = accumulate_scm(X, np.ones((X.n_frames, X.n_bins)))
    np.testing.assert_allclose(scm.matrices, scm.matrices.conj().transpose(0, 2, 1), atol=1e-10)
    assert np.all(np.linalg.matrix_rank(scm.matrices, tol=1e-8 * np.abs(scm.matrices).max()) == 1)
    sv = steering_vector(scm)
    assert np.max(angle(sv.vectors, h)) < 1e-8
    assert np.all(np.real(sv.vectors[:, 0]) >= 0) and np.allclose(np.imag(sv.vectors[:, 0]), 0)


def test_zero_mask_flagged(rng):
    X = stft(Waveform(rng.standard_normal((3, 4000))))
    scm = accumulate_scm(X, np.zeros((X.n_frames, X.n_bins)))
    assert scm.flagged.all()
    diag = np.einsum("fii->fi", scm.matrices)
    np.testing.assert_allclose(scm.matrices - diag[:, :, None] * np.eye(3), 0)
    with pytest.raises(ValueError):
        accumulate_scm(X, np.full((X.n_frames, X.n_bins), 1.5))


def test_rank_one_and_identity_steering(rng):
    h = rng.standard_normal((5, 4)) + 1j * rng.standard_normal((5, 4))
    sv = steering_vector(_scm(np.einsum("fm,fn->fmn", h, h.conj())))
    assert np.max(angle(sv.vectors, h)) < 1e-8
    np.testing.assert_allclose(np.linalg.norm(sv.vectors, axis=1), 1)
    iso = steering_vector(_scm(np.repeat(np.eye(4)[None], 3, 0).astype(complex)))
    assert iso.isotropic.all()
    np.testing.assert_allclose(np.linalg.norm(iso.vectors, axis=1), 1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), M=st.integers(2, 8))
def test_steering_matches_dense_eigensolver(seed, M):
    phi = random_psd(np.random.default_rng(seed), 16, M)
    sv = steering_vector(_scm(phi))
    _, vecs = np.linalg.eigh(phi)
    assert np.max(angle(sv.vectors, vecs[:, :, -1])) <= 1e-8
    assert sv.converged.all()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), M=st.integers(1, 8), rank=st.integers(1, 8))
def test_distortionless(seed, M, rank):
    rng = np.random.default_rng(seed)
    noise = _scm(random_psd(rng, 16, M, min(rank, M)))
    h = rng.standard_normal((16, M)) + 1j * rng.standard_normal((16, M))
    w = mvdr_weights(noise, h)
    resp = np.einsum("fm,fm->f", w.weights.conj(), w.steering)
    assert np.max(np.abs(resp - 1)) <= 1e-6
    assert np.all(np.isfinite(w.weights))
    # loaded covariances are PSD by an independent eigensolver
    loaded = noise.matrices + (w.loading * np.real(np.trace(noise.matrices, axis1=1, axis2=2)) / M)[:, None, None] * np.eye(M)
    assert np.linalg.eigvalsh(loaded).min() >= -1e-9


def test_identity_noise_closed_form(rng):
    h = rng.standard_normal((6, 4)) + 1j * rng.standard_normal((6, 4))
    h[:, 0] = np.abs(h[:, 0])
    w = mvdr_weights(_scm(np.repeat(np.eye(4)[None], 6, 0).astype(complex)), h)
    g = h / h[:, :1]
    expected = g / np.sum(np.abs(g) ** 2, axis=1, keepdims=True)
    np.testing.assert_allclose(w.weights, expected, rtol=1e-5)


def test_interferer_suppressed_narrowband():
    geo = ArrayGeometry.circular7((0, 0, 0))
    f = np.array([500.0, 1000.0, 2000.0, 3000.0])
    ht = np.exp(-2j * np.pi * f[:, None] * plane_wave_delays(geo, 0.3)[None])
    hi = np.exp(-2j * np.pi * f[:, None] * plane_wave_delays(geo, 2.1)[None])
    noise = _scm(np.einsum("fm,fn->fmn", hi, hi.conj()) + 1e-3 * np.eye(7))
    w = mvdr_weights(noise, ht)
    target = np.abs(np.einsum("fm,fm->f", w.weights.conj(), ht)) ** 2
    interf = np.abs(np.einsum("fm,fm->f", w.weights.conj(), hi)) ** 2
    assert np.all(10 * np.log10(target / interf) >= 20)


def test_single_channel_pass_through(rng):
    x = Waveform(rng.standard_normal(8000))
    X = stft(x)
    w = mvdr_weights(_scm(np.ones((X.n_bins, 1, 1), complex)), np.ones((X.n_bins, 1)))
    np.testing.assert_allclose(apply_beamformer(X, w).samples, x.samples, atol=1e-9)
    zero = Spectrogram(np.zeros_like(X.bins), X.config)
    assert not np.any(apply_beamformer(zero, w).samples)


def test_plane_wave_output_matches_reference_channel(rng):
    geo = ArrayGeometry.circular7((0, 0, 0))
    d = plane_wave_delays(geo, 1.1)
    x = delayed(rng.standard_normal(48000), d)
    X = stft(Waveform(x))
    ones = np.ones((X.n_frames, X.n_bins))
    w = mask_mvdr(X, ones, ones)
    y = apply_beamformer(X, w).samples[0]
    resid = 10 * np.log10(np.sum((y - x[0]) ** 2) / np.sum(x[0] ** 2))
    assert resid <= -40


def test_shape_mismatch(rng):
    X = stft(Waveform(rng.standard_normal((3, 4000))))
    with pytest.raises(ValueError):
        apply_beamformer(X, np.ones((X.n_bins, 2)))


def test_weights_file_round_trip(tmp_path, rng):
    ws = []
    for _ in range(2):
        seg = []
        for _ in range(2):
            h = rng.standard_normal((9, 3)) + 1j * rng.standard_normal((9, 3))
            seg.append(mvdr_weights(_scm(random_psd(rng, 9, 3)), h))
        ws.append(seg)
    save_weights(tmp_path / "w.cssw", ws)
    back = load_weights(tmp_path / "w.cssw")
    assert back.shape == (2, 2, 9, 3)
    np.testing.assert_allclose(back[1, 0], ws[1][0].weights.astype(np.complex64), rtol=1e-6)
    assert (tmp_path / "w.cssw").read_bytes()[:4] == b"CSSW"
