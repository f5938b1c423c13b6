"""
Room impulse responses and diffuse noise
========================================

A shoebox image-method response, its decay time, and the coherence of the
simulated isotropic noise between two microphones.
"""

import numpy as np
from scipy.signal import csd, welch

from csskit.room import (ArrayGeometry, RoomSpec, direct_path_delay, image_method_rir,
                         isotropic_noise, schroeder_t60)

# one source, one mic, three reverberation times
src, mic = np.array([1.0, 1.1, 1.3]), np.array([2.9, 2.4, 1.1])
for t60 in (0.15, 0.3, 0.6):
    room = RoomSpec((4.0, 3.5, 2.6), t60)
    h = image_method_rir(room, src, ArrayGeometry(mic[None])).taps[0]
    k = direct_path_delay(room, src, mic)
    # coincident reflections can sum above the sinc-spread direct path
    print(f"T60 target {t60:.2f} s  ->  Schroeder fit {schroeder_t60(h):.3f} s, {len(h)} taps, "
          f"direct path at {k} ({h[k]:.4f}), strongest tap at {np.argmax(np.abs(h))}")

# diffuse noise: the real part of the cross-spectrum follows sinc(2 f d / c)
for d in (0.02, 0.05, 0.10):
    g = ArrayGeometry(np.array([[0.0, 0.0, 0.0], [d, 0.0, 0.0]]))
    n = isotropic_noise(g, 10.0, seed=3).samples
    f, pxy = csd(n[0], n[1], fs=16000, nperseg=512)
    _, pxx = welch(n[0], fs=16000, nperseg=512)
    _, pyy = welch(n[1], fs=16000, nperseg=512)
    coh = np.real(pxy) / np.sqrt(pxx * pyy)
    theory = np.sinc(2 * f * d / 343.0)
    sel = f < 4000
    print(f"spacing {d * 100:4.0f} cm: mean |coherence - sinc| below 4 kHz = "
          f"{np.mean(np.abs(coh[sel] - theory[sel])):.3f}")
    for k in (8, 32, 64, 96):
        print(f"    {f[k]:6.0f} Hz  measured {coh[k]:+.3f}  theory {theory[k]:+.3f}")
