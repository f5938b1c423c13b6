"""
Sliding-window separation of a simulated meeting
================================================

Render a short session at 40% overlap, separate it chunk by chunk using
oracle masks, and compare TF masking with mask-based MVDR.
"""

import numpy as np

from csskit import conversation as conv
from csskit.css import ChunkConfig, OracleIRM, run_css
from csskit.scoring import signal_eval
from csskit.synth import synth_pool

pool = synth_pool(6, 6, seed=1, duration_range=(3.0, 6.0))
plan = conv.plan_session(pool, conv.OverlapSpec(0.4), 4, 60, seed=2)
print(f"{len(plan.placements)} utterances, measured overlap {conv.measure_overlap(plan):.3f}")

setup = conv.default_setup(np.random.default_rng(3), n_positions=4)
session = conv.render_session(plan, pool, setup, seed=4, reference_channels=(0,))
print("mixture", session.mixture.samples.shape)

# 1.2 s history, 0.8 s current block, 0.4 s look-ahead
cfg = ChunkConfig.parse("1.2,0.8,0.4")
print("frames", (cfg.n_left, cfg.n_center, cfg.n_right), "latency", cfg.latency_seconds(), "s")

# MVDR statistics gathered over the whole input, or over each chunk window
for mode, scope in (("masking", "input"), ("mvdr", "input"), ("mvdr", "chunk")):
    res = run_css(session.mixture, cfg, OracleIRM.from_session(session), mode=mode, scm_scope=scope)
    swaps = sum(p == (1, 0) for p in res.masks.permutations)
    rows = signal_eval(res.streams, session.references)
    print(f"{mode:8s} ({scope:5s}) chunks {len(res.chunks)}, swaps applied {swaps}, "
          f"median best-stream SI-SNR {np.median([r.best for r in rows]):.2f} dB")

mix = [session.mixture.samples[0]] * 2
rows = signal_eval(mix, session.references)
print(f"{'mixture':16s} median SI-SNR {np.median([r.best for r in rows]):.2f} dB")
