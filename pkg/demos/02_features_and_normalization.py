#!/usr/bin/env python3
# The feature pipeline, step by step: MFCC extraction on a pure tone, the
# binary feature-file container, per-channel whitening statistics, and
# fitting sequences to the fixed 384-frame model input.

from pathlib import Path

import numpy as np

from moskit.featfile import load_features, save_features
from moskit.features import (
    MfccConfig,
    apply_norm,
    compute_log_mel,
    compute_mfcc,
    compute_norm_stats,
    filter_band,
    fit_length,
)

out_dir = Path("demo_output/features")
out_dir.mkdir(parents=True, exist_ok=True)

# --- MFCC of a 1 kHz tone -----------------------------------------------------

cfg = MfccConfig()  # 25 ms windows, 12.5 ms hop, 128 mels, 40 coefficients
t = np.arange(16000) / cfg.sample_rate
tone = np.sin(2 * np.pi * 1000.0 * t)

log_mel = compute_log_mel(tone, cfg)
peak = int(np.argmax(log_mel[40]))
lo, hi = filter_band(cfg, peak)
print(f"log-mel shape: {log_mel.shape} (frames x mels)")
print(f"frame 40 peaks in filter {peak}, whose band [{lo:.0f}, {hi:.0f}] Hz contains 1000 Hz")

fm = compute_mfcc(tone, cfg)
print(f"MFCC matrix: {fm.frames} frames x {fm.channels} channels, stride {fm.frame_stride_s*1e3:.1f} ms")

# --- feature files round-trip losslessly --------------------------------------

path = out_dir / "tone.mosf"
save_features(fm, path)
back = load_features(path)
print(f"round trip identical: {np.array_equal(back.data, fm.data)} ({path.stat().st_size} bytes)")

# --- whitening statistics from a training stream ------------------------------

rng = np.random.default_rng(0)
stream = [compute_mfcc(rng.normal(size=8000) * rng.uniform(0.1, 1.0), cfg) for _ in range(10)]
stats = compute_norm_stats(stream)
print(f"\nchannel 0 raw:     mean {stats.mean[0]:8.3f}  std {stats.std[0]:.3f}")

renorm = compute_norm_stats([apply_norm(x, stats) for x in stream])
print(f"after apply_norm:  mean {renorm.mean[0]:8.1e}  std {renorm.std[0]:.6f}")

# --- fixed-length fitting: crop long clips, zero-pad short ones ---------------

short = fit_length(stream[0])
print(f"\n{stream[0].frames} frames -> {short.data.shape[0]} rows, valid_frames={short.valid_frames}")
print(f"padded tail is zero: {bool(np.all(short.data[short.valid_frames:] == 0))}")
