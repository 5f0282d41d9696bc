"""Synthetic desk-scale corpus: harmonic "speech proxy" clips mixed with
white noise at a per-clip SNR, labeled by an affine SNR-to-MOS rule.

The label rule is the documented ground truth: MOS rises linearly from 1 at
the bottom of the SNR range to 5 at the top (clamped). That gives a
learnable, monotone target for pipeline validation; it claims nothing about
perceptual fidelity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io.wavfile

from .dataset import ClipRecord, Corpus, Manifest, save_manifest
from .features import SAMPLE_RATE


@dataclass(frozen=True)
class SynthSpec:
    n_clips: int
    duration_s: float = 2.0
    snr_low_db: float = -5.0
    snr_high_db: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 1:
            raise ValueError("n_clips must be >= 1")
        if self.snr_low_db > self.snr_high_db:
            raise ValueError("snr_low_db must be <= snr_high_db")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")


def snr_to_mos(snr_db: float, spec: SynthSpec) -> float:
    """Affine SNR -> MOS map, clamped to [1, 5]."""
    span = spec.snr_high_db - spec.snr_low_db
    if span == 0:
        return 3.0  # degenerate range: flat midpoint label
    mos = 1.0 + 4.0 * (snr_db - spec.snr_low_db) / span
    return float(np.clip(mos, 1.0, 5.0))


def _speech_proxy(rng: np.random.Generator, n: int) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(90.0, 220.0)
    sig = np.zeros(n)
    for k in range(1, 7):
        sig += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k
    # syllabic-rate amplitude modulation
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    return sig * env


def synth_clip(spec: SynthSpec, index: int) -> tuple[np.ndarray, float, float]:
    """(float waveform peak-normalized to 0.9, snr_db, mos) for one clip."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(index,)))
    snr_db = float(rng.uniform(spec.snr_low_db, spec.snr_high_db))
    n = int(round(spec.duration_s * SAMPLE_RATE))
    sig = _speech_proxy(rng, n)
    sig = sig / np.sqrt(np.mean(sig**2))
    noise = rng.standard_normal(n)
    noise = noise / np.sqrt(np.mean(noise**2)) * 10.0 ** (-snr_db / 20.0)
    mix = sig + noise
    mix = 0.9 * mix / np.max(np.abs(mix))
    return mix, snr_db, snr_to_mos(snr_db, spec)


def generate_corpus(spec: SynthSpec, out_dir: str | Path) -> Manifest:
    """Write n_clips WAV files plus manifest.csv; byte-deterministic per seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(spec.n_clips):
        mix, _, mos = synth_clip(spec, i)
        clip_id = f"clip{i:04d}"
        path = out_dir / f"{clip_id}.wav"
        pcm = np.clip(np.round(mix * 32767.0), -32768, 32767).astype(np.int16)
        scipy.io.wavfile.write(path, SAMPLE_RATE, pcm)
        records.append(
            ClipRecord(
                id=clip_id,
                source=path,
                corpus=Corpus.SYNTHETIC,
                mos_raw=mos,
                duration_s=spec.duration_s,
            )
        )
    manifest = Manifest(records)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest
