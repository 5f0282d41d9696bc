"""MFCC extraction, per-channel normalization, and fixed-length fitting.

The MFCC pipeline: centered STFT (reflect padding, periodic Hann) -> power
spectrum -> triangular mel filterbank (HTK mel scale, 0 Hz to Nyquist) ->
natural log clamped at a floor -> orthonormal DCT-II, first n_mfcc
coefficients kept. Frame count is 1 + floor(len/hop).

Channel statistics are pooled over every frame of every training clip
(population variance); the resulting mean/std whiten model inputs.
Sequences are cropped or zero-padded to a fixed 384 frames before batching.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.fft
import scipy.io.wavfile

from .errors import DataError
from .featfile import (  # noqa: F401  (re-exported: this is the feature surface)
    FeatureFileError,
    FeatureMatrix,
    SourceKind,
    load_features,
    save_features,
)

FIXED_SEQ_LEN = 384
STD_FLOOR = 1e-8
SAMPLE_RATE = 16000


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 400
    hop: int = 200
    n_mels: int = 128
    n_mfcc: int = 40
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.hop > self.n_fft:
            raise ValueError(f"hop ({self.hop}) must be <= n_fft ({self.n_fft})")
        if self.n_mfcc > self.n_mels:
            raise ValueError(f"n_mfcc ({self.n_mfcc}) must be <= n_mels ({self.n_mels})")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if min(self.sample_rate, self.n_fft, self.hop, self.n_mels, self.n_mfcc) < 1:
            raise ValueError("all MfccConfig sizes must be >= 1")

    @property
    def frame_stride_s(self) -> float:
        return self.hop / self.sample_rate


def hz_to_mel(freq_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters (n_mels x n_fft//2+1), edges evenly spaced in mel."""
    nyquist = sample_rate / 2.0
    bin_freqs = np.linspace(0.0, nyquist, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2))
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_freqs[None, :] - lo) / (ctr - lo)
    down = (hi - bin_freqs[None, :]) / (hi - ctr)
    return np.maximum(0.0, np.minimum(up, down))


def filter_band(cfg: MfccConfig, index: int) -> tuple[float, float]:
    """(low, high) Hz support of one mel filter."""
    edges = mel_to_hz(
        np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2.0), cfg.n_mels + 2)
    )
    return float(edges[index]), float(edges[index + 2])


def _frame_signal(waveform: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    n = len(waveform)
    n_frames = 1 + n // cfg.hop
    pad = cfg.n_fft // 2
    last_start = (n_frames - 1) * cfg.hop
    extra = max(0, last_start + cfg.n_fft - (n + 2 * pad))
    padded = np.pad(waveform, (pad, pad + extra), mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)[:: cfg.hop]
    return frames[:n_frames]


def compute_log_mel(waveform: np.ndarray, cfg: MfccConfig | None = None) -> np.ndarray:
    """Log mel spectrogram (frames x n_mels, float64), the pre-DCT stage."""
    cfg = cfg or MfccConfig()
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or len(waveform) < 1:
        raise ValueError("waveform must be a non-empty 1-D array")
    if not np.all(np.isfinite(waveform)):
        raise ValueError("waveform contains non-finite samples")
    frames = _frame_signal(waveform, cfg)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(cfg.n_fft) / cfg.n_fft)
    spectrum = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    fbank = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate)
    mel = spectrum @ fbank.T
    return np.log(np.maximum(mel, cfg.log_floor))


def compute_mfcc(waveform: np.ndarray, cfg: MfccConfig | None = None) -> FeatureMatrix:
    """MFCC feature matrix for 16 kHz mono samples (frames x n_mfcc)."""
    cfg = cfg or MfccConfig()
    log_mel = compute_log_mel(waveform, cfg)
    coeffs = scipy.fft.dct(log_mel, type=2, norm="ortho", axis=1)[:, : cfg.n_mfcc]
    return FeatureMatrix(
        data=coeffs.astype(np.float32),
        frame_stride_s=cfg.frame_stride_s,
        source_kind=SourceKind.MFCC,
    )


class AudioError(DataError):
    pass


def load_waveform(path: str | Path, expect_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a mono WAV (PCM16 or float32) at the expected rate; no resampling."""
    path = Path(path)
    try:
        rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise AudioError(f"audio file not found: {path}") from None
    except ValueError as exc:
        raise AudioError(f"cannot decode {path}: {exc}") from None
    if rate != expect_rate:
        raise AudioError(f"{path}: sample rate {rate} Hz, expected {expect_rate} Hz (resample first)")
    if data.ndim != 1:
        raise AudioError(f"{path}: {data.shape[1]} channels, expected mono")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise AudioError(f"{path}: unsupported sample format {data.dtype}, expected PCM16 or float32")


@dataclass(frozen=True)
class NormStats:
    """Per-channel whitening statistics from the training split."""

    mean: np.ndarray
    std: np.ndarray
    channels: int

    def __post_init__(self):
        if self.mean.shape != (self.channels,) or self.std.shape != (self.channels,):
            raise ValueError("mean/std shape must match channel count")
        if np.any(self.std < STD_FLOOR):
            raise ValueError(f"std below floor {STD_FLOOR}")


class NormAccumulator:
    """Mergeable partial statistics (count, sum, sum of squares), float64."""

    def __init__(self, channels: int):
        self.channels = channels
        self.count = 0
        self.sum = np.zeros(channels, dtype=np.float64)
        self.sumsq = np.zeros(channels, dtype=np.float64)

    def update(self, fm: FeatureMatrix) -> None:
        if fm.channels != self.channels:
            raise ValueError(
                f"channel-count mismatch: accumulator has {self.channels}, matrix has {fm.channels}"
            )
        data = fm.data.astype(np.float64)
        self.count += fm.frames
        self.sum += data.sum(axis=0)
        self.sumsq += (data * data).sum(axis=0)

    def merge(self, other: "NormAccumulator") -> None:
        if other.channels != self.channels:
            raise ValueError("channel-count mismatch in merge")
        self.count += other.count
        self.sum += other.sum
        self.sumsq += other.sumsq

    def finalize(self) -> NormStats:
        if self.count == 0:
            raise ValueError("no frames accumulated")
        mean = self.sum / self.count
        var = np.maximum(self.sumsq / self.count - mean * mean, 0.0)
        std = np.maximum(np.sqrt(var), STD_FLOOR)
        return NormStats(mean=mean, std=std, channels=self.channels)


def compute_norm_stats(train_features: Iterable[FeatureMatrix]) -> NormStats:
    """Pool mean/std over all frames of all training clips (population convention)."""
    acc: NormAccumulator | None = None
    for fm in train_features:
        if acc is None:
            acc = NormAccumulator(fm.channels)
        acc.update(fm)
    if acc is None:
        raise ValueError("empty feature stream")
    return acc.finalize()


def apply_norm(fm: FeatureMatrix, stats: NormStats) -> FeatureMatrix:
    if fm.channels != stats.channels:
        raise ValueError(
            f"channel-count mismatch: matrix has {fm.channels}, stats have {stats.channels}"
        )
    out = (fm.data.astype(np.float64) - stats.mean) / stats.std
    return FeatureMatrix(
        data=out.astype(np.float32),
        frame_stride_s=fm.frame_stride_s,
        source_kind=fm.source_kind,
    )


def save_norm_stats(stats: NormStats, path: str | Path) -> None:
    # single .npy (stacked [mean; std]) keeps the bytes deterministic
    np.save(path, np.stack([stats.mean, stats.std]).astype(np.float64), allow_pickle=False)


def load_norm_stats(path: str | Path) -> NormStats:
    arr = np.load(path, allow_pickle=False)
    if arr.ndim != 2 or arr.shape[0] != 2:
        raise DataError(f"{path}: expected a 2 x channels stats array, got {arr.shape}")
    return NormStats(mean=arr[0], std=arr[1], channels=arr.shape[1])


@dataclass
class FixedSequence:
    """Exactly FIXED_SEQ_LEN rows; rows at and beyond valid_frames are zero."""

    data: np.ndarray
    valid_frames: int


def fit_length(fm: FeatureMatrix, seq_len: int = FIXED_SEQ_LEN) -> FixedSequence:
    """Crop to the first seq_len frames or zero-pad the tail; values untouched."""
    frames = fm.frames
    if frames >= seq_len:
        return FixedSequence(data=fm.data[:seq_len].copy(), valid_frames=seq_len)
    out = np.zeros((seq_len, fm.channels), dtype=fm.data.dtype)
    out[:frames] = fm.data
    return FixedSequence(data=out, valid_frames=frames)
