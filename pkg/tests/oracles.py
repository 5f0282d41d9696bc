"""Independent brute-force oracles used by the unit and acceptance tests.

Everything here is written from the definitions with plain loops, on
purpose: these implementations must not share a code path with the package.
"""

from __future__ import annotations

import math

import numpy as np


def rmse_brute(pred, label) -> float:
    total = 0.0
    for p, y in zip(pred, label):
        total += (p - y) ** 2
    return math.sqrt(total / len(pred))


def pcc_brute(x, y) -> float | None:
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sxx = syy = 0.0
    for a, b in zip(x, y):
        sxy += (a - mx) * (b - my)
        sxx += (a - mx) ** 2
        syy += (b - my) ** 2
    if sxx == 0.0 or syy == 0.0:
        return None
    return sxy / math.sqrt(sxx * syy)


def ranks_brute(x) -> list[float]:
    # average rank: 1 + (# smaller) + (# equal - 1) / 2
    out = []
    for a in x:
        smaller = sum(1 for b in x if b < a)
        equal = sum(1 for b in x if b == a)
        out.append(1.0 + smaller + (equal - 1) / 2.0)
    return out


def srcc_brute(x, y) -> float | None:
    return pcc_brute(ranks_brute(x), ranks_brute(y))


def rmse_s_brute(pred, label) -> float:
    """Cubic least squares via numpy polyfit (independent solver path)."""
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if len(pred) < 4 or len(set(pred.tolist())) < 4:
        # mirror the fallback ladder: highest representable order
        order = min(3, len(set(pred.tolist())) - 1, len(pred) - 1)
    else:
        order = 3
    if order == 0:
        mapped = np.full_like(pred, label.mean())
    else:
        coeffs = np.polyfit(pred, label, deg=order)
        mapped = np.polyval(coeffs, pred)
    return rmse_brute(mapped, label)


# --- MFCC log-mel oracle ----------------------------------------------------


def naive_log_mel_frame(waveform, cfg, frame_index: int) -> np.ndarray:
    """Log mel vector of one centered frame via an O(N^2) DFT and a
    loop-built filterbank."""
    n_fft, hop, sr = cfg.n_fft, cfg.hop, cfg.sample_rate
    pad = n_fft // 2
    padded = np.pad(np.asarray(waveform, dtype=np.float64), (pad, pad + n_fft), mode="reflect")
    start = frame_index * hop
    frame = padded[start : start + n_fft]

    window = np.array([0.5 - 0.5 * math.cos(2.0 * math.pi * k / n_fft) for k in range(n_fft)])
    x = frame * window
    n_bins = n_fft // 2 + 1
    power = np.empty(n_bins)
    for k in range(n_bins):
        re = im = 0.0
        for t in range(n_fft):
            angle = -2.0 * math.pi * k * t / n_fft
            re += x[t] * math.cos(angle)
            im += x[t] * math.sin(angle)
        power[k] = re * re + im * im

    def to_mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    top = to_mel(sr / 2.0)
    edges = [from_mel(top * i / (cfg.n_mels + 1)) for i in range(cfg.n_mels + 2)]
    out = np.empty(cfg.n_mels)
    for m in range(cfg.n_mels):
        lo, ctr, hi = edges[m], edges[m + 1], edges[m + 2]
        acc = 0.0
        for k in range(n_bins):
            f = k * sr / n_fft
            if lo < f < hi:
                w = (f - lo) / (ctr - lo) if f <= ctr else (hi - f) / (hi - ctr)
                acc += w * power[k]
        out[m] = math.log(max(acc, cfg.log_floor))
    return out
