"""Evaluation metrics: RMSE, Pearson, Spearman, and cubic-smoothed RMSE.

All metrics operate on the denormalized 1-5 MOS scale. Correlations that
are undefined (constant input, n < 2) are reported as explicit None, never
as silent NaN. The smoothed RMSE maps predictions through a least-squares
third-order polynomial fitted against the labels (predictions -> labels
direction), one fit per evaluation group.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def _check_pair(pred, label, min_len=1):
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape or pred.ndim != 1:
        raise ValueError(f"length mismatch: {pred.shape} vs {label.shape}")
    if len(pred) < min_len:
        raise ValueError(f"need at least {min_len} samples, got {len(pred)}")
    return pred, label


def rmse(pred, label) -> float:
    """Root mean squared error."""
    pred, label = _check_pair(pred, label, min_len=1)
    return float(np.sqrt(np.mean((pred - label) ** 2)))


def pcc(x, y) -> float | None:
    """Sample Pearson correlation; None when either variance is zero."""
    x, y = _check_pair(x, y, min_len=2)
    xm = x - x.mean()
    ym = y - y.mean()
    sx = np.sqrt(np.sum(xm * xm))
    sy = np.sqrt(np.sum(ym * ym))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.sum(xm * ym) / (sx * sy))


def srcc(x, y) -> float | None:
    """Spearman rank correlation (average ranks for ties); None when a vector is constant."""
    x, y = _check_pair(x, y, min_len=2)
    return pcc(rankdata(x, method="average"), rankdata(y, method="average"))


@dataclass
class CubicFit:
    """Polynomial map fitted on the standardized predictor u = (p - center)/spread."""

    u_coeffs: np.ndarray  # ascending powers of u
    center: float
    spread: float
    order: int
    fallback: str | None = None

    def __call__(self, pred: np.ndarray) -> np.ndarray:
        u = (np.asarray(pred, dtype=np.float64) - self.center) / self.spread
        powers = np.stack([u**k for k in range(self.order + 1)], axis=1)
        return powers @ self.u_coeffs

    @property
    def coeffs(self) -> np.ndarray:
        """Coefficients in ascending powers of the raw predictor."""
        poly = np.polynomial.Polynomial(self.u_coeffs)(
            np.polynomial.Polynomial([-self.center / self.spread, 1.0 / self.spread])
        )
        return poly.coef


def fit_cubic_map(pred, label, order: int = 3) -> CubicFit:
    """Least-squares polynomial label ~ sum a_k pred^k via scaled normal
    equations on the standardized predictor (centering/scaling keeps the
    Gram matrix well conditioned without changing the model class).

    Rank-deficient designs (few distinct prediction values) fall back to the
    highest solvable order; the span is unchanged because Vandermonde columns
    lose independence from the top power down.
    """
    pred, label = _check_pair(pred, label, min_len=1)
    center = float(pred.mean())
    spread = float(pred.std()) or 1.0
    u = (pred - center) / spread
    fallback = None
    while order > 0:
        design = np.stack([u**k for k in range(order + 1)], axis=1)
        scale = np.maximum(np.abs(design).max(axis=0), 1e-30)
        scaled = design / scale
        if np.linalg.matrix_rank(scaled) == order + 1:
            break
        order -= 1
        fallback = f"rank-deficient design, cubic reduced to order {order}"
    if order == 0:
        return CubicFit(
            u_coeffs=np.array([label.mean()]), center=center, spread=spread,
            order=0, fallback=fallback,
        )
    gram = scaled.T @ scaled
    u_coeffs = np.linalg.solve(gram, scaled.T @ label) / scale
    return CubicFit(
        u_coeffs=u_coeffs, center=center, spread=spread, order=order, fallback=fallback
    )


def rmse_s(pred, label) -> float:
    """RMSE after the third-order polynomial smoothing of predictions."""
    value, _ = rmse_s_detailed(pred, label)
    return value


def rmse_s_detailed(pred, label) -> tuple[float, str | None]:
    """(smoothed RMSE, fallback flag). Fewer than 4 points fall back to plain RMSE."""
    pred, label = _check_pair(pred, label, min_len=1)
    if len(pred) < 4:
        return rmse(pred, label), "fewer than 4 samples, rmse_s falls back to rmse"
    fit = fit_cubic_map(pred, label)
    return rmse(fit(pred), label), fit.fallback


@dataclass
class MetricsReport:
    """Metric suite for one evaluation group ("all" or a corpus tag)."""

    grouping: str
    n: int
    rmse: float
    pcc: float | None
    srcc: float | None
    rmse_s: float
    flags: tuple[str, ...] = field(default_factory=tuple)


def compute_report(pred, label, grouping: str = "all") -> MetricsReport:
    pred, label = _check_pair(pred, label, min_len=1)
    flags: list[str] = []
    if len(pred) < 2:
        p = s = None
        flags.append("pcc/srcc undefined for a single sample")
    else:
        p = pcc(pred, label)
        s = srcc(pred, label)
        if p is None or s is None:
            flags.append("correlation undefined (constant input)")
    value_s, fallback = rmse_s_detailed(pred, label)
    if fallback:
        flags.append(fallback)
    return MetricsReport(
        grouping=grouping,
        n=len(pred),
        rmse=rmse(pred, label),
        pcc=p,
        srcc=s,
        rmse_s=value_s,
        flags=tuple(flags),
    )


def compute_grouped_reports(pred, label, groups) -> list[MetricsReport]:
    """One report per distinct group plus the pooled "all" report, pooled first."""
    pred, label = _check_pair(pred, label, min_len=1)
    groups = list(groups)
    if len(groups) != len(pred):
        raise ValueError("groups length must match predictions")
    reports = [compute_report(pred, label, grouping="all")]
    for tag in sorted(set(groups)):
        idx = [i for i, g in enumerate(groups) if g == tag]
        reports.append(compute_report(pred[idx], label[idx], grouping=tag))
    return reports


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.4f}"


def render_table(reports: list[MetricsReport]) -> str:
    header = f"{'group':<14} {'n':>6} {'rmse':>9} {'pcc':>9} {'srcc':>9} {'rmse_s':>9}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.grouping:<14} {r.n:>6} {r.rmse:>9.4f} {_fmt(r.pcc):>9} "
            f"{_fmt(r.srcc):>9} {r.rmse_s:>9.4f}"
        )
    return "\n".join(lines)


def to_delimited(reports: list[MetricsReport]) -> str:
    lines = ["grouping\tn\trmse\tpcc\tsrcc\trmse_s"]
    for r in reports:
        lines.append(
            f"{r.grouping}\t{r.n}\t{r.rmse!r}\t"
            f"{'undefined' if r.pcc is None else repr(r.pcc)}\t"
            f"{'undefined' if r.srcc is None else repr(r.srcc)}\t{r.rmse_s!r}"
        )
    return "\n".join(lines) + "\n"


def write_delimited(reports: list[MetricsReport], path: str | Path) -> None:
    Path(path).write_text(to_delimited(reports), encoding="utf-8")
