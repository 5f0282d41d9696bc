#!/usr/bin/env python3
# The challenge metric suite on crafted prediction/label pairs: RMSE,
# Pearson, Spearman, and the cubic-smoothed RMSE that forgives any
# monotone miscalibration a third-order polynomial can undo.

import numpy as np

from moskit.metrics import (
    compute_grouped_reports,
    pcc,
    render_table,
    rmse,
    rmse_s,
    srcc,
)

rng = np.random.default_rng(0)
labels = rng.uniform(1, 5, size=120)

# --- a well-calibrated predictor ----------------------------------------------

good = np.clip(labels + 0.3 * rng.normal(size=labels.size), 1, 5)
print("calibrated predictor:")
print(f"  rmse {rmse(good, labels):.3f}  pcc {pcc(good, labels):.3f}  "
      f"srcc {srcc(good, labels):.3f}  rmse_s {rmse_s(good, labels):.3f}")

# --- a miscalibrated but monotone predictor ------------------------------------
# rank correlation ignores the warp; RMSE suffers; the cubic fit repairs most

warped = 1 + 4 * ((good - 1) / 4) ** 3
print("cubically warped predictor:")
print(f"  rmse {rmse(warped, labels):.3f}  pcc {pcc(warped, labels):.3f}  "
      f"srcc {srcc(warped, labels):.3f}  rmse_s {rmse_s(warped, labels):.3f}")
print(f"  srcc unchanged by the warp: {abs(srcc(warped, labels) - srcc(good, labels)) < 1e-12}")

# --- degenerate inputs are reported, never NaN ----------------------------------

constant = np.full(10, 3.0)
print(f"\nconstant predictor: pcc={pcc(constant, labels[:10])} (undefined, not NaN)")

# --- grouped reports: per corpus plus pooled ------------------------------------

groups = ["Tencent"] * 60 + ["PSTN"] * 60
reports = compute_grouped_reports(good, labels, groups)
print("\n" + render_table(reports))
