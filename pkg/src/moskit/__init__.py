"""moskit: non-intrusive speech quality (MOS) prediction toolkit.

Pipeline: clip manifests and seeded splits -> MFCC extraction or ingested
embedding files -> per-channel normalization -> Bi-LSTM + attention-pooling
regressor with a sigmoid output -> MSE/Adam/cyclical-LR training -> RMSE,
Pearson, Spearman, and cubic-smoothed RMSE reports.
"""

__version__ = "0.1.0"
