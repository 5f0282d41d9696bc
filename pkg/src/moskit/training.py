"""MSE training loop: Adam with a triangular cyclical learning rate,
normalized (0,1) targets, and lowest-validation-loss checkpoint selection.

Everything is seeded and sequential, so a (data, seeds, config) triple maps
to one exact TrainReport and one exact checkpoint byte string.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .dataset import Manifest, SplitPair, normalize_label, to_mos_scale
from .errors import NumericError
from .features import FeatureMatrix, apply_norm, compute_norm_stats, fit_length
from .metrics import MetricsReport, compute_grouped_reports
from .model import (
    BatchInput,
    Checkpoint,
    CheckpointMeta,
    Mode,
    ModelConfig,
    ModelParams,
    backward,
    forward,
    init_params,
    load_checkpoint,
    predict_mos,
    save_checkpoint,
)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 50
    base_lr: float = 1e-3
    max_lr: float = 1e-2
    cycle_len_steps: int | None = None  # None: 4 x train batches per epoch
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.base_lr <= self.max_lr):
            raise ValueError("need 0 < base_lr <= max_lr")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.cycle_len_steps is not None:
            if self.cycle_len_steps < 2 or self.cycle_len_steps % 2:
                raise ValueError("cycle_len_steps must be even and >= 2")


def cyclical_lr(step: int, cfg: TrainConfig) -> float:
    """Triangular policy: base -> max over the first half-cycle, back down
    over the second; period cycle_len_steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.cycle_len_steps is None:
        raise ValueError("cycle_len_steps is unresolved (set it or let train() derive it)")
    half = cfg.cycle_len_steps // 2
    pos = step % cfg.cycle_len_steps
    frac = pos / half if pos <= half else (cfg.cycle_len_steps - pos) / half
    return cfg.base_lr + (cfg.max_lr - cfg.base_lr) * frac


@dataclass
class OptimizerState:
    """Adam first/second-moment accumulators mirroring the trainable tensors."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "OptimizerState":
        names = params.trainable_names
        return cls(
            m={n: np.zeros_like(params.tensors[n]) for n in names},
            v={n: np.zeros_like(params.tensors[n]) for n in names},
            t=0,
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update; inputs untouched, new tensors returned."""
    if lr < 0:
        raise ValueError(f"lr must be nonnegative, got {lr}")
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    t = state.t + 1
    new_m, new_v, updates = {}, {}, {}
    for name in params.trainable_names:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        updates[name] = params.tensors[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return params.replace(updates), OptimizerState(m=new_m, v=new_v, t=t)


class FeatureSource:
    """Resolves a clip id to its raw (unnormalized) feature matrix."""

    def load(self, clip_id: str) -> FeatureMatrix:
        raise NotImplementedError


class ManifestFeatureSource(FeatureSource):
    """Reads feature files from the `source` column of a feature manifest."""

    def __init__(self, manifest: Manifest):
        from .featfile import load_features

        self._manifest = manifest
        self._load = load_features

    def load(self, clip_id: str) -> FeatureMatrix:
        from .featfile import FeatureFileError

        rec = self._manifest[clip_id]
        try:
            return self._load(rec.source)
        except FeatureFileError as exc:
            raise FeatureFileError(f"clip {clip_id!r}: {exc}") from None


class InMemoryFeatureSource(FeatureSource):
    def __init__(self, table: Mapping[str, FeatureMatrix]):
        self._table = table

    def load(self, clip_id: str) -> FeatureMatrix:
        try:
            return self._table[clip_id]
        except KeyError:
            raise KeyError(f"no features for clip {clip_id!r}") from None


@dataclass
class TrainReport:
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int  # 0-based index into the loss lists
    checkpoint_path: Path
    cycle_len_steps: int


def _epoch_val_loss(params, sequences, targets, ids, batch_size) -> float:
    total_sq = 0.0
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        batch = BatchInput.from_sequences([sequences[i] for i in chunk])
        preds, _ = forward(params, batch, Mode.EVAL)
        t = np.array([targets[i] for i in chunk])
        total_sq += float(np.sum((preds - t) ** 2))
    return total_sq / len(ids)


def train(
    manifest: Manifest,
    split: SplitPair,
    features: FeatureSource,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    log: Callable[[str], None] | None = None,
) -> TrainReport:
    """Full recipe: normalization stats from the training split, per-epoch
    seeded shuffles, minibatches of batch_size (final partial batch kept),
    Adam with cyclical LR by global step, Eval-mode validation each epoch,
    checkpoint written whenever validation loss improves."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ids = sorted(split.train)
    val_ids = sorted(split.val)
    if not train_ids or not val_ids:
        raise ValueError("split must be non-empty on both sides")

    stats = compute_norm_stats(features.load(i) for i in train_ids)
    sequences = {
        i: fit_length(apply_norm(features.load(i), stats), model_cfg.seq_len)
        for i in train_ids + val_ids
    }
    targets = {
        i: normalize_label(manifest[i].mos_raw, manifest[i].corpus)
        for i in train_ids + val_ids
    }

    batches_per_epoch = -(-len(train_ids) // train_cfg.batch_size)
    if train_cfg.cycle_len_steps is None:
        train_cfg = dataclasses.replace(
            train_cfg, cycle_len_steps=max(2, 4 * batches_per_epoch)
        )

    params = init_params(model_cfg, train_cfg.seed)
    state = OptimizerState.fresh(params)
    shuffle_rng = np.random.default_rng(train_cfg.seed)
    ckpt_path = out_dir / "best.mosc"

    train_losses: list[float] = []
    val_losses: list[float] = []
    best_loss = np.inf
    best_epoch = -1
    global_step = 0
    for epoch in range(train_cfg.epochs):
        order = [train_ids[k] for k in shuffle_rng.permutation(len(train_ids))]
        epoch_sq = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            chunk = order[start : start + train_cfg.batch_size]
            batch = BatchInput.from_sequences([sequences[i] for i in chunk])
            t = np.array([targets[i] for i in chunk])
            lr = cyclical_lr(global_step, train_cfg)
            preds, cache = forward(
                params, batch, Mode.TRAIN,
                dropout_seed=_fold_seed(train_cfg.seed, global_step),
            )
            loss, grads = backward(params, batch, t, cache)
            if not np.isfinite(loss):
                raise NumericError(f"training diverged at step {global_step} (loss={loss})")
            params, state = adam_step(params, grads, state, lr, train_cfg)
            params = params.with_updated_running(cache)
            epoch_sq += loss * len(chunk)
            if log:
                log(f"epoch={epoch + 1} step={global_step} lr={lr:.6g} loss={loss:.6g}")
            global_step += 1
        train_losses.append(epoch_sq / len(order))
        val_loss = _epoch_val_loss(params, sequences, targets, val_ids, train_cfg.batch_size)
        val_losses.append(val_loss)
        if log:
            log(
                f"epoch={epoch + 1} train_loss={train_losses[-1]:.6g} "
                f"val_loss={val_loss:.6g}"
            )
        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            save_checkpoint(
                ckpt_path, params, stats,
                CheckpointMeta(seed=train_cfg.seed, epoch=epoch, val_loss=val_loss),
            )
    return TrainReport(
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=best_epoch,
        checkpoint_path=ckpt_path,
        cycle_len_steps=train_cfg.cycle_len_steps,
    )


def _fold_seed(seed: int, step: int) -> int:
    # distinct dropout stream per step, stable across runs
    return (seed * 1_000_003 + step) & 0x7FFFFFFF


def evaluate(
    checkpoint: Checkpoint | str | Path,
    manifest: Manifest,
    ids: Iterable[str],
    features: FeatureSource,
) -> list[MetricsReport]:
    """Score every id with the checkpoint and report metrics per corpus and
    pooled, on the common 1-5 MOS scale."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    ids = sorted(ids)
    if not ids:
        raise ValueError("empty evaluation id set")
    preds, labels, groups = [], [], []
    for clip_id in ids:
        rec = manifest[clip_id]
        fm = features.load(clip_id)
        preds.append(predict_mos(checkpoint.params, fm, checkpoint.norm_stats))
        labels.append(to_mos_scale(normalize_label(rec.mos_raw, rec.corpus)))
        groups.append(rec.corpus.value)
    return compute_grouped_reports(np.array(preds), np.array(labels), groups)
