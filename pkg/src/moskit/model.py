"""Sequence regressor: batch norm -> optional Bi-LSTM -> attention pooling
feedforward -> sigmoid, with exact hand-written forward and backward passes.

Shapes follow the fixed-length batch convention (B, T, C) with a per-item
valid-frame count. Padded frames never influence an output: batch-norm
statistics are computed over valid frames only, each LSTM direction runs
with packed-sequence semantics (the backward direction consumes the
reversed valid prefix), layer outputs are zeroed on padded positions, and
attention weights on padded frames are exactly zero.

The attention head scores frames with v' tanh(W h + b), softmaxes over the
valid region, and feeds the pooled vector through a tanh hidden layer to a
sigmoid scalar in (0, 1). Forward/backward are pure: batch-norm running
statistics are returned in the cache and applied by the caller, so the
same call is repeatable (a requirement for finite-difference checking).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import expit as _sigmoid

from .errors import DataError, NumericError
from .features import FIXED_SEQ_LEN, FeatureMatrix, NormStats, apply_norm, fit_length

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
GATES = 4  # i, f, g, o


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int
    use_bilstm: bool = True
    lstm_layers: int = 2
    lstm_hidden: int = 32
    attpool_hidden: int = 64
    dropout_p: float = 0.1
    seq_len: int = FIXED_SEQ_LEN

    def __post_init__(self):
        sizes = (self.input_channels, self.lstm_layers, self.lstm_hidden,
                 self.attpool_hidden, self.seq_len)
        if min(sizes) < 1:
            raise ValueError("all ModelConfig sizes must be >= 1")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def pooled_dim(self) -> int:
        """Channel count entering attention pooling."""
        return 2 * self.lstm_hidden if self.use_bilstm else self.input_channels


def _tensor_shapes(cfg: ModelConfig) -> tuple[dict[str, tuple], dict[str, tuple]]:
    """(trainable shapes, buffer shapes), in fixed order."""
    c, h, a = cfg.input_channels, cfg.lstm_hidden, cfg.attpool_hidden
    d = cfg.pooled_dim
    shapes: dict[str, tuple] = {"bn.gamma": (c,), "bn.beta": (c,)}
    if cfg.use_bilstm:
        d_in = c
        for layer in range(cfg.lstm_layers):
            for direction in ("fwd", "bwd"):
                prefix = f"lstm{layer}.{direction}"
                shapes[f"{prefix}.w_in"] = (GATES * h, d_in)
                shapes[f"{prefix}.w_rec"] = (GATES * h, h)
                shapes[f"{prefix}.bias"] = (GATES * h,)
            d_in = 2 * h
    shapes["att.w"] = (a, d)
    shapes["att.bias"] = (a,)
    shapes["att.v"] = (a,)
    shapes["ff.w1"] = (a, d)
    shapes["ff.b1"] = (a,)
    shapes["ff.w2"] = (a,)
    shapes["ff.b2"] = ()
    buffers = {"bn.running_mean": (c,), "bn.running_var": (c,)}
    return shapes, buffers


class ModelParams:
    """Named float64 tensors (trainable) plus batch-norm running buffers."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, np.ndarray]):
        trainable, buffers = _tensor_shapes(cfg)
        expected = {**trainable, **buffers}
        if set(tensors) != set(expected):
            raise ValueError(
                f"tensor names do not match config: {sorted(set(tensors) ^ set(expected))}"
            )
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(
                    f"{name}: shape {tensors[name].shape}, expected {shape}"
                )
            if not np.all(np.isfinite(tensors[name])):
                raise ValueError(f"{name}: non-finite values")
        self.cfg = cfg
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.trainable_names = list(trainable)
        self.buffer_names = list(buffers)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def num_trainable(self) -> int:
        return sum(self.tensors[n].size for n in self.trainable_names)

    def replace(self, updates: dict[str, np.ndarray]) -> "ModelParams":
        merged = dict(self.tensors)
        merged.update(updates)
        return ModelParams(self.cfg, merged)

    def with_updated_running(self, cache: dict) -> "ModelParams":
        """Fold the batch statistics from a Train-mode forward into the buffers."""
        if "bn_batch_mean" not in cache:
            return self
        return self.replace({
            "bn.running_mean": (1 - BN_MOMENTUM) * self["bn.running_mean"]
            + BN_MOMENTUM * cache["bn_batch_mean"],
            "bn.running_var": (1 - BN_MOMENTUM) * self["bn.running_var"]
            + BN_MOMENTUM * cache["bn_batch_var"],
        })


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Uniform fan-in init for weights, forget-gate bias 1, BN identity."""
    rng = np.random.default_rng(seed)
    trainable, buffers = _tensor_shapes(cfg)
    h = cfg.lstm_hidden
    tensors: dict[str, np.ndarray] = {}
    for name, shape in trainable.items():
        if name == "bn.gamma":
            tensors[name] = np.ones(shape)
        elif name in ("bn.beta", "att.bias", "ff.b1", "ff.b2"):
            tensors[name] = np.zeros(shape)
        elif name.endswith(".bias"):  # lstm biases: forget-gate slice at 1
            bias = np.zeros(shape)
            bias[h : 2 * h] = 1.0
            tensors[name] = bias
        else:
            fan_in = shape[-1] if len(shape) > 1 else shape[0]
            limit = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    tensors["bn.running_mean"] = np.zeros(buffers["bn.running_mean"])
    tensors["bn.running_var"] = np.ones(buffers["bn.running_var"])
    return ModelParams(cfg, tensors)


@dataclass
class BatchInput:
    """(B, seq_len, C) batch with per-item valid frame counts."""

    data: np.ndarray
    valid_frames: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.valid_frames = np.asarray(self.valid_frames, dtype=np.int64)
        if self.data.ndim != 3:
            raise ValueError(f"batch must be (B, T, C), got {self.data.shape}")
        if self.valid_frames.shape != (self.data.shape[0],):
            raise ValueError("valid_frames must have one entry per item")
        t = self.data.shape[1]
        if np.any((self.valid_frames < 1) | (self.valid_frames > t)):
            raise ValueError(f"valid_frames must lie in [1, {t}]")

    @classmethod
    def from_sequences(cls, seqs) -> "BatchInput":
        data = np.stack([np.asarray(s.data, dtype=np.float64) for s in seqs])
        valid = np.array([s.valid_frames for s in seqs], dtype=np.int64)
        return cls(data=data, valid_frames=valid)


def _check_finite(stage: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values after {stage}")


def _reverse_valid(x: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per item: reverse the first valid_b entries along time, zero the rest.

    An involution whose adjoint is itself, which is what makes the reversed
    LSTM direction differentiable by re-applying the same map.
    """
    t = x.shape[1]
    idx = valid[:, None] - 1 - np.arange(t)[None, :]
    keep = idx >= 0
    gather = np.where(keep, idx, 0)
    if x.ndim == 3:
        out = np.take_along_axis(x, gather[:, :, None], axis=1)
        return out * keep[:, :, None]
    out = np.take_along_axis(x, gather, axis=1)
    return out * keep


def _lstm_dir_forward(u, w_in, w_rec, bias):
    """One direction over (B, T, D_in); returns (h_seq (B, T, H), cache)."""
    b, t, _ = u.shape
    h_dim = w_rec.shape[1]
    zx = u @ w_in.T + bias  # input contribution for every step at once
    h = np.zeros((b, h_dim))
    c = np.zeros((b, h_dim))
    acts = np.empty((b, t, GATES * h_dim))
    cells = np.empty((b, t, h_dim))
    tanh_cells = np.empty((b, t, h_dim))
    hs = np.empty((b, t, h_dim))
    for step in range(t):
        z = zx[:, step] + h @ w_rec.T
        gi = _sigmoid(z[:, :h_dim])
        gf = _sigmoid(z[:, h_dim : 2 * h_dim])
        gg = np.tanh(z[:, 2 * h_dim : 3 * h_dim])
        go = _sigmoid(z[:, 3 * h_dim :])
        c = gf * c + gi * gg
        tc = np.tanh(c)
        h = go * tc
        acts[:, step, :h_dim] = gi
        acts[:, step, h_dim : 2 * h_dim] = gf
        acts[:, step, 2 * h_dim : 3 * h_dim] = gg
        acts[:, step, 3 * h_dim :] = go
        cells[:, step] = c
        tanh_cells[:, step] = tc
        hs[:, step] = h
    return hs, {"u": u, "acts": acts, "cells": cells, "tanh_cells": tanh_cells, "hs": hs}


def _lstm_dir_backward(dh_seq, cache, w_in, w_rec):
    """BPTT for one direction; returns (du, dw_in, dw_rec, dbias)."""
    u, acts, cells, tanh_cells, hs = (
        cache["u"], cache["acts"], cache["cells"], cache["tanh_cells"], cache["hs"],
    )
    b, t, _ = u.shape
    h_dim = w_rec.shape[1]
    dz_all = np.empty((b, t, GATES * h_dim))
    dh_next = np.zeros((b, h_dim))
    dc_next = np.zeros((b, h_dim))
    for step in reversed(range(t)):
        gi = acts[:, step, :h_dim]
        gf = acts[:, step, h_dim : 2 * h_dim]
        gg = acts[:, step, 2 * h_dim : 3 * h_dim]
        go = acts[:, step, 3 * h_dim :]
        tc = tanh_cells[:, step]
        c_prev = cells[:, step - 1] if step > 0 else np.zeros((b, h_dim))
        dh = dh_seq[:, step] + dh_next
        dgo = dh * tc
        dc = dc_next + dh * go * (1.0 - tc * tc)
        dgi = dc * gg
        dgg = dc * gi
        dgf = dc * c_prev
        dc_next = dc * gf
        dz = dz_all[:, step]
        dz[:, :h_dim] = dgi * gi * (1.0 - gi)
        dz[:, h_dim : 2 * h_dim] = dgf * gf * (1.0 - gf)
        dz[:, 2 * h_dim : 3 * h_dim] = dgg * (1.0 - gg * gg)
        dz[:, 3 * h_dim :] = dgo * go * (1.0 - go)
        dh_next = dz @ w_rec
    du = dz_all @ w_in
    flat_dz = dz_all.reshape(b * t, -1)
    dw_in = flat_dz.T @ u.reshape(b * t, -1)
    h_prev = np.concatenate([np.zeros((b, 1, h_dim)), hs[:, :-1]], axis=1)
    dw_rec = flat_dz.T @ h_prev.reshape(b * t, h_dim)
    dbias = dz_all.sum(axis=(0, 1))
    return du, dw_in, dw_rec, dbias


def forward(
    params: ModelParams,
    batch: BatchInput,
    mode: Mode,
    dropout_seed: int = 0,
) -> tuple[np.ndarray, dict]:
    """Predictions in (0, 1) plus the cache consumed by backward().

    Train mode uses masked batch statistics for batch norm and applies
    seeded dropout; Eval mode uses the running statistics and no dropout.
    """
    cfg = params.cfg
    x = batch.data
    b, t, c = x.shape
    if c != cfg.input_channels:
        raise ValueError(f"batch has {c} channels, config expects {cfg.input_channels}")
    if t != cfg.seq_len:
        raise ValueError(f"batch has {t} frames, config expects {cfg.seq_len}")
    valid = batch.valid_frames
    t_eff = int(valid.max())  # padded tail beyond the longest item never computed
    x = x[:, :t_eff]
    mask = (np.arange(t_eff)[None, :] < valid[:, None]).astype(np.float64)
    mask3 = mask[:, :, None]
    use_dropout = mode is Mode.TRAIN and cfg.dropout_p > 0.0
    rng = np.random.default_rng(dropout_seed) if use_dropout else None
    keep = 1.0 - cfg.dropout_p

    cache: dict = {"mode": mode, "valid": valid, "mask": mask, "t_eff": t_eff}

    # batch norm over valid frames only
    if mode is Mode.TRAIN:
        n_valid = mask.sum() * 1.0
        mean = (x * mask3).sum(axis=(0, 1)) / n_valid
        var = (((x - mean) ** 2) * mask3).sum(axis=(0, 1)) / n_valid
        cache["bn_batch_mean"] = mean
        cache["bn_batch_var"] = var
        cache["bn_n"] = n_valid
    else:
        mean = params["bn.running_mean"]
        var = params["bn.running_var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    seq = (params["bn.gamma"] * xhat + params["bn.beta"]) * mask3
    cache["bn_xhat"] = xhat
    cache["bn_inv_std"] = inv_std
    _check_finite("batch norm", seq)

    layer_caches = []
    if cfg.use_bilstm:
        for layer in range(cfg.lstm_layers):
            lc: dict = {}
            fwd_h, lc["fwd"] = _lstm_dir_forward(
                seq,
                params[f"lstm{layer}.fwd.w_in"],
                params[f"lstm{layer}.fwd.w_rec"],
                params[f"lstm{layer}.fwd.bias"],
            )
            rev_in = _reverse_valid(seq, valid)
            bwd_h_rev, lc["bwd"] = _lstm_dir_forward(
                rev_in,
                params[f"lstm{layer}.bwd.w_in"],
                params[f"lstm{layer}.bwd.w_rec"],
                params[f"lstm{layer}.bwd.bias"],
            )
            seq = np.concatenate([fwd_h * mask3, _reverse_valid(bwd_h_rev, valid)], axis=2)
            if use_dropout:
                drop = (rng.random(seq.shape) >= cfg.dropout_p) / keep
                seq = seq * drop
                lc["dropout"] = drop
            _check_finite(f"bi-lstm layer {layer}", seq)
            layer_caches.append(lc)
    cache["layers"] = layer_caches
    cache["att_in"] = seq

    # attention pooling over valid frames
    pre = seq @ params["att.w"].T + params["att.bias"]
    act = np.tanh(pre)
    scores = act @ params["att.v"]
    scores = np.where(mask > 0, scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(scores) * mask
    weights = weights / weights.sum(axis=1, keepdims=True)
    pooled = (weights[:, :, None] * seq).sum(axis=1)
    cache["att_act"] = act
    cache["att_weights"] = weights
    cache["pooled"] = pooled
    _check_finite("attention pooling", pooled)

    hidden = np.tanh(pooled @ params["ff.w1"].T + params["ff.b1"])
    cache["ff_hidden"] = hidden
    if use_dropout:
        drop = (rng.random(hidden.shape) >= cfg.dropout_p) / keep
        hidden = hidden * drop
        cache["ff_dropout"] = drop
    cache["ff_hidden_dropped"] = hidden
    logits = hidden @ params["ff.w2"] + params["ff.b2"]
    preds = _sigmoid(logits)
    cache["preds"] = preds
    _check_finite("output head", preds)
    return preds, cache


def backward(
    params: ModelParams,
    batch: BatchInput,
    targets: np.ndarray,
    cache: dict,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over the batch and exact gradients for every
    trainable tensor (backprop through time over both LSTM directions and
    through the masked softmax)."""
    cfg = params.cfg
    targets = np.asarray(targets, dtype=np.float64)
    preds = cache["preds"]
    if targets.shape != preds.shape:
        raise ValueError(f"targets shape {targets.shape}, expected {preds.shape}")
    b = len(preds)
    diff = preds - targets
    loss = float(np.mean(diff**2))

    grads: dict[str, np.ndarray] = {}
    mask = cache["mask"]
    mask3 = mask[:, :, None]
    valid = cache["valid"]

    dlogits = (2.0 / b) * diff * preds * (1.0 - preds)
    hidden_dropped = cache["ff_hidden_dropped"]
    grads["ff.w2"] = hidden_dropped.T @ dlogits
    grads["ff.b2"] = np.asarray(dlogits.sum())
    dhidden = dlogits[:, None] * params["ff.w2"]
    if "ff_dropout" in cache:
        dhidden = dhidden * cache["ff_dropout"]
    dhidden_pre = dhidden * (1.0 - cache["ff_hidden"] ** 2)
    grads["ff.w1"] = dhidden_pre.T @ cache["pooled"]
    grads["ff.b1"] = dhidden_pre.sum(axis=0)
    dpooled = dhidden_pre @ params["ff.w1"]

    # attention backward
    seq = cache["att_in"]
    weights = cache["att_weights"]
    act = cache["att_act"]
    dweights = (dpooled[:, None, :] * seq).sum(axis=2)
    dseq = weights[:, :, None] * dpooled[:, None, :]
    dscores = weights * (dweights - (weights * dweights).sum(axis=1, keepdims=True))
    grads["att.v"] = np.einsum("bt,bta->a", dscores, act)
    dpre = (dscores[:, :, None] * params["att.v"]) * (1.0 - act * act)
    grads["att.w"] = np.einsum("bta,btd->ad", dpre, seq)
    grads["att.bias"] = dpre.sum(axis=(0, 1))
    dseq = dseq + dpre @ params["att.w"]

    if cfg.use_bilstm:
        h_dim = cfg.lstm_hidden
        for layer in reversed(range(cfg.lstm_layers)):
            lc = cache["layers"][layer]
            if "dropout" in lc:
                dseq = dseq * lc["dropout"]
            dfwd = dseq[:, :, :h_dim] * mask3
            dbwd = dseq[:, :, h_dim:]
            du_f, dw_in_f, dw_rec_f, db_f = _lstm_dir_backward(
                dfwd, lc["fwd"],
                params[f"lstm{layer}.fwd.w_in"], params[f"lstm{layer}.fwd.w_rec"],
            )
            du_b_rev, dw_in_b, dw_rec_b, db_b = _lstm_dir_backward(
                _reverse_valid(dbwd, valid), lc["bwd"],
                params[f"lstm{layer}.bwd.w_in"], params[f"lstm{layer}.bwd.w_rec"],
            )
            grads[f"lstm{layer}.fwd.w_in"] = dw_in_f
            grads[f"lstm{layer}.fwd.w_rec"] = dw_rec_f
            grads[f"lstm{layer}.fwd.bias"] = db_f
            grads[f"lstm{layer}.bwd.w_in"] = dw_in_b
            grads[f"lstm{layer}.bwd.w_rec"] = dw_rec_b
            grads[f"lstm{layer}.bwd.bias"] = db_b
            dseq = du_f + _reverse_valid(du_b_rev, valid)

    # batch norm backward; the batch-statistics path carries no parameter
    # gradient (xhat depends on the input alone), so gamma/beta close it out
    dbn_out = dseq * mask3
    grads["bn.gamma"] = (dbn_out * cache["bn_xhat"]).sum(axis=(0, 1))
    grads["bn.beta"] = dbn_out.sum(axis=(0, 1))

    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for {name}")
    return loss, grads


def predict_mos(params: ModelParams, features: FeatureMatrix, stats: NormStats) -> float:
    """Score one clip: normalize, fit to length, Eval forward, map to [1, 5]."""
    if features.channels != params.cfg.input_channels:
        raise ValueError(
            f"feature matrix has {features.channels} channels, "
            f"model expects {params.cfg.input_channels}"
        )
    seq = fit_length(apply_norm(features, stats), params.cfg.seq_len)
    batch = BatchInput.from_sequences([seq])
    preds, _ = forward(params, batch, Mode.EVAL)
    return float(1.0 + 4.0 * preds[0])


# --- checkpoint container ("MOSC") -----------------------------------------

CHECKPOINT_MAGIC = b"MOSC"
CHECKPOINT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHI")


class CheckpointError(DataError):
    pass


@dataclass(frozen=True)
class CheckpointMeta:
    seed: int
    epoch: int
    val_loss: float


@dataclass
class Checkpoint:
    params: ModelParams
    norm_stats: NormStats
    meta: CheckpointMeta


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    norm_stats: NormStats,
    meta: CheckpointMeta,
) -> None:
    """Self-contained versioned binary; canonical header bytes so identical
    training runs serialize identically."""
    names = params.trainable_names + params.buffer_names
    arrays = [params.tensors[n] for n in names]
    arrays += [norm_stats.mean.astype(np.float64), norm_stats.std.astype(np.float64)]
    names = names + ["norm.mean", "norm.std"]
    table = []
    offset = 0
    for name, arr in zip(names, arrays):
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "config": asdict(params.cfg),
        "meta": {"seed": meta.seed, "epoch": meta.epoch, "val_loss": meta.val_loss},
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, header_len = _CKPT_HEAD.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: magic-number mismatch ({magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    body = _CKPT_HEAD.size
    try:
        header = json.loads(raw[body : body + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    cfg = ModelConfig(**header["config"])
    payload = body + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = payload + entry["offset"]
        end = start + size * 8
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw[start:end], dtype="<f8").reshape(shape).copy()
    norm_mean = tensors.pop("norm.mean")
    norm_std = tensors.pop("norm.std")
    meta = header["meta"]
    return Checkpoint(
        params=ModelParams(cfg, tensors),
        norm_stats=NormStats(mean=norm_mean, std=norm_std, channels=len(norm_mean)),
        meta=CheckpointMeta(
            seed=meta["seed"], epoch=meta["epoch"], val_loss=meta["val_loss"]
        ),
    )
