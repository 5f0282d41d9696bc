from __future__ import annotations

import numpy as np
import pytest

from moskit.errors import NumericError
from moskit.featfile import FeatureMatrix
from moskit.features import NormStats
from moskit.model import (
    BatchInput,
    CheckpointError,
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

SMALL = ModelConfig(
    input_channels=3, use_bilstm=True, lstm_layers=2, lstm_hidden=3,
    attpool_hidden=4, dropout_p=0.0, seq_len=6,
)


def random_params(cfg, seed=0, scale=0.4):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    return params.replace(
        {n: rng.normal(scale=scale, size=params.tensors[n].shape)
         for n in params.trainable_names}
    )


def random_batch(cfg, b, seed=0, valid=None):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(b, cfg.seq_len, cfg.input_channels))
    if valid is None:
        valid = rng.integers(1, cfg.seq_len + 1, size=b)
    return BatchInput(data=data, valid_frames=np.asarray(valid))


class TestInit:
    def test_deterministic(self):
        a = init_params(SMALL, seed=5)
        b = init_params(SMALL, seed=5)
        assert all(np.array_equal(a.tensors[n], b.tensors[n]) for n in a.tensors)
        c = init_params(SMALL, seed=6)
        assert any(not np.array_equal(a.tensors[n], c.tensors[n]) for n in a.trainable_names)

    def test_layer0_weight_shapes(self):
        cfg = ModelConfig(input_channels=40)
        params = init_params(cfg, 0)
        assert params["lstm0.fwd.w_in"].shape == (4 * 32, 40)
        assert params["lstm0.bwd.w_in"].shape == (4 * 32, 40)
        assert params["lstm1.fwd.w_in"].shape == (4 * 32, 64)
        assert params["att.w"].shape == (64, 64)

    def test_forget_gate_bias_is_one(self):
        params = init_params(SMALL, 0)
        h = SMALL.lstm_hidden
        bias = params["lstm0.fwd.bias"]
        assert np.all(bias[h : 2 * h] == 1.0)
        assert np.all(bias[:h] == 0.0)

    def test_parameter_count_closed_form(self):
        # independent arithmetic for the XLS-R + Bi-LSTM variant
        c, h, a = 1024, 32, 64
        bn = 2 * c
        layer0 = 2 * (4 * h * (c + h) + 4 * h)
        layer1 = 2 * (4 * h * (2 * h + h) + 4 * h)
        att = a * (2 * h) + a + a
        ff = a * (2 * h) + a + a + 1
        expected = bn + layer0 + layer1 + att + ff
        assert expected == 305_921
        params = init_params(ModelConfig(input_channels=1024), seed=0)
        assert params.num_trainable() == expected

    def test_parameter_count_no_bilstm(self):
        c, a = 1024, 64
        expected = 2 * c + a * c + 2 * a + a * c + a + a + 1
        params = init_params(ModelConfig(input_channels=1024, use_bilstm=False), seed=0)
        assert params.num_trainable() == expected

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(input_channels=0)
        with pytest.raises(ValueError):
            ModelConfig(input_channels=4, dropout_p=1.0)


class TestForward:
    def test_zero_params_output_half_attention_uniform(self):
        params = init_params(SMALL, 0)
        params = params.replace(
            {n: np.zeros_like(params.tensors[n]) for n in params.trainable_names}
        )
        batch = random_batch(SMALL, 4, seed=1, valid=[2, 6, 3, 1])
        preds, cache = forward(params, batch, Mode.EVAL)
        assert np.all(preds == 0.5)
        weights = cache["att_weights"]
        for i, v in enumerate([2, 6, 3, 1]):
            assert np.allclose(weights[i, :v], 1.0 / v)
            assert np.all(weights[i, v:] == 0.0)

    def test_output_shape_and_range(self):
        params = random_params(SMALL, seed=3)
        preds, _ = forward(params, random_batch(SMALL, 3, seed=2), Mode.EVAL)
        assert preds.shape == (3,)
        assert np.all((preds > 0) & (preds < 1))

    def test_attention_weights_are_a_distribution(self):
        params = random_params(SMALL, seed=4)
        batch = random_batch(SMALL, 5, seed=5, valid=[1, 2, 4, 6, 3])
        _, cache = forward(params, batch, Mode.EVAL)
        w = cache["att_weights"]
        assert np.all(w >= 0)
        assert np.allclose(w.sum(axis=1), 1.0)
        for i, v in enumerate([1, 2, 4, 6, 3]):
            assert np.all(w[i, v:] == 0.0)

    @pytest.mark.parametrize("mode", [Mode.EVAL, Mode.TRAIN])
    def test_padding_invariance(self, mode):
        # garbage beyond valid_frames must not leak into any prediction
        params = random_params(SMALL, seed=6)
        rng = np.random.default_rng(7)
        clean = rng.normal(size=(2, SMALL.seq_len, SMALL.input_channels))
        valid = np.array([2, 5])
        clean[0, 2:] = 0.0
        clean[1, 5:] = 0.0
        garbage = clean.copy()
        garbage[0, 2:] = 1e3 * rng.normal(size=(SMALL.seq_len - 2, SMALL.input_channels))
        garbage[1, 5:] = -999.0
        p_clean, _ = forward(params, BatchInput(clean, valid), mode, dropout_seed=9)
        p_garbage, _ = forward(params, BatchInput(garbage, valid), mode, dropout_seed=9)
        assert np.array_equal(p_clean, p_garbage)

    def test_eval_batch_composition_invariance(self):
        params = random_params(SMALL, seed=8)
        batch = random_batch(SMALL, 6, seed=9)
        together, _ = forward(params, batch, Mode.EVAL)
        for i in range(6):
            alone, _ = forward(
                params,
                BatchInput(batch.data[i : i + 1], batch.valid_frames[i : i + 1]),
                Mode.EVAL,
            )
            assert abs(alone[0] - together[i]) < 1e-6

    def test_eval_permutation_equivariance(self):
        params = random_params(SMALL, seed=10)
        batch = random_batch(SMALL, 5, seed=11)
        base, _ = forward(params, batch, Mode.EVAL)
        perm = np.array([3, 0, 4, 1, 2])
        shuffled, _ = forward(
            params, BatchInput(batch.data[perm], batch.valid_frames[perm]), Mode.EVAL
        )
        assert np.allclose(shuffled, base[perm], atol=1e-12)

    def test_eval_is_deterministic(self):
        params = random_params(SMALL, seed=12)
        batch = random_batch(SMALL, 3, seed=13)
        a, _ = forward(params, batch, Mode.EVAL)
        b, _ = forward(params, batch, Mode.EVAL)
        assert np.array_equal(a, b)

    def test_train_dropout_is_seeded(self):
        cfg = ModelConfig(input_channels=3, lstm_hidden=3, attpool_hidden=4,
                          dropout_p=0.5, seq_len=6)
        params = random_params(cfg, seed=14)
        batch = random_batch(cfg, 3, seed=15)
        a, _ = forward(params, batch, Mode.TRAIN, dropout_seed=1)
        b, _ = forward(params, batch, Mode.TRAIN, dropout_seed=1)
        c, _ = forward(params, batch, Mode.TRAIN, dropout_seed=2)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_shape_mismatch_rejected(self):
        params = random_params(SMALL)
        bad_channels = BatchInput(np.zeros((1, SMALL.seq_len, 5)), np.array([3]))
        with pytest.raises(ValueError, match="channels"):
            forward(params, bad_channels, Mode.EVAL)
        bad_len = BatchInput(np.zeros((1, 9, SMALL.input_channels)), np.array([3]))
        with pytest.raises(ValueError, match="frames"):
            forward(params, bad_len, Mode.EVAL)

    def test_non_finite_intermediate_reported(self):
        params = random_params(SMALL)
        data = np.zeros((1, SMALL.seq_len, SMALL.input_channels))
        data[0, 0, 0] = np.inf
        with pytest.raises(NumericError, match="batch norm"):
            forward(params, BatchInput(data, np.array([4])), Mode.EVAL)

    def test_no_bilstm_variant(self):
        cfg = ModelConfig(input_channels=5, use_bilstm=False, attpool_hidden=4,
                          dropout_p=0.0, seq_len=6)
        params = random_params(cfg, seed=16)
        preds, cache = forward(params, random_batch(cfg, 2, seed=17), Mode.EVAL)
        assert preds.shape == (2,)
        assert cache["att_in"].shape[2] == 5  # attention pools raw normalized channels


class TestBackward:
    def test_loss_zero_and_grads_zero_at_fit(self):
        params = random_params(SMALL, seed=20)
        batch = random_batch(SMALL, 3, seed=21)
        preds, cache = forward(params, batch, Mode.TRAIN)
        loss, grads = backward(params, batch, preds.copy(), cache)
        assert loss == 0.0
        assert all(np.all(g == 0) for g in grads.values())

    def test_mean_reduction_batch_duplication_invariance(self):
        params = random_params(SMALL, seed=22)
        batch = random_batch(SMALL, 2, seed=23)
        targets = np.array([0.3, 0.8])
        _, cache = forward(params, batch, Mode.TRAIN)
        loss1, grads1 = backward(params, batch, targets, cache)
        doubled = BatchInput(
            np.concatenate([batch.data, batch.data]),
            np.concatenate([batch.valid_frames, batch.valid_frames]),
        )
        _, cache2 = forward(params, doubled, Mode.TRAIN)
        loss2, grads2 = backward(params, doubled, np.tile(targets, 2), cache2)
        assert loss1 == pytest.approx(loss2, rel=1e-12)
        for name in grads1:
            assert np.allclose(grads1[name], grads2[name], atol=1e-12)

    def test_grads_cover_every_trainable(self):
        params = random_params(SMALL, seed=24)
        batch = random_batch(SMALL, 2, seed=25)
        _, cache = forward(params, batch, Mode.TRAIN)
        _, grads = backward(params, batch, np.array([0.4, 0.6]), cache)
        assert set(grads) == set(params.trainable_names)

    @pytest.mark.parametrize("use_bilstm", [True, False])
    @pytest.mark.parametrize("mode", [Mode.TRAIN, Mode.EVAL])
    def test_gradients_match_finite_differences(self, use_bilstm, mode):
        cfg = ModelConfig(
            input_channels=3, use_bilstm=use_bilstm, lstm_layers=2, lstm_hidden=2,
            attpool_hidden=3, dropout_p=0.0, seq_len=5,
        )
        worst = gradcheck(cfg, mode, seed=31)
        assert worst < 1e-5

    def test_target_shape_mismatch(self):
        params = random_params(SMALL)
        batch = random_batch(SMALL, 2, seed=1)
        _, cache = forward(params, batch, Mode.TRAIN)
        with pytest.raises(ValueError):
            backward(params, batch, np.array([0.5]), cache)


def gradcheck(cfg: ModelConfig, mode: Mode, seed: int) -> float:
    """Max deviation between backward() and central finite differences.

    Relative error when the gradient is meaningfully sized; below 1e-6 the
    comparison is absolute against 1e-9 (finite-difference noise floor).
    """
    rng = np.random.default_rng(seed)
    params = random_params(cfg, seed=seed)
    params = params.replace({
        "bn.running_mean": rng.normal(size=cfg.input_channels),
        "bn.running_var": rng.uniform(0.5, 1.5, size=cfg.input_channels),
    })
    b = int(rng.integers(1, 4))
    batch = BatchInput(
        rng.normal(size=(b, cfg.seq_len, cfg.input_channels)),
        rng.integers(1, cfg.seq_len + 1, size=b),
    )
    targets = rng.uniform(0.1, 0.9, size=b)

    def loss_at(p):
        preds, _ = forward(p, batch, mode, dropout_seed=7)
        return float(np.mean((preds - targets) ** 2))

    _, cache = forward(params, batch, mode, dropout_seed=7)
    _, grads = backward(params, batch, targets, cache)
    worst = 0.0
    for name in params.trainable_names:
        base = params.tensors[name]
        analytic = np.atleast_1d(grads[name]).ravel()
        flat = np.atleast_1d(base).ravel()
        for k in range(flat.size):
            h = 3e-5 * max(1.0, abs(flat[k]))
            plus, minus = flat.copy(), flat.copy()
            plus[k] += h
            minus[k] -= h
            lp = loss_at(params.replace({name: plus.reshape(base.shape)}))
            lm = loss_at(params.replace({name: minus.reshape(base.shape)}))
            numeric = (lp - lm) / (2 * h)
            denom = max(abs(analytic[k]), abs(numeric))
            if denom > 1e-6:
                worst = max(worst, abs(analytic[k] - numeric) / denom)
            elif abs(analytic[k] - numeric) > 1e-9:
                worst = max(worst, abs(analytic[k] - numeric))
    return worst


class TestPredictMos:
    def test_zero_params_give_midpoint(self):
        cfg = ModelConfig(input_channels=4, lstm_hidden=2, attpool_hidden=2,
                          dropout_p=0.0, seq_len=8)
        params = init_params(cfg, 0)
        params = params.replace(
            {n: np.zeros_like(params.tensors[n]) for n in params.trainable_names}
        )
        stats = NormStats(mean=np.zeros(4), std=np.ones(4), channels=4)
        fm = FeatureMatrix(np.ones((5, 4), np.float32), 0.0125)
        assert predict_mos(params, fm, stats) == 3.0

    def test_output_in_mos_range(self, rng):
        cfg = ModelConfig(input_channels=4, lstm_hidden=2, attpool_hidden=2,
                          dropout_p=0.0, seq_len=8)
        params = random_params(cfg, seed=40, scale=1.5)
        stats = NormStats(mean=np.zeros(4), std=np.ones(4), channels=4)
        for _ in range(5):
            fm = FeatureMatrix(rng.normal(size=(12, 4)).astype(np.float32), 0.0125)
            assert 1.0 <= predict_mos(params, fm, stats) <= 5.0

    def test_channel_mismatch(self):
        cfg = ModelConfig(input_channels=4, seq_len=8)
        params = init_params(cfg, 0)
        stats = NormStats(mean=np.zeros(3), std=np.ones(3), channels=3)
        fm = FeatureMatrix(np.ones((5, 3), np.float32), 0.0125)
        with pytest.raises(ValueError, match="channels"):
            predict_mos(params, fm, stats)


class TestCheckpoint:
    def stats(self, c):
        return NormStats(mean=np.arange(c, dtype=float), std=np.ones(c) * 2, channels=c)

    def test_round_trip(self, tmp_path):
        params = random_params(SMALL, seed=50)
        meta = CheckpointMeta(seed=9, epoch=3, val_loss=0.0123)
        path = tmp_path / "model.mosc"
        save_checkpoint(path, params, self.stats(SMALL.input_channels), meta)
        ckpt = load_checkpoint(path)
        assert ckpt.params.cfg == SMALL
        assert ckpt.meta == meta
        for name in params.tensors:
            assert np.array_equal(ckpt.params.tensors[name], params.tensors[name])
        assert np.array_equal(ckpt.norm_stats.mean, np.arange(SMALL.input_channels, dtype=float))

    def test_byte_determinism(self, tmp_path):
        params = random_params(SMALL, seed=51)
        meta = CheckpointMeta(seed=1, epoch=0, val_loss=0.5)
        for name in ("a.mosc", "b.mosc"):
            save_checkpoint(tmp_path / name, params, self.stats(SMALL.input_channels), meta)
        assert (tmp_path / "a.mosc").read_bytes() == (tmp_path / "b.mosc").read_bytes()

    def test_magic_mismatch(self, tmp_path):
        path = tmp_path / "x.mosc"
        save_checkpoint(
            path, random_params(SMALL), self.stats(SMALL.input_channels),
            CheckpointMeta(0, 0, 1.0),
        )
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.mosc"
        save_checkpoint(
            path, random_params(SMALL), self.stats(SMALL.input_channels),
            CheckpointMeta(0, 0, 1.0),
        )
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)


class TestModelParams:
    def test_rejects_wrong_shapes(self):
        params = init_params(SMALL, 0)
        tensors = dict(params.tensors)
        tensors["att.v"] = np.zeros(7)
        with pytest.raises(ValueError, match="att.v"):
            ModelParams(SMALL, tensors)

    def test_rejects_non_finite(self):
        params = init_params(SMALL, 0)
        tensors = dict(params.tensors)
        tensors["ff.b2"] = np.array(np.nan)
        with pytest.raises(ValueError, match="non-finite"):
            ModelParams(SMALL, tensors)

    def test_running_stats_update(self):
        params = init_params(SMALL, 0)
        cache = {
            "bn_batch_mean": np.full(SMALL.input_channels, 2.0),
            "bn_batch_var": np.full(SMALL.input_channels, 4.0),
        }
        updated = params.with_updated_running(cache)
        assert np.allclose(updated["bn.running_mean"], 0.9 * 0 + 0.1 * 2.0)
        assert np.allclose(updated["bn.running_var"], 0.9 * 1 + 0.1 * 4.0)
        # eval-style cache (no batch stats) is a no-op
        assert params.with_updated_running({}) is params
