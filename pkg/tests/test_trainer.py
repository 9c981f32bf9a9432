"""Optimizer and training loop: AdamW fixtures, warmup schedule,
overfitting signal, determinism.
"""

import json

import numpy as np
import pytest

from ardm import tensor as T
from ardm.dialog_model import ArdmParams, make_dialog
from ardm.model import ModelConfig
from ardm.tokenizer import SYSTEM, USER, train_bpe
from ardm.trainer import (OptimState, TrainConfig, adamw_step, clip_grads,
                          corpus_nll, lr_schedule, train)


class TestAdamW:
    def test_first_step_hand_fixture(self):
        # w=1, g=2, lr=0.1: m_hat=2, v_hat=4, update = 0.1 * 2/(2+eps)
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
        state = OptimState()
        out = adamw_step({"w": T.param(np.array([1.0]))},
                         {"w": np.array([2.0])}, state, cfg)
        assert abs(out["w"].data[0] - 0.9) < 1e-8
        assert state.step == 1

    def test_decoupled_weight_decay(self):
        # zero gradient: only the decay term moves the weight
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.01)
        out = adamw_step({"w": T.param(np.array([1.0]))},
                         {"w": np.array([0.0])}, OptimState(), cfg)
        assert abs(out["w"].data[0] - 0.999) < 1e-15

    def test_sign_follows_gradient(self):
        cfg = TrainConfig(learning_rate=0.01, weight_decay=0.0)
        state = OptimState()
        params = {"w": T.param(np.array([0.0, 0.0]))}
        out = adamw_step(params, {"w": np.array([1.0, -1.0])}, state, cfg)
        assert out["w"].data[0] < 0 < out["w"].data[1]

    def test_non_finite_gradient_rejected(self):
        cfg = TrainConfig()
        with pytest.raises(T.NonFiniteError):
            adamw_step({"w": T.param(np.array([1.0]))},
                       {"w": np.array([np.nan])}, OptimState(), cfg)

    def test_moments_persist_across_steps(self):
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
        state = OptimState()
        p = {"w": T.param(np.array([1.0]))}
        p = adamw_step(p, {"w": np.array([1.0])}, state, cfg)
        p = adamw_step(p, {"w": np.array([1.0])}, state, cfg)
        assert state.step == 2
        assert state.m["w"][0] > 0


class TestSchedule:
    def test_linear_warmup_then_constant(self):
        cfg = TrainConfig(learning_rate=0.1)
        values = [lr_schedule(s, cfg, warmup_steps=10) for s in range(15)]
        assert values[0] == 0.0
        assert abs(values[5] - 0.05) < 1e-15
        assert values[10] == 0.1
        assert values[14] == 0.1
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_linear_decay_option(self):
        cfg = TrainConfig(learning_rate=0.1, decay="linear", total_steps=20)
        assert lr_schedule(20, cfg, warmup_steps=10) == 0.0
        assert 0 < lr_schedule(15, cfg, warmup_steps=10) < 0.1

    def test_invalid_config_rejected(self):
        for kwargs in ({"learning_rate": 0.0}, {"warmup_steps": 0},
                       {"batch_size": 0}, {"overlong_policy": "explode"}):
            with pytest.raises(ValueError):
                TrainConfig(**kwargs)


class TestClip:
    def test_large_gradients_scaled_to_norm(self):
        grads = {"a": np.array([3.0, 4.0])}
        clip_grads(grads, 1.0)
        assert abs(np.linalg.norm(grads["a"]) - 1.0) < 1e-12

    def test_small_gradients_untouched(self):
        grads = {"a": np.array([0.1, 0.1])}
        before = grads["a"].copy()
        clip_grads(grads, 1.0)
        assert np.array_equal(grads["a"], before)


@pytest.fixture(scope="module")
def tiny_setup():
    vocab = train_bpe("hello there table for two please booked ok "
                      "A: B: \n", 300)
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=32, d_ff=64,
                      vocab_size=vocab.size, max_positions=128,
                      dropout_rate=0.0)
    dialog = make_dialog([(USER, "hello there"), (SYSTEM, "table for two"),
                          (USER, "please"), (SYSTEM, "booked ok")])
    return vocab, cfg, [dialog]


class TestTrainLoop:
    def test_overfits_single_dialog(self, tiny_setup):
        vocab, cfg, corpus = tiny_setup
        params = ArdmParams.fresh(cfg)
        tc = TrainConfig(learning_rate=3e-3, epochs=25, batch_size=1,
                         weight_decay=0.0, seed=0)
        before = corpus_nll(corpus, params, vocab)["ppl"]
        best, history = train(corpus, params, vocab, tc, val_corpus=corpus)
        after = corpus_nll(corpus, best, vocab)["ppl"]
        assert after < 0.2 * before
        assert len(history) == 25
        assert all({"epoch", "train_nll_user", "train_nll_system",
                    "val_ppl"} <= set(r) for r in history)

    def test_deterministic(self, tiny_setup):
        vocab, cfg, corpus = tiny_setup
        tc = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=1, seed=3)
        h1 = train(corpus, ArdmParams.fresh(cfg), vocab, tc,
                   val_corpus=corpus)[1]
        h2 = train(corpus, ArdmParams.fresh(cfg), vocab, tc,
                   val_corpus=corpus)[1]
        assert h1 == h2

    def test_metrics_jsonl_written(self, tiny_setup, tmp_path):
        vocab, cfg, corpus = tiny_setup
        tc = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=1)
        train(corpus, ArdmParams.fresh(cfg), vocab, tc, val_corpus=corpus,
              out_dir=tmp_path)
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert rec["epoch"] == 0 and "val_ppl" in rec
        assert (tmp_path / "manifest.json").exists()

    def test_shared_lm_trains_one_parameter_set(self, tiny_setup):
        vocab, cfg, corpus = tiny_setup
        params = ArdmParams.shared_lm(cfg)
        tc = TrainConfig(learning_rate=1e-3, epochs=1, batch_size=1)
        best, _ = train(corpus, params, vocab, tc)
        assert best.shared

    def test_overlong_policy_skip_and_error(self, tiny_setup):
        vocab, cfg, corpus = tiny_setup
        long_dialog = make_dialog([(USER, "hello there " * 60)])
        tc = TrainConfig(epochs=0, overlong_policy="error")
        from ardm.dialog_model import DialogTooLongError
        with pytest.raises(DialogTooLongError):
            train(corpus + [long_dialog], ArdmParams.fresh(cfg), vocab, tc)
        tc2 = TrainConfig(epochs=0, overlong_policy="skip")
        train(corpus + [long_dialog], ArdmParams.fresh(cfg), vocab, tc2)

    def test_empty_corpus_rejected(self, tiny_setup):
        vocab, cfg, _ = tiny_setup
        with pytest.raises(ValueError):
            train([], ArdmParams.fresh(cfg), vocab, TrainConfig(epochs=1))
