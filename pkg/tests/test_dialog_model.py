"""Two-role dialog scoring: factorization oracle, role separation,
bundle persistence.
"""

import numpy as np
import pytest

from ardm import tensor as T
from ardm.dialog_model import (ArdmParams, DialogTooLongError, Turn,
                               dialog_nll, load_bundle, make_dialog,
                               save_bundle)
from ardm.model import ModelConfig, empty_memory, forward_with_memory
from ardm.tokenizer import SYSTEM, USER, format_turn, train_bpe

CFG = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64,
                  vocab_size=300, max_positions=128, dropout_rate=0.0)


@pytest.fixture(scope="module")
def vocab():
    v = train_bpe(["A: hello there how are you\n\n\n"
                   "B: i am fine thanks for asking\n\n\n"], 300)
    return v


@pytest.fixture(scope="module")
def params(vocab):
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64,
                      vocab_size=vocab.size, max_positions=128,
                      dropout_rate=0.0)
    return ArdmParams(cfg)


def oracle_nll(dialog, params, vocab):
    """Token-at-a-time scoring pass, switching parameter sets per token.

    Position p's distribution comes from the model owning position p; the
    NLL of the predicted token goes to the owner of the token's turn.
    Independent implementation of the alternating factorization used to
    cross-check dialog_nll.
    """
    owners = []
    tokens = []
    for turn in dialog:
        ids = vocab.encode(format_turn(turn.role, turn.text))
        tokens.extend(ids)
        owners.extend([turn.role] * len(ids))
    mem = {USER: empty_memory(params.config),
           SYSTEM: empty_memory(params.config)}
    nll = {USER: 0.0, SYSTEM: 0.0}
    # Both role models process every token so either can predict at any
    # frontier; only the owner's K/V rows conceptually matter, but feeding
    # both keeps this oracle trivially correct and totally different in
    # structure from the implementation under test.
    logits = {}
    for p, (tok, owner) in enumerate(zip(tokens, owners)):
        if p > 0:
            prev_owner = owners[p - 1]
            row = logits[prev_owner]
            z = row - row.max()
            logp = z - np.log(np.exp(z).sum())
            nll[owner] -= float(logp[tok])
        for role in (USER, SYSTEM):
            out, mem[role] = forward_with_memory(
                [tok], mem[role], params.for_role(role), params.config)
            logits[role] = out.data[-1]
    return nll


class TestDialogNll:
    def test_matches_token_level_oracle(self, params, vocab):
        dialog = make_dialog([
            (USER, "hello there"),
            (SYSTEM, "i am fine"),
            (USER, "how are you"),
            (SYSTEM, "thanks for asking"),
        ])
        r = dialog_nll(dialog, params, vocab)
        ref = oracle_nll(dialog, params, vocab)
        assert abs(r["user_nll"].item() - ref[USER]) < 1e-8
        assert abs(r["system_nll"].item() - ref[SYSTEM]) < 1e-8

    def test_total_is_sum_of_roles(self, params, vocab):
        dialog = make_dialog([(USER, "hello"), (SYSTEM, "hi there")])
        r = dialog_nll(dialog, params, vocab)
        assert abs(r["total_nll"].item() - r["user_nll"].item()
                   - r["system_nll"].item()) < 1e-12

    def test_first_token_not_scored(self, params, vocab):
        dialog = make_dialog([(USER, "hello there")])
        r = dialog_nll(dialog, params, vocab)
        n_tokens = len(vocab.encode(format_turn(USER, "hello there")))
        assert r["token_counts"][USER] == n_tokens - 1
        assert r["token_counts"][SYSTEM] == 0

    def test_user_only_dialog_zero_system_grads(self, params, vocab):
        dialog = make_dialog([(USER, "hello there how are you")])
        r = dialog_nll(dialog, params, vocab)
        names = list(params.system)
        grads = T.gradient_of(r["total_nll"],
                              [params.system[n] for n in names])
        for name, g in zip(names, grads):
            assert np.all(g == 0.0), f"nonzero system grad in {name}"
        user_grads = T.gradient_of(r["total_nll"],
                                   [params.user["wte"]])
        assert np.abs(user_grads[0]).max() > 0

    def test_over_long_dialog_raises(self, params, vocab):
        dialog = make_dialog([(USER, "hello there " * 40),
                              (SYSTEM, "i am fine " * 40)])
        with pytest.raises(DialogTooLongError) as exc:
            dialog_nll(dialog, params, vocab)
        assert exc.value.limit == params.config.max_positions

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError):
            Turn("narrator", "hi")


class TestArdmParams:
    def test_fresh_roles_start_equal_but_independent(self):
        p = ArdmParams.fresh(CFG)
        assert not p.shared
        assert np.array_equal(p.user["wte"].data, p.system["wte"].data)
        assert p.user["wte"] is not p.system["wte"]

    def test_shared_lm_is_one_parameter_set(self):
        p = ArdmParams.shared_lm(CFG)
        assert p.shared
        assert p.for_role(USER) is p.for_role(SYSTEM)


class TestBundle:
    def test_round_trip(self, params, vocab, tmp_path):
        out = tmp_path / "bundle"
        save_bundle(out, params, vocab)
        back, vocab2 = load_bundle(out)
        assert back.config == params.config
        assert vocab2.merges == vocab.merges
        assert not back.shared
        for k in params.user:
            assert np.allclose(back.user[k].data, params.user[k].data,
                               atol=1e-7)

    def test_shared_flag_round_trip(self, vocab, tmp_path):
        cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32,
                          vocab_size=vocab.size, max_positions=64)
        p = ArdmParams.shared_lm(cfg)
        save_bundle(tmp_path / "b", p, vocab)
        back, _ = load_bundle(tmp_path / "b")
        assert back.shared
