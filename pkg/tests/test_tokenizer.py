"""Byte-level BPE: training, round trips, turn framing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ardm.tokenizer import (END_OF_UTTERANCE, ROLE_PREFIX, SYSTEM, USER,
                            TokenizerError, Vocab, format_turn, split_turn,
                            train_bpe)


class TestFraming:
    def test_format_contains_prefix_and_marker(self):
        framed = format_turn(USER, "hello")
        assert framed.startswith(ROLE_PREFIX[USER])
        assert framed.endswith(END_OF_UTTERANCE)

    def test_split_inverts_format(self):
        for role in (USER, SYSTEM):
            assert split_turn(format_turn(role, "book a table")) == \
                (role, "book a table")

    def test_embedded_marker_rejected(self):
        with pytest.raises(TokenizerError):
            format_turn(USER, f"a{END_OF_UTTERANCE}b")

    def test_role_prefixes_differ(self):
        assert ROLE_PREFIX[USER] != ROLE_PREFIX[SYSTEM]


class TestTraining:
    def test_base_vocab_is_all_bytes(self):
        v = Vocab([])
        assert v.size == 256
        assert v.decode_bytes(v.encode_bytes(bytes(range(256)))) == \
            bytes(range(256))

    def test_most_frequent_pair_merged_first(self):
        v = train_bpe(["aaab"], 257)
        assert v.size == 257
        assert v.encode("aa") == [256]

    def test_merges_do_not_cross_documents(self):
        # "ab" only ever appears across a document boundary.
        v = train_bpe(["xa", "bx", "xa", "bx"], 300)
        enc = v.encode("ab")
        assert len(enc) == 2

    def test_early_stop_when_pairs_exhausted(self):
        v = train_bpe(["ab"], 400)
        assert 256 < v.size < 400

    def test_deterministic(self):
        corpus = ["the cat sat on the mat", "the dog sat"]
        a = train_bpe(corpus, 280)
        b = train_bpe(corpus, 280)
        assert a.merges == b.merges

    def test_plain_string_is_one_document(self):
        v = train_bpe("hello hello hello", 280)
        assert v.size > 256

    def test_empty_corpus_rejected(self):
        with pytest.raises(TokenizerError):
            train_bpe([], 300)
        with pytest.raises(TokenizerError):
            train_bpe([""], 300)

    def test_too_small_vocab_rejected(self):
        with pytest.raises(TokenizerError):
            train_bpe(["abc"], 255)


@pytest.fixture(scope="module")
def vocab():
    return train_bpe(["the cat sat on the mat " * 5,
                      "A: hello there\n\n\nB: hi, how can i help\n\n\n"],
                     320)


class TestRoundTrip:

    def test_text_round_trip(self, vocab):
        for text in ["", "the cat", "A: hello\n\n\n", "unseen zebra words!"]:
            assert vocab.decode(vocab.encode(text)) == text

    def test_random_bytes_round_trip(self, vocab):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(0, 256))
            blob = bytes(rng.integers(0, 256, size=n, dtype=np.uint8))
            assert vocab.decode_bytes(vocab.encode_bytes(blob)) == blob

    @settings(max_examples=50, deadline=None)
    @given(st.binary(max_size=200))
    def test_round_trip_property(self, vocab, blob):
        assert vocab.decode_bytes(vocab.encode_bytes(blob)) == blob

    def test_merges_reduce_length(self, vocab):
        text = "the cat sat on the mat"
        assert len(vocab.encode(text)) < len(text.encode())

    def test_json_round_trip(self, vocab):
        back = Vocab.from_json(vocab.to_json())
        assert back.merges == vocab.merges
        assert back.size == vocab.size
        text = "the cat sat"
        assert back.encode(text) == vocab.encode(text)

    def test_save_load(self, vocab, tmp_path):
        path = tmp_path / "vocab.json"
        vocab.save(path)
        back = Vocab.load(path)
        assert back.encode("on the mat") == vocab.encode("on the mat")
