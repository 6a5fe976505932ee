import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semrank.errors import LengthError, MaskError, PayloadError, SpecError
from semrank.model import (KVCache, ModelConfig, causal_mask, init_model, load_weights, multi_head_scores,
                           prefill, save_weights, vocab_logits, yes_no_probability)
from semrank.tokenizer import (NO, YES, FeatureDef, NumericFeatureSpec, build_prompt, detokenize,
                               format_numeric_features, tokenize)


class TestTokenizer:
    def test_bytes_map_to_ids(self):
        assert tokenize("AB") == [65, 66]

    def test_multibyte_utf8(self):
        assert tokenize("é") == [0xC3, 0xA9]

    def test_overflow(self):
        with pytest.raises(LengthError):
            tokenize("x" * 11, max_seq=10)

    @given(st.text(max_size=200))
    def test_round_trip(self, text):
        assert detokenize(tokenize(text)) == text

    def test_detokenize_drops_specials(self):
        assert detokenize([72, YES, 105, NO]) == "Hi"

    def test_prompt_split(self):
        parts = build_prompt("S:", "Q\n", "Doc", suffix="?")
        assert parts.prefix_tokens == tuple(b"S:Q\n")
        assert parts.item_tokens == tuple(b"Doc?")
        assert (parts.T_q, parts.T_i) == (4, 4)

    def test_prompt_too_long(self):
        with pytest.raises(LengthError):
            build_prompt("a" * 6, "", "b" * 5, max_seq=10, suffix="")

    def test_prompt_needs_prefix(self):
        with pytest.raises(SpecError):
            build_prompt("", "", "doc")


class TestNumericFeatures:
    spec = NumericFeatureSpec.of(("remote", "boolean"), ("salary", "continuous", 1),
                                 ("reply_rate", "ratio", 2))

    def test_truncates_not_rounds(self):
        assert format_numeric_features({"salary": 3.99}, self.spec) == "salary: 3.9"

    def test_spec_order_and_kinds(self):
        text = format_numeric_features({"reply_rate": (2, 3), "remote": 1, "salary": 10.0}, self.spec)
        assert text.splitlines() == ["remote: True", "salary: 10.0", "reply_rate: 0.66 (2/3)"]

    def test_zero_denominator(self):
        assert format_numeric_features({"reply_rate": (0, 0)}, self.spec) == "reply_rate: 0.00 (0/0)"

    def test_unknown_feature(self):
        with pytest.raises(SpecError):
            format_numeric_features({"age": 3}, self.spec)

    def test_bad_kind(self):
        with pytest.raises(SpecError):
            FeatureDef("x", kind="categorical")

    def test_duplicate_names(self):
        with pytest.raises(SpecError):
            NumericFeatureSpec.of(("a", "boolean"), ("a", "continuous"))


class TestYesNo:
    def test_two_vs_zero(self):
        logits = np.zeros(300)
        logits[YES] = 2.0
        assert yes_no_probability(logits) == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-12)
        assert yes_no_probability(logits) == pytest.approx(0.8808, abs=1e-4)

    def test_saturates_without_overflow(self):
        logits = np.zeros(300)
        logits[YES] = 1000.0
        assert yes_no_probability(logits) == 1.0
        logits[YES], logits[NO] = 0.0, 1000.0
        assert yes_no_probability(logits) == 0.0

    def test_equal_logits(self):
        assert yes_no_probability(np.zeros(300)) == 0.5


class TestConfig:
    def test_heads_divide(self):
        with pytest.raises(SpecError):
            ModelConfig(d_model=10, n_heads=4)

    def test_yes_no_distinct(self):
        with pytest.raises(SpecError):
            ModelConfig(yes_token_id=5, no_token_id=5)

    def test_dict_round_trip(self):
        cfg = ModelConfig(n_layers=3)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestPrefill:
    def test_init_is_seeded(self):
        a = init_model(ModelConfig(), 7)
        b = init_model(ModelConfig(), 7)
        c = init_model(ModelConfig(), 8)
        assert a.checksum() == b.checksum() != c.checksum()

    def test_weights_bounded(self, toy_weights):
        assert max(float(np.abs(t).max()) for t in toy_weights.tensors.values()) < 10

    def test_cache_extends_prefix(self, toy_weights):
        toks = tokenize("hello world")
        full_h, full_kv = prefill(toy_weights, toks)
        h1, kv1 = prefill(toy_weights, toks[:5])
        h2, kv2 = prefill(toy_weights, toks[5:], kv1)
        assert kv1.seq_len == 5 and kv2.seq_len == full_kv.seq_len == len(toks)
        np.testing.assert_allclose(np.vstack([h1, h2]), full_h, atol=1e-10)

    def test_cache_not_mutated(self, toy_weights):
        _, kv = prefill(toy_weights, tokenize("prefix"))
        keys_before = [k.copy() for k in kv.keys]
        prefill(toy_weights, tokenize("a"), kv)
        prefill(toy_weights, tokenize("bb"), kv)
        assert kv.seq_len == 6
        for a, b in zip(keys_before, kv.keys):
            np.testing.assert_array_equal(a, b)

    def test_causality(self, toy_weights):
        # changing a later token never changes earlier hidden states
        a, _ = prefill(toy_weights, tokenize("abcdef"))
        b, _ = prefill(toy_weights, tokenize("abcdXY"))
        np.testing.assert_array_equal(a[:4], b[:4])
        assert not np.allclose(a[4:], b[4:])

    def test_explicit_causal_mask_matches_default(self, toy_weights):
        toks = tokenize("mask check")
        a, _ = prefill(toy_weights, toks)
        b, _ = prefill(toy_weights, toks, mask=causal_mask(0, len(toks)))
        np.testing.assert_array_equal(a, b)

    def test_overflow(self):
        w = init_model(ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8, max_seq=8), 0)
        _, kv = prefill(w, [1, 2, 3, 4, 5])
        with pytest.raises(LengthError):
            prefill(w, [1, 2, 3, 4], kv)

    def test_malformed_mask(self, toy_weights):
        with pytest.raises(MaskError):
            prefill(toy_weights, [1, 2, 3], mask=np.ones((2, 3), bool))
        with pytest.raises(MaskError):
            prefill(toy_weights, [1, 2], mask=np.array([[True, False], [False, False]]))

    def test_payload_checks(self, toy_weights):
        with pytest.raises(PayloadError):
            prefill(toy_weights, [1], embeds=np.zeros((1, 64)))
        with pytest.raises(PayloadError):
            prefill(toy_weights, [9999])
        with pytest.raises(PayloadError):
            prefill(toy_weights, embeds=np.zeros((1, 3)))

    def test_empty_cache(self, toy_weights):
        kv = KVCache.empty(toy_weights.config)
        assert kv.seq_len == 0
        a, _ = prefill(toy_weights, [5, 6], kv)
        b, _ = prefill(toy_weights, [5, 6])
        np.testing.assert_array_equal(a, b)


class TestHeads:
    def test_relevance_matches_vocab_logits(self, toy_weights):
        h, _ = prefill(toy_weights, tokenize("some text"))
        scores = multi_head_scores(h[-1], toy_weights)
        assert scores["relevance"] == pytest.approx(yes_no_probability(vocab_logits(toy_weights, h[-1])),
                                                    abs=1e-12)

    def test_all_tasks_are_probabilities(self, toy_weights):
        h, _ = prefill(toy_weights, tokenize("text"))
        scores = multi_head_scores(h[-1], toy_weights)
        assert set(scores) == {"relevance", "click", "apply", "badfit", "shortlist", "dismiss"}
        assert all(0.0 <= p <= 1.0 for p in scores.values())

    def test_stacked_hidden(self, toy_weights):
        h, _ = prefill(toy_weights, tokenize("abc"))
        stacked = multi_head_scores(h, toy_weights)
        for i in range(3):
            single = multi_head_scores(h[i], toy_weights)
            assert stacked["click"][i] == pytest.approx(single["click"], abs=1e-15)

    def test_empty_heads(self):
        w = init_model(ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8, max_seq=8, head_specs=()), 0)
        with pytest.raises(SpecError):
            multi_head_scores(np.zeros(8), w)


class TestWeightFile:
    def test_round_trip(self, tmp_path, toy_weights):
        path = tmp_path / "w.bin"
        save_weights(toy_weights, path)
        loaded = load_weights(path)
        assert loaded.config == toy_weights.config
        assert loaded.checksum() == toy_weights.checksum()
        for name, t in toy_weights.tensors.items():
            np.testing.assert_array_equal(loaded.tensors[name], t)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "w.bin"
        path.write_bytes(b"NOTAFILE" + b"\0" * 16)
        with pytest.raises(SpecError):
            load_weights(path)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_any_seed_round_trips(self, tmp_path_factory, seed):
        cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8, vocab_size=300, max_seq=16)
        w = init_model(cfg, seed)
        path = tmp_path_factory.mktemp("w") / "w.bin"
        save_weights(w, path)
        assert load_weights(path).checksum() == w.checksum()
