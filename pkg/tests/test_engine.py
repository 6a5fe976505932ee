import threading
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semrank.engine import (MODES, BatchEntry, ScoreItem, ScoreRequest, ScoringEngine, build_multi_item_mask,
                            decode_embeddings, encode_embeddings, flops, flops_for_lengths, plan_batches,
                            request_from_wire, score_ibpc, score_mixed, score_multi_item, score_naive,
                            substitute_embeddings)
from semrank.errors import OversizeError, PayloadError, SpecError, SplitRequired
from semrank.model import multi_head_scores, prefill


def make_request(rng, T_q, lengths, mode="ibpc", vocab=256):
    prefix = tuple(int(t) for t in rng.integers(0, vocab, T_q))
    items = [ScoreItem(f"i{j}", tokens=tuple(int(t) for t in rng.integers(0, vocab, L)))
             for j, L in enumerate(lengths)]
    return ScoreRequest("r", prefix, items, mode)


def max_dev(a, b):
    return max(abs(x.tasks[t] - y.tasks[t]) for x, y in zip(a.scores, b.scores) for t in x.tasks)


class TestFlops:
    def test_naive_reference_shape(self):
        f = flops("naive", 50, 150, 50)
        assert (f.attention_units, f.linear_units) == (2_000_000, 10_000)

    def test_amortized_reference_shape(self):
        f = flops("ibpc", 50, 150, 50)
        assert (f.attention_units, f.linear_units) == (1_877_500, 7550)

    def test_long_prefix_shape(self):
        assert flops("naive", 500, 50, 100).to_dict() == {"attention": 30_250_000, "linear": 55_000}
        assert flops("ibpc", 500, 50, 100).to_dict() == {"attention": 5_500_000, "linear": 5_500}

    @pytest.mark.parametrize("mode", ["ibpc", "multi_item", "mixed"])
    def test_amortized_modes_share_formula(self, mode):
        assert flops(mode, 500, 50, 100) == flops("ibpc", 500, 50, 100)

    def test_single_embedding_token(self):
        T_q, N = 37, 9
        assert flops("mixed", T_q, 1, N).attention_units == T_q ** 2 + N * (2 * T_q + 1)

    def test_empty_batch(self):
        assert flops("naive", 40, 10, 0).attention_units == 0
        assert flops("ibpc", 40, 10, 0).attention_units == 40 ** 2

    def test_negative_counts(self):
        with pytest.raises(SpecError):
            flops("naive", -1, 2, 3)

    def test_unknown_mode(self):
        with pytest.raises(SpecError):
            flops("beam", 1, 1, 1)

    @given(st.integers(1, 400), st.integers(0, 400), st.integers(1, 200))
    def test_amortized_never_exceeds_naive(self, T_q, T_i, N_i):
        naive = flops("naive", T_q, T_i, N_i).attention_units
        amort = flops("ibpc", T_q, T_i, N_i).attention_units
        assert amort <= naive
        if N_i >= 2:
            assert amort < naive

    @given(st.integers(1, 100), st.lists(st.integers(1, 50), min_size=1, max_size=20))
    def test_lengths_form_matches_uniform_form(self, T_q, lengths):
        if len(set(lengths)) == 1:
            for mode in ("naive", "ibpc"):
                a = flops_for_lengths(mode, T_q, lengths)
                b = flops(mode, T_q, lengths[0], len(lengths))
                assert (a.attention_units, a.linear_units) == (b.attention_units, b.linear_units)


class TestMask:
    def test_hand_enumerated(self):
        m = build_multi_item_mask(2, [2, 1])
        assert m.spans == ((2, 4), (4, 5))
        assert m.allowed(4) == {0, 1, 4}
        assert m.allowed(3) == {0, 1, 2, 3}
        assert m.allowed(1) == {0, 1}

    def test_single_item_is_causal(self):
        m = build_multi_item_mask(3, [4])
        np.testing.assert_array_equal(m.to_dense(), np.tri(7, dtype=bool))

    @given(st.integers(1, 30), st.lists(st.integers(1, 12), min_size=1, max_size=8))
    def test_pair_count(self, T_q, lengths):
        m = build_multi_item_mask(T_q, lengths)
        expected = T_q * (T_q + 1) // 2 + sum(T_q * L + L * (L + 1) // 2 for L in lengths)
        assert m.allowed_pair_count() == expected

    @given(st.integers(1, 10), st.lists(st.integers(1, 6), min_size=1, max_size=5))
    def test_dense_matches_rule(self, T_q, lengths):
        m = build_multi_item_mask(T_q, lengths)
        dense = m.to_dense()
        for p in range(m.total):
            assert set(np.flatnonzero(dense[p])) == m.allowed(p)
        # spans tile the suffix with no gaps
        assert m.spans[0][0] == T_q
        assert all(a[1] == b[0] for a, b in zip(m.spans, m.spans[1:]))

    def test_positions_restart(self):
        m = build_multi_item_mask(3, [2, 2])
        np.testing.assert_array_equal(m.positions(), [0, 1, 2, 3, 4, 3, 4])

    def test_zero_length(self):
        with pytest.raises(SpecError):
            build_multi_item_mask(2, [1, 0])


class TestModes:
    def test_single_item_naive_is_direct_prefill(self, toy_weights, rng):
        req = make_request(rng, 10, [5], "naive")
        res = score_naive(toy_weights, req)
        h, _ = prefill(toy_weights, req.prefix_tokens + req.items[0].tokens)
        assert res.scores[0].tasks == multi_head_scores(h[-1], toy_weights)

    def test_modes_agree(self, toy_weights, rng):
        req = make_request(rng, 30, [8, 20, 3, 11])
        naive = score_naive(toy_weights, req)
        assert max_dev(score_ibpc(toy_weights, req), naive) <= 1e-5
        assert max_dev(score_multi_item(toy_weights, req), naive) <= 1e-5

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 20), st.lists(st.integers(1, 15), min_size=1, max_size=6))
    def test_modes_agree_random(self, tiny_weights, seed, T_q, lengths):
        req = make_request(np.random.default_rng(seed), T_q, lengths)
        naive = score_naive(tiny_weights, req)
        assert max_dev(score_ibpc(tiny_weights, req), naive) <= 1e-5
        assert max_dev(score_multi_item(tiny_weights, req), naive) <= 1e-5

    def test_order_preserved(self, toy_weights, rng):
        req = make_request(rng, 5, [3, 4, 5])
        for fn in (score_naive, score_ibpc, score_multi_item):
            assert [s.item_id for s in fn(toy_weights, req).scores] == ["i0", "i1", "i2"]

    def test_permutation(self, toy_weights, rng):
        req = make_request(rng, 12, [4, 7, 2, 5])
        base = {s.item_id: s.tasks for s in score_multi_item(toy_weights, req).scores}
        perm = ScoreRequest("p", req.prefix_tokens, req.items[::-1], "multi_item")
        for s in score_multi_item(toy_weights, perm).scores:
            for t, p in s.tasks.items():
                assert abs(p - base[s.item_id][t]) <= 1e-5

    def test_isolation(self, toy_weights, rng):
        req = make_request(rng, 8, [5, 5, 5])
        a = score_multi_item(toy_weights, req)
        edited = list(req.items)
        edited[1] = ScoreItem("i1", tokens=(1, 2, 3, 4, 5))
        b = score_multi_item(toy_weights, ScoreRequest("r", req.prefix_tokens, edited, "multi_item"))
        assert a.scores[0].tasks == b.scores[0].tasks
        assert a.scores[2].tasks == b.scores[2].tasks
        assert a.scores[1].tasks != b.scores[1].tasks

    def test_mixed_substitute_embeddings(self, toy_weights, rng):
        req = make_request(rng, 20, [6, 9, 1])
        emb_items = [ScoreItem(it.item_id, embeds=substitute_embeddings(toy_weights, it.tokens))
                     for it in req.items]
        mixed = score_mixed(toy_weights, ScoreRequest("m", req.prefix_tokens, emb_items, "mixed"))
        assert max_dev(mixed, score_ibpc(toy_weights, req)) <= 1e-6

    def test_mixed_one_token_items(self, toy_weights, rng):
        d = toy_weights.config.d_model
        items = [ScoreItem(j, embeds=rng.normal(size=(1, d))) for j in range(5)]
        res = score_mixed(toy_weights, ScoreRequest("m", tuple(range(65, 75)), items, "mixed"))
        assert res.flops.T_i == 1.0
        assert res.flops.attention_units == 10 ** 2 + 5 * (2 * 10 + 1)

    def test_mixed_wrong_dimension(self, toy_weights):
        req = ScoreRequest("m", (1, 2), [ScoreItem(0, embeds=np.zeros((2, 5)))], "mixed")
        with pytest.raises(PayloadError):
            score_mixed(toy_weights, req)

    def test_multi_item_overflow(self, tiny_weights, rng):
        req = make_request(rng, 100, [200, 250])
        with pytest.raises(SplitRequired):
            score_multi_item(tiny_weights, req)

    def test_probabilities_in_range(self, toy_weights, rng):
        req = make_request(rng, 10, [4, 4])
        for s in score_ibpc(toy_weights, req).scores:
            assert all(0.0 <= p <= 1.0 for p in s.tasks.values())

    def test_request_validation(self):
        with pytest.raises(SpecError):
            ScoreRequest("r", (1,), [])
        with pytest.raises(SpecError):
            ScoreRequest("r", (), [ScoreItem(0, tokens=(1,))])
        with pytest.raises(SpecError):
            ScoreRequest("r", (1,), [ScoreItem(0, tokens=(1,))], mode="greedy")
        assert ScoreRequest("r", (1,), [ScoreItem(0, tokens=(1,))], mode="multi-item").mode == "multi_item"


class TestPlanBatches:
    def test_single_small_request(self, rng):
        plan = plan_batches([make_request(rng, 5, [3, 3])], 100)
        assert plan == [[BatchEntry(0, (0, 1))]]

    def test_oversize(self, rng):
        with pytest.raises(OversizeError):
            plan_batches([make_request(rng, 10, [50])], 40)

    @given(st.lists(st.tuples(st.integers(1, 20), st.lists(st.integers(1, 30), min_size=1, max_size=8)),
                    min_size=1, max_size=6),
           st.integers(60, 300))
    def test_items_planned_exactly_once(self, shapes, budget):
        rng = np.random.default_rng(0)
        reqs = [make_request(rng, T_q, lengths) for T_q, lengths in shapes]
        plan = plan_batches(reqs, budget)
        planned = Counter((e.request_index, i) for batch in plan for e in batch for i in e.item_indices)
        expected = Counter((r, i) for r, (_, lengths) in enumerate(shapes) for i in range(len(lengths)))
        assert planned == expected
        for batch in plan:
            used = sum(len(reqs[e.request_index].prefix_tokens)
                       + sum(reqs[e.request_index].items[i].length for i in e.item_indices) for e in batch)
            assert used <= budget
        # per-request item order survives packing
        for r in range(len(reqs)):
            seq = [i for batch in plan for e in batch if e.request_index == r for i in e.item_indices]
            assert seq == sorted(seq)

    def test_fits_in_one_batch(self, rng):
        reqs = [make_request(rng, 5, [3, 3]), make_request(rng, 4, [2])]
        assert len(plan_batches(reqs, 1000)) == 1


class TestScoringEngine:
    def test_auto_split_matches_naive(self, toy_weights, rng):
        req = make_request(rng, 50, [150] * 12, "multi_item")
        engine = ScoringEngine(toy_weights, multi_item_budget=500)
        res = engine.score(req)
        assert len(res.scores) == 12
        naive = score_naive(toy_weights, ScoreRequest("r", req.prefix_tokens, req.items, "naive"))
        assert max_dev(res, naive) <= 1e-5

    def test_text_items_tokenized(self, toy_weights):
        engine = ScoringEngine(toy_weights)
        res = engine.score(ScoreRequest("t", (65, 66), [ScoreItem("a", text="hello")], "naive"))
        direct = score_naive(toy_weights, ScoreRequest("t", (65, 66), [ScoreItem("a", tokens=tuple(b"hello"))],
                                                       "naive"))
        assert res.scores[0].tasks == direct.scores[0].tasks

    def test_concurrent_requests_do_not_interleave(self, tiny_weights):
        engine = ScoringEngine(tiny_weights)
        rng = np.random.default_rng(4)
        reqs = [make_request(rng, 8, [4, 6, 3], mode) for mode in MODES[:3] for _ in range(3)]
        expected = [score_naive(tiny_weights, ScoreRequest("x", r.prefix_tokens, r.items, "naive")) for r in reqs]
        results = [None] * len(reqs)

        def work(i):
            results[i] = engine.score(reqs[i])

        threads = [threading.Thread(target=work, args=(i,)) for i in range(len(reqs))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for got, want in zip(results, expected):
            assert max_dev(got, want) <= 1e-5
        assert engine.requests_served == len(reqs)


class TestWire:
    def test_embedding_round_trip(self, rng):
        arr = rng.normal(size=(3, 8)).astype(np.float32)
        np.testing.assert_array_equal(decode_embeddings(encode_embeddings(arr), 8), arr)

    def test_bad_payloads(self):
        with pytest.raises(PayloadError):
            decode_embeddings("not base64!!", 4)
        with pytest.raises(PayloadError):
            decode_embeddings(encode_embeddings(np.zeros(3)), 4)

    def test_request_parse(self, toy_weights):
        body = {"request_id": 7, "prefix_text": "Q", "mode": "naive",
                "items": [{"id": "a", "text": "doc"}, {"id": "b", "tokens": [1, 2]}]}
        req = request_from_wire(body, 64, 4096)
        assert req.prefix_tokens == (81,) and req.mode == "naive"
        wire = ScoringEngine(toy_weights).score(req).to_wire()
        assert wire["request_id"] == 7
        assert [s["id"] for s in wire["scores"]] == ["a", "b"]
        assert set(wire["flops"]) == {"attention", "linear"}

    def test_embedding_items_force_mixed(self):
        body = {"request_id": 1, "prefix_tokens": [1],
                "items": [{"id": "e", "embedding_b64": encode_embeddings(np.zeros((2, 4)))}]}
        req = request_from_wire(body, 4, 64)
        assert req.mode == "mixed" and req.items[0].embeds.shape == (2, 4)

    def test_missing_field(self):
        with pytest.raises(PayloadError):
            request_from_wire({"request_id": 1, "items": []}, 4, 64)
