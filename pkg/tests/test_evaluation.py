import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixrec.data import FeatureSchema, InteractionRecord, assemble_dataset, build_eval_candidates
from mixrec.errors import ContractError, NumericalError
from mixrec.evaluation import (
    EvalProtocol,
    dump_ranks,
    evaluate,
    format_table,
    hr_at_k,
    metrics_from_ranks,
    mrr_at_k,
    ndcg_at_k,
    rank_of_target,
    score_candidates,
    seed_table,
)
from mixrec.model import MLP4Rec, ModelConfig, PopRec


def sort_rank(scores, target):
    """Rank by sorting: descending score, ties broken against the target."""
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j == target))
    return order.index(target) + 1


class TargetFirst:
    def score_candidates(self, contexts, candidates):
        out = np.zeros(candidates.shape)
        out[:, 0] = 1.0
        return out


class Constant:
    def __init__(self, value=0.0):
        self.value = value

    def score_candidates(self, contexts, candidates):
        return np.full(candidates.shape, self.value)


class TestScoring:
    def test_one_hot(self):
        np.testing.assert_array_equal(score_candidates(np.eye(4)[1], np.eye(4)), [0, 1, 0, 0])

    def test_zero_hidden_ties(self):
        scores = score_candidates(np.zeros(3), np.random.default_rng(0).normal(size=(101, 3)))
        assert not scores.any()
        assert rank_of_target(scores, 0) == 101

    def test_matches_double_loop(self):
        rng = np.random.default_rng(1)
        h = rng.integers(-8, 8, size=(5, 6)).astype(float)
        e = rng.integers(-8, 8, size=(5, 11, 6)).astype(float)
        got = score_candidates(h, e)
        for b in range(5):
            for n in range(11):
                assert got[b, n] == sum(h[b, c] * e[b, n, c] for c in range(6))


class TestRank:
    def test_best(self):
        assert rank_of_target(np.array([3.0, 1.0, 2.0]), 0) == 1

    def test_all_equal_is_pessimistic(self):
        assert rank_of_target(np.zeros(101), 0) == 101

    def test_partial_ties(self):
        assert rank_of_target(np.array([1.0, 2.0, 1.0, 0.0, 1.0]), 0) == 4

    def test_bad_target(self):
        with pytest.raises(ContractError):
            rank_of_target(np.zeros(3), 3)

    def test_vs_sort_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            scores = rng.integers(0, 6, size=rng.integers(1, 15)).astype(float)
            t = int(rng.integers(scores.size))
            assert rank_of_target(scores, t) == sort_rank(list(scores), t)

    def test_batched(self):
        scores = np.array([[1.0, 0.0, 2.0], [5.0, 4.0, 3.0]])
        np.testing.assert_array_equal(rank_of_target(scores, 0), [2, 1])
        np.testing.assert_array_equal(rank_of_target(scores, np.array([2, 2])), [1, 3])

    @settings(max_examples=100, deadline=None)
    @given(scores=st.lists(st.integers(-5, 5), min_size=2, max_size=20), extra=st.integers(-5, 5))
    def test_extra_negative_never_helps(self, scores, extra):
        s = np.array(scores, dtype=float)
        assert rank_of_target(np.append(s, extra), 0) >= rank_of_target(s, 0)


class TestMetrics:
    def test_rank_one(self):
        assert (hr_at_k(1), ndcg_at_k(1), mrr_at_k(1)) == (1.0, 1.0, 1.0)

    def test_rank_three(self):
        assert ndcg_at_k(3, 10) == 0.5
        assert mrr_at_k(3, 10) == pytest.approx(0.3333, abs=1e-4)
        assert hr_at_k(3, 10) == 1.0

    def test_cutoff(self):
        assert (hr_at_k(11, 10), ndcg_at_k(11, 10), mrr_at_k(11, 10)) == (0.0, 0.0, 0.0)
        assert hr_at_k(10, 10) == 1.0

    def test_vs_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            scores = rng.normal(size=101)
            scores[rng.integers(101, size=3)] = scores[0]
            r = int(rank_of_target(scores, 0))
            assert r == sort_rank(list(scores), 0)
            for k in (1, 5, 10):
                assert hr_at_k(r, k) == float(r <= k)
                assert ndcg_at_k(r, k) == (1.0 / math.log2(r + 1) if r <= k else 0.0)
                assert mrr_at_k(r, k) == (1.0 / r if r <= k else 0.0)

    @settings(max_examples=200, deadline=None)
    @given(ranks=st.lists(st.integers(1, 101), min_size=1, max_size=50), k=st.integers(1, 20))
    def test_pointwise_order(self, ranks, k):
        r = np.array(ranks)
        assert np.all(hr_at_k(r, k) >= mrr_at_k(r, k))
        assert np.all(ndcg_at_k(r, k) >= mrr_at_k(r, k))
        m = metrics_from_ranks(r, (k,))
        assert m[f"HR@{k}"] >= m[f"MRR@{k}"] and m[f"NDCG@{k}"] >= m[f"MRR@{k}"]
        assert all(0.0 <= v <= 1.0 for v in m.values())

    def test_order_preserving_transform(self):
        rng = np.random.default_rng(4)
        scores = rng.integers(-50, 50, size=(30, 101)).astype(float)
        np.testing.assert_array_equal(rank_of_target(scores, 0), rank_of_target(2 * scores + 7, 0))


def popular_target_dataset():
    # item "top" sits in every training sequence and is every user's test item
    rng = np.random.default_rng(0)
    records = []
    for u in range(40):
        items = [f"i{x}" for x in rng.choice(200, size=6, replace=False)]
        seq = items[:3] + ["top"] + items[3:5] + ["top"]
        records += [InteractionRecord(f"u{u}", it, t) for t, it in enumerate(seq)]
    return assemble_dataset(records, {}, FeatureSchema.from_pairs([]), max_len=8, k=1)


class TestEvaluate:
    def test_pop_rec_hits_popular_target(self):
        ds = popular_target_dataset()
        model = PopRec(ModelConfig(), ds.features).fit(ds)
        report = evaluate(model, ds, EvalProtocol(split="test"))
        assert report.metrics["HR@10"] == 1.0 and report.metrics["MRR@10"] == 1.0
        assert report.n_users == 40 and report.skipped == 0

    def test_oracle_model(self, small_synth):
        report = evaluate(TargetFirst(), small_synth, EvalProtocol())
        assert (report.metrics["MRR@10"], report.metrics["NDCG@10"], report.metrics["HR@10"]) == (1.0, 1.0, 1.0)

    def test_constant_model_is_last(self, small_synth):
        report = evaluate(Constant(), small_synth, EvalProtocol())
        assert report.metrics["HR@10"] == 0.0 and (report.ranks == 101).all()

    def test_non_finite_scores(self, small_synth):
        with pytest.raises(NumericalError):
            evaluate(Constant(np.nan), small_synth, EvalProtocol())

    def test_ranks_recompute_means(self, small_synth, tmp_path):
        model = MLP4Rec(ModelConfig(max_len=small_synth.max_len, embed_dim=8, n_layers=1, hidden_ratio=1.0),
                        small_synth.features, seed=0)
        report = evaluate(model, small_synth, EvalProtocol(split="validation", seed=3))
        dump_ranks(tmp_path / "ranks.json", report)
        # standalone recomputation from the dumped per-user ranks
        dumped = json.loads((tmp_path / "ranks.json").read_text())
        ranks = dumped["ranks"]
        hr = sum(r <= 10 for r in ranks) / len(ranks)
        ndcg = sum(1 / math.log2(r + 1) for r in ranks if r <= 10) / len(ranks)
        mrr = sum(1 / r for r in ranks if r <= 10) / len(ranks)
        assert dumped["metrics"]["HR@10"] == pytest.approx(hr, abs=1e-15)
        assert dumped["metrics"]["NDCG@10"] == pytest.approx(ndcg, abs=1e-15)
        assert dumped["metrics"]["MRR@10"] == pytest.approx(mrr, abs=1e-15)
        assert dumped["protocol"]["seed"] == 3 and dumped["split"] == "validation"

    def test_does_not_mutate_weights(self, small_synth):
        model = MLP4Rec(ModelConfig(max_len=small_synth.max_len, embed_dim=8, n_layers=1, dropout=0.5),
                        small_synth.features, seed=0)
        digest = lambda: hashlib.sha256(b"".join(p.data.tobytes() for p in model.params.values())).hexdigest()
        before = digest()
        a = evaluate(model, small_synth, EvalProtocol())
        b = evaluate(model, small_synth, EvalProtocol())
        assert digest() == before
        np.testing.assert_array_equal(a.ranks, b.ranks)

    def test_sharding_is_invisible(self, small_synth):
        model = MLP4Rec(ModelConfig(max_len=small_synth.max_len, embed_dim=8, n_layers=1), small_synth.features)
        one = evaluate(model, small_synth, EvalProtocol(), batch_size=37)
        two = evaluate(model, small_synth, EvalProtocol(), workers=2)
        np.testing.assert_array_equal(one.ranks, two.ranks)
        assert one.metrics == two.metrics

    def test_shared_candidates(self, small_synth):
        cands = build_eval_candidates(small_synth, "test", 100, 5)
        a = evaluate(TargetFirst(), small_synth, EvalProtocol(seed=5), candidates=cands)
        b = evaluate(TargetFirst(), small_synth, EvalProtocol(seed=5))
        np.testing.assert_array_equal(a.users, b.users)

    def test_few_negatives_warns(self):
        with pytest.warns(UserWarning):
            EvalProtocol(negatives=5).validate()


class TestReports:
    def test_table_column_order(self):
        text = format_table([("model", {"MRR@10": 0.1, "NDCG@10": 0.2, "HR@10": 0.3})])
        header, row = text.splitlines()
        assert header.split() == ["MRR@10", "NDCG@10", "HR@10"]
        assert row.split() == ["model", "0.1000", "0.2000", "0.3000"]

    def test_seed_rows_and_mean(self, small_synth):
        reports = [evaluate(TargetFirst(), small_synth, EvalProtocol(seed=s)) for s in (1, 2, 3)]
        lines = seed_table(reports).splitlines()
        assert [l.split()[0] for l in lines[1:]] == ["seed", "seed", "seed", "mean"]
        assert lines[-1].split()[1:] == ["1.0000"] * 3
