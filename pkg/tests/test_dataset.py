"""Pair construction, perturbation, split, and bucketization contracts."""

import math

import numpy as np
import pytest

from bidaware.dataset import (
    FeatureBuckets,
    PairKind,
    PerturbedFeature,
    build_easy_pairs,
    build_hard_pairs,
    build_training_set,
    indicator_for,
    perturb_bid_feature,
    read_pairs,
    stratified_sample_ranking,
    temporal_split,
    write_pairs,
)
from bidaware.errors import ConfigError, InputError
from bidaware.market import Ad, BidFeatures, BidType, Market, MarketConfig


@pytest.fixture(scope="module")
def deep_market():
    cfg = MarketConfig(corpus_size=400, num_users=30, sessions_per_hour=1,
                       duration_days=1, ranked_pool_depth=200, seed=17)
    return Market(cfg)


@pytest.fixture(scope="module")
def deep_sessions(deep_market):
    return list(deep_market.gen_sessions())


def _ad(budget=0.5, c=1.0, ad_id=0):
    return Ad(ad_id=ad_id, category_id=0, brand_id=0, quality_hint=0.0,
              bid=BidFeatures(BidType.OCPC, c, budget, 0.5, 1.0),
              latent_quality=np.zeros(2))


class TestStratifiedSampling:
    def test_full_pool_gives_15(self, deep_sessions):
        sampled = stratified_sample_ranking(deep_sessions[0], seed=1)
        assert len(sampled) == 15
        bands = {(1, 10): 0, (11, 100): 0, (101, None): 0}
        for rec in sampled:
            if rec.rank <= 10:
                bands[(1, 10)] += 1
            elif rec.rank <= 100:
                bands[(11, 100)] += 1
            else:
                bands[(101, None)] += 1
        assert all(v == 5 for v in bands.values())

    def test_short_pool(self):
        cfg = MarketConfig(corpus_size=13, num_users=5, ranked_pool_depth=8, seed=3)
        market = Market(cfg)
        session = market.run_session(market.make_request(0, 0, 1.0))
        assert len(session.ranked) == 8  # all rank <= 10
        sampled = stratified_sample_ranking(session, seed=1)
        assert len(sampled) == 5
        assert all(r.rank <= 10 for r in sampled)

    def test_membership_in_band(self, deep_sessions):
        for session in deep_sessions[:10]:
            for rec in stratified_sample_ranking(session, seed=9):
                assert 1 <= rec.rank <= 200


class TestHardPairs:
    def test_cross_product_count(self, deep_sessions):
        session = deep_sessions[0]
        sampled = stratified_sample_ranking(session, seed=1)
        pairs = build_hard_pairs(session, sampled)
        assert len(pairs) == 5 * 15

    def test_empty_ranked_gives_empty(self):
        cfg = MarketConfig(corpus_size=5, num_users=3, seed=1)
        market = Market(cfg)
        session = market.run_session(market.make_request(0, 0, 1.0))
        assert build_hard_pairs(session, []) == []

    def test_hard_invariant(self, deep_sessions):
        session = deep_sessions[1]
        sampled = stratified_sample_ranking(session, seed=2)
        imp = {i.ad_id for i in session.impressions}
        rank = {r.ad_id for r in sampled}
        for p in build_hard_pairs(session, sampled):
            assert p.kind == PairKind.Hard
            assert p.pos_ad_id in imp and p.neg_ad_id in rank

    def test_cap_subsamples(self, deep_sessions):
        session = deep_sessions[2]
        pairs = build_hard_pairs(session, cap=25, seed=5)
        assert len(pairs) == 25
        assert build_hard_pairs(session, cap=25, seed=5) == pairs


class TestEasyPairs:
    def test_count_five_per_positive(self, deep_sessions):
        session = deep_sessions[0]
        sampled = stratified_sample_ranking(session, seed=1)
        pairs = build_easy_pairs(session, corpus_size=400, seed=1, sampled=sampled)
        assert len(pairs) == 5 * (5 + 15)

    def test_exclusion_rule(self, deep_sessions):
        session = deep_sessions[3]
        in_session = {i.ad_id for i in session.impressions}
        in_session.update(r.ad_id for r in session.ranked)
        for p in build_easy_pairs(session, corpus_size=400, seed=2):
            assert p.kind == PairKind.Easy
            assert p.neg_ad_id not in in_session

    def test_deterministic(self, deep_sessions):
        session = deep_sessions[4]
        a = build_easy_pairs(session, corpus_size=400, seed=3)
        b = build_easy_pairs(session, corpus_size=400, seed=3)
        assert a == b

    def test_small_corpus_rejected(self, deep_sessions):
        with pytest.raises(ConfigError):
            build_easy_pairs(deep_sessions[0], corpus_size=100, seed=1)


class TestPerturbation:
    def test_indicator_table(self):
        assert indicator_for(PerturbedFeature.BudgetLeftRatio, 1) == 1    # add budget
        assert indicator_for(PerturbedFeature.BudgetLeftRatio, -1) == -1  # reduce budget
        assert indicator_for(PerturbedFeature.BidConstraint, 1) == 1      # relax constraints
        assert indicator_for(PerturbedFeature.BidConstraint, -1) == -1    # tighten constraints

    def test_budget_up_indicator(self):
        for seed in range(40):
            s = perturb_bid_feature(_ad(budget=0.5), seed=seed, request_id=1)
            if s.perturbed_feature == PerturbedFeature.BudgetLeftRatio and s.direction > 0:
                assert s.indicator == 1
                assert s.perturbed_bid.budget_left_ratio > 0.5
                return
        pytest.fail("no budget-up draw in 40 seeds")

    def test_constraint_down_indicator(self):
        for seed in range(40):
            s = perturb_bid_feature(_ad(c=2.0), seed=seed, request_id=1)
            if s.perturbed_feature == PerturbedFeature.BidConstraint and s.direction < 0:
                assert s.indicator == -1
                assert s.perturbed_bid.bid_constraint < 2.0
                return
        pytest.fail("no constraint-down draw in 40 seeds")

    def test_no_headroom_flips_down(self):
        # budget pinned at 1.0: any budget perturbation must point down
        for seed in range(200):
            s = perturb_bid_feature(_ad(budget=1.0), seed=seed, request_id=2)
            if s.perturbed_feature == PerturbedFeature.BudgetLeftRatio:
                assert s.direction == -1 and s.indicator == -1
                assert s.perturbed_bid.budget_left_ratio < 1.0

    def test_locality_single_field(self):
        ad = _ad(budget=0.4, c=3.0)
        for seed in range(60):
            s = perturb_bid_feature(ad, seed=seed, request_id=3)
            bid, orig = s.perturbed_bid, ad.bid
            assert bid.bid_type == orig.bid_type
            assert bid.default_bid_value == orig.default_bid_value
            assert bid.time_left_ratio == orig.time_left_ratio
            if s.perturbed_feature == PerturbedFeature.BudgetLeftRatio:
                assert bid.bid_constraint == orig.bid_constraint
                assert bid.budget_left_ratio != orig.budget_left_ratio
            else:
                assert bid.budget_left_ratio == orig.budget_left_ratio
                assert bid.bid_constraint != orig.bid_constraint
                assert abs(bid.bid_constraint_log1p - math.log1p(bid.bid_constraint)) < 1e-12

    def test_magnitude_ranges(self):
        for seed in range(80):
            s = perturb_bid_feature(_ad(budget=0.5, c=1.0), seed=seed, request_id=4)
            if s.perturbed_feature == PerturbedFeature.BudgetLeftRatio:
                assert 0.05 <= s.magnitude <= 0.3
            else:
                assert 1.1 <= s.magnitude <= 2.0


class TestTemporalSplit:
    def test_boundary_at_max_all_train(self, deep_sessions):
        tmax = max(s.request.sim_time for s in deep_sessions)
        split = temporal_split(deep_sessions, tmax + 1e-9)
        assert len(split.train_sessions) == len(deep_sessions)
        assert split.test_sessions == []

    def test_seven_to_one_ratio(self):
        cfg = MarketConfig(corpus_size=30, num_users=5, sessions_per_hour=2,
                           duration_days=8, ranked_pool_depth=10, seed=23)
        sessions = list(Market(cfg).gen_sessions())
        split = temporal_split(sessions, 7 * 24.0)
        ratio = len(split.train_sessions) / max(1, len(split.test_sessions))
        assert ratio == pytest.approx(7.0, rel=0.25)

    def test_strict_partition(self, deep_sessions):
        split = temporal_split(deep_sessions, 12.0)
        if split.train_sessions and split.test_sessions:
            assert max(s.request.sim_time for s in split.train_sessions) < \
                min(s.request.sim_time for s in split.test_sessions)


class TestBuckets:
    def test_right_closed_boundary(self):
        buckets = FeatureBuckets({"x": np.array([1.0, 2.0, 3.0])})
        assert buckets.digitize("x", [1.0])[0] == 0   # right edge of bucket 0
        assert buckets.digitize("x", [1.0 + 1e-12])[0] == 1
        assert buckets.digitize("x", [0.5])[0] == 0
        assert buckets.digitize("x", [3.5])[0] == 3

    def test_log1p_zero_path(self):
        # raw 0 -> log1p 0 -> the bucket whose band contains 0
        cuts = np.linspace(-1, 1, 31)
        buckets = FeatureBuckets({"c": cuts})
        idx = buckets.digitize("c", [math.log1p(0.0)])[0]
        lo = cuts[idx - 1] if idx > 0 else -np.inf
        hi = cuts[idx] if idx < len(cuts) else np.inf
        assert lo < 0.0 <= hi

    def test_nan_rejected(self):
        buckets = FeatureBuckets({"x": np.array([0.0])})
        with pytest.raises(InputError):
            buckets.digitize("x", [np.nan])

    def test_fit_and_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        buckets = FeatureBuckets.fit({"a": rng.uniform(size=5000), "b": rng.normal(size=5000)})
        assert len(buckets.cuts["a"]) == 31
        counts = np.bincount(buckets.digitize("a", rng.uniform(size=20000)), minlength=32)
        assert counts.min() > 300  # roughly uniform occupancy
        path = tmp_path / "buckets.tsv"
        buckets.save(path)
        back = FeatureBuckets.load(path)
        assert np.array_equal(back.cuts["a"], buckets.cuts["a"])


class TestTrainingSet:
    def test_pack_counts(self, deep_sessions):
        ts = build_training_set(deep_sessions[:6], corpus_size=400, behavior_len=20, seed=3)
        assert ts.num_sessions == 6
        assert ts.num_entries == 6 * 20
        assert ts.num_pairs == 6 * (25 + 100)
        hard = ts.pair_kind == int(PairKind.Hard)
        assert hard.sum() == 6 * 25
        assert np.all(ts.pair_neg_entry[hard] >= 0)
        assert np.all(ts.pair_neg_entry[~hard] == -1)

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            build_training_set([], corpus_size=10, behavior_len=20, seed=1)

    def test_pair_file_roundtrip(self, tmp_path, deep_sessions):
        session = deep_sessions[0]
        pairs = build_hard_pairs(session, cap=10, seed=1)
        path = tmp_path / "pairs.tsv"
        write_pairs(path, pairs)
        assert read_pairs(path) == pairs
