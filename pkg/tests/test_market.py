"""Marketplace generator and teacher-oracle contracts."""

import math

import numpy as np
import pytest

from bidaware.errors import ConfigError, InputError, InvariantError
from bidaware.market import (
    Ad,
    BidEvent,
    BidFeatures,
    BidType,
    EventOp,
    Market,
    MarketConfig,
    TeacherScores,
    apply_bid_event,
    constraint_factor,
    gen_corpus,
    gen_event_stream,
    pacing_factor,
    positive_ops,
    read_corpus_state,
    read_events,
    read_sessions,
    teacher_pbid,
    time_left_ratio_at,
    write_corpus,
    write_events,
    write_sessions,
)

# Hand-coded copy of the documented bid policy, kept independent of market.py.
_EXPONENT = {BidType.OCPC: 0.30, BidType.MaxReturn: 0.40, BidType.MultiConstrained: 0.50}


def _expected_pbid(abid, budget, time_left, c, bid_type, gamma=0.5, eps=0.05):
    pace = min(max((budget / max(time_left, eps)) ** gamma, 0.2), 5.0)
    fac = min(max(c ** _EXPONENT[bid_type], 0.2), 5.0)
    return abid * pace * fac


def _ad(budget=0.5, time_left=0.5, c=1.0, abid=2.0, bid_type=BidType.MultiConstrained, ad_id=0):
    return Ad(
        ad_id=ad_id, category_id=0, brand_id=0, quality_hint=0.0,
        bid=BidFeatures(bid_type=bid_type, bid_constraint=c, budget_left_ratio=budget,
                        time_left_ratio=time_left, default_bid_value=abid),
        latent_quality=np.zeros(4),
    )


class TestCorpus:
    def test_ids_unique_and_sequential(self):
        ads = gen_corpus(MarketConfig(corpus_size=3, num_users=5, seed=7))
        assert [a.ad_id for a in ads] == [0, 1, 2]

    def test_deterministic(self):
        cfg = MarketConfig(corpus_size=50, num_users=10, seed=7)
        a = Market(cfg)
        b = Market(cfg)
        assert np.array_equal(a.ad_latent, b.ad_latent)
        assert np.array_equal(a.ad_constraint, b.ad_constraint)
        assert np.array_equal(a.budget_left, b.budget_left)
        assert np.array_equal(a.user_history, b.user_history)

    def test_empty_config_rejected(self):
        with pytest.raises(ConfigError):
            gen_corpus(MarketConfig(corpus_size=0, num_users=5, seed=1))

    def test_budget_matches_declared_uniform(self):
        # empirical CDF of budget_left_ratio vs U(0.1, 1.0), KS <= 0.02
        market = Market(MarketConfig(corpus_size=10_000, num_users=10, seed=1))
        x = np.sort(market.budget_left)
        cdf_model = np.clip((x - 0.1) / 0.9, 0.0, 1.0)
        cdf_emp = np.arange(1, len(x) + 1) / len(x)
        ks = np.max(np.abs(cdf_emp - cdf_model))
        assert ks < 0.02

    def test_bid_feature_invariants(self):
        market = Market(MarketConfig(corpus_size=200, num_users=10, seed=3))
        assert np.all(market.budget_left >= 0.1) and np.all(market.budget_left <= 1.0)
        assert np.all(market.ad_constraint > 0)
        assert np.all(market.ad_abid > 0)
        ad = market.ad(5)
        assert abs(ad.bid.bid_constraint_log1p - math.log1p(ad.bid.bid_constraint)) < 1e-9


class TestTeacherPctr:
    def test_orthogonal_latents_give_half(self):
        market = Market(MarketConfig(corpus_size=10, num_users=2, noise_sigma=0.0, seed=2))
        market.ad_latent[3] = 0.0
        market.user_pref_w[:] = 0.0  # kill category affinity
        request = market.make_request(0, 0, 1.0)
        assert market.teacher_pctr(request, market.ad(3)) == pytest.approx(0.5, abs=1e-12)

    def test_closed_form_sigmoid(self):
        market = Market(MarketConfig(corpus_size=10, num_users=2, latent_dim=4,
                                     noise_sigma=0.0, seed=2))
        market.user_pref_w[:] = 0.0
        request = market.make_request(0, 0, 1.0)
        # force dot/sqrt(d) = 2 exactly
        market.ad_latent[3] = 0.0
        market.ad_latent[3, 0] = 4.0 / request.latent_interest[0]
        got = market.teacher_pctr(request, market.ad(3))
        assert got == pytest.approx(1.0 / (1.0 + math.exp(-2.0)), abs=1e-9)
        assert got == pytest.approx(0.8808, abs=1e-4)

    def test_bounded_open_interval(self):
        market = Market(MarketConfig(corpus_size=2_000, num_users=50, seed=11))
        rng = np.random.default_rng(0)
        for _ in range(50):
            request = market.make_request(int(rng.integers(1e6)), int(rng.integers(50)), 3.0)
            p = market.teacher_pctr_batch(request, np.arange(2_000))
            assert np.all((p > 0.0) & (p < 1.0))

    def test_deterministic_per_pair(self):
        market = Market(MarketConfig(corpus_size=20, num_users=5, seed=9))
        request = market.make_request(4, 1, 2.0)
        a = market.teacher_pctr_batch(request, np.arange(20))
        b = market.teacher_pctr_batch(request, np.arange(20))
        assert np.array_equal(a, b)
        # and stable under subsetting (hash keyed by ad, not position)
        sub = market.teacher_pctr_batch(request, np.array([7, 3]))
        assert sub[0] == a[7] and sub[1] == a[3]


class TestTeacherPbid:
    def test_monotone_in_budget(self):
        hi = teacher_pbid(_ad(budget=0.8, time_left=0.5))
        lo = teacher_pbid(_ad(budget=0.4, time_left=0.5))
        assert hi > lo

    def test_neutral_point_identity(self):
        # budget == time_left and constraint 1.0 -> both factors exactly 1
        ad = _ad(budget=0.6, time_left=0.6, c=1.0, abid=3.7)
        assert teacher_pbid(ad) == pytest.approx(3.7, abs=1e-12)

    def test_doubling_constraint_ratio(self):
        base = _ad(c=2.0, bid_type=BidType.MultiConstrained)
        doubled = _ad(c=4.0, bid_type=BidType.MultiConstrained)
        got = teacher_pbid(doubled) / teacher_pbid(base)
        assert teacher_pbid(doubled) > teacher_pbid(base)
        expected = _expected_pbid(2.0, 0.5, 0.5, 4.0, BidType.MultiConstrained) / \
            _expected_pbid(2.0, 0.5, 0.5, 2.0, BidType.MultiConstrained)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_policy_matches_documented_form(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            budget = float(rng.uniform(0.0, 1.0))
            tl = float(rng.uniform(0.01, 1.0))
            c = float(rng.lognormal(0.0, 1.0))
            abid = float(rng.lognormal(0.0, 0.5))
            bt = BidType(int(rng.integers(0, 3)))
            ad = _ad(budget=budget, time_left=tl, c=c, abid=abid, bid_type=bt)
            assert teacher_pbid(ad) == pytest.approx(
                _expected_pbid(abid, budget, tl, c, bt), rel=1e-12)

    def test_monotone_unless_clamped(self):
        # positive perturbation of budget or constraint never decreases pbid,
        # strictly increases when the touched factor is off its clamp bound
        rng = np.random.default_rng(6)
        for _ in range(300):
            budget = float(rng.uniform(0.0, 0.95))
            tl = float(rng.uniform(0.05, 1.0))
            c = float(rng.lognormal(0.0, 1.0))
            ad = _ad(budget=budget, time_left=tl, c=c)
            up_b = _ad(budget=min(1.0, budget + 0.1), time_left=tl, c=c)
            up_c = _ad(budget=budget, time_left=tl, c=c * 1.5)
            assert teacher_pbid(up_b) >= teacher_pbid(ad)
            assert teacher_pbid(up_c) >= teacher_pbid(ad)
            pace = (budget / max(tl, 0.05)) ** 0.5
            if 0.2 < pace and (min(1.0, budget + 0.1) / max(tl, 0.05)) ** 0.5 < 5.0:
                assert teacher_pbid(up_b) > teacher_pbid(ad)


class TestSessions:
    def test_degenerate_corpus_all_impressions(self):
        cfg = MarketConfig(corpus_size=5, num_users=3, impressions_per_session=5, seed=1)
        market = Market(cfg)
        session = market.run_session(market.make_request(0, 0, 1.0))
        assert len(session.impressions) == 5
        assert session.ranked == []

    def test_corpus_smaller_than_impressions_rejected(self):
        cfg = MarketConfig(corpus_size=3, num_users=3, impressions_per_session=5, seed=1)
        market = Market(cfg)
        with pytest.raises(ConfigError):
            market.run_session(market.make_request(0, 0, 1.0))

    def test_topk_separation_and_rank_order(self):
        market = Market(MarketConfig(corpus_size=300, num_users=20, ranked_pool_depth=60, seed=4))
        for rid in range(5):
            session = market.run_session(market.make_request(rid, rid, 2.0 + rid))
            emin = min(i.scores.ecpm for i in session.impressions)
            rmax = max(r.scores.ecpm for r in session.ranked)
            assert emin >= rmax
            assert [r.rank for r in session.ranked] == list(range(1, len(session.ranked) + 1))

    def test_impressions_match_bruteforce_top5(self):
        market = Market(MarketConfig(corpus_size=100, num_users=10, ranked_pool_depth=20, seed=8))
        request = market.make_request(3, 2, 5.0)
        session = market.run_session(request, decay_budget=False)
        # independent full scan
        pctr, pbid, ecpm = market.teacher_ecpm_batch(request, np.arange(100))
        best = sorted(range(100), key=lambda i: (-ecpm[i], i))[:5]
        assert [i.ad_id for i in session.impressions] == best

    def test_ecpm_identity_on_log(self):
        market = Market(MarketConfig(corpus_size=80, num_users=10, ranked_pool_depth=30, seed=8))
        session = market.run_session(market.make_request(0, 0, 0.5))
        for rec in session.impressions + session.ranked:
            assert abs(rec.scores.ecpm - rec.scores.pctr * rec.scores.pbid * 1000.0) <= 1e-9 * max(1.0, rec.scores.ecpm)

    def test_counts_match_defaults(self):
        market = Market(MarketConfig(corpus_size=1_000, num_users=20, seed=2))
        session = market.run_session(market.make_request(0, 0, 1.0))
        assert len(session.impressions) == 5
        assert len(session.ranked) == 200  # pool supporting the 15 sampled ads

    def test_stream_deterministic(self):
        cfg = MarketConfig(corpus_size=120, num_users=10, sessions_per_hour=1,
                           duration_days=1, ranked_pool_depth=20, seed=13)
        lines_a = [s.request.request_id for s in Market(cfg).gen_sessions()]
        first_a = next(iter(Market(cfg).gen_sessions()))
        first_b = next(iter(Market(cfg).gen_sessions()))
        assert lines_a[:1] == [first_a.request.request_id]
        assert [i.ad_id for i in first_a.impressions] == [i.ad_id for i in first_b.impressions]


class TestEvents:
    def test_add_budget_clamps(self):
        ad = _ad(budget=0.9)
        out = apply_bid_event(ad, BidEvent(1, 0, 0.0, EventOp.AddBudget, 0.2))
        assert out.bid.budget_left_ratio == 1.0
        assert ad.bid.budget_left_ratio == 0.9  # input untouched

    def test_tighten_halves(self):
        ad = _ad(c=4.0)
        out = apply_bid_event(ad, BidEvent(1, 0, 0.0, EventOp.TightenConstraint, 1.0))
        assert out.bid.bid_constraint == pytest.approx(2.0, abs=1e-12)

    def test_relax_then_tighten_roundtrip(self):
        ad = _ad(c=1.7)
        out = apply_bid_event(ad, BidEvent(1, 0, 0.0, EventOp.RelaxConstraint, 0.37))
        out = apply_bid_event(out, BidEvent(2, 0, 0.0, EventOp.TightenConstraint, 0.37))
        assert out.bid.bid_constraint == pytest.approx(1.7, abs=1e-9)

    def test_positive_op_never_decreases_pbid(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            ad = _ad(budget=float(rng.uniform(0, 1)), time_left=float(rng.uniform(0.05, 1)),
                     c=float(rng.lognormal(0, 1)))
            for op in (EventOp.AddBudget, EventOp.RelaxConstraint):
                out = apply_bid_event(ad, BidEvent(1, 0, 0.0, op, float(rng.uniform(0.05, 0.5))))
                assert teacher_pbid(out) >= teacher_pbid(ad)

    def test_mismatched_ad_id_rejected(self):
        with pytest.raises(InputError):
            apply_bid_event(_ad(ad_id=4), BidEvent(1, 5, 0.0, EventOp.AddBudget, 0.1))

    def test_stream_rate_zero_empty(self):
        cfg = MarketConfig(corpus_size=10, num_users=2, seed=1, events_per_hour=0.0)
        assert gen_event_stream(cfg) == []

    def test_stream_deterministic(self):
        cfg = MarketConfig(corpus_size=10, num_users=2, duration_days=1, seed=5,
                           events_per_hour=3.0)
        assert gen_event_stream(cfg) == gen_event_stream(cfg)

    def test_stream_poisson_count(self):
        cfg = MarketConfig(corpus_size=10, num_users=2, seed=21)
        events = gen_event_stream(cfg, duration_hours=10.0, rate_per_hour=10.0)
        assert abs(len(events) - 100) <= 3 * math.sqrt(100)

    def test_event_ids_strictly_increasing(self):
        cfg = MarketConfig(corpus_size=10, num_users=2, duration_days=1, seed=5,
                           events_per_hour=5.0)
        events = gen_event_stream(cfg)
        ids = [e.event_id for e in events]
        assert ids == sorted(ids) and len(set(ids)) == len(ids)
        pos = positive_ops(events)
        assert all(e.op in (EventOp.AddBudget, EventOp.RelaxConstraint) for e in pos)


class TestTypes:
    def test_teacher_scores_identity_enforced(self):
        TeacherScores(0.5, 2.0, 1000.0)
        with pytest.raises(InvariantError):
            TeacherScores(0.5, 2.0, 999.0)

    def test_bid_features_validation(self):
        with pytest.raises(InvariantError):
            BidFeatures(BidType.OCPC, -1.0, 0.5, 0.5, 1.0)
        with pytest.raises(InvariantError):
            BidFeatures(BidType.OCPC, 1.0, 1.5, 0.5, 1.0)

    def test_time_left_ratio(self):
        assert time_left_ratio_at(0.0) == 1.0
        assert time_left_ratio_at(12.0) == 0.5
        assert time_left_ratio_at(24.0) == 1.0

    def test_factors_bounded(self):
        assert 0.2 <= pacing_factor(0.0, 1.0) <= 5.0
        assert 0.2 <= pacing_factor(1.0, 0.0) <= 5.0
        assert constraint_factor(1e9, int(BidType.MultiConstrained)) == 5.0
        assert constraint_factor(1e-9, int(BidType.OCPC)) == pytest.approx(0.2)


class TestRoundTrip:
    def test_corpus_file(self, tmp_path):
        market = Market(MarketConfig(corpus_size=40, num_users=5, seed=3))
        path = tmp_path / "corpus.tsv"
        write_corpus(path, market)
        state = read_corpus_state(path)
        assert np.array_equal(state["ad_id"], np.arange(40))
        assert np.array_equal(state["bid_constraint"], market.constraint)
        assert np.array_equal(state["latent_quality"], market.ad_latent)

    def test_sessions_file(self, tmp_path):
        cfg = MarketConfig(corpus_size=60, num_users=5, sessions_per_hour=1,
                           duration_days=1, ranked_pool_depth=10, seed=3)
        market = Market(cfg)
        sessions = list(market.gen_sessions())
        path = tmp_path / "sessions.log"
        write_sessions(path, sessions)
        back = list(read_sessions(path))
        assert len(back) == len(sessions)
        for orig, got in zip(sessions, back):
            assert got.request.request_id == orig.request.request_id
            assert got.request.behavior_sequence == orig.request.behavior_sequence
            assert [i.ad_id for i in got.impressions] == [i.ad_id for i in orig.impressions]
            assert got.impressions[0].scores == orig.impressions[0].scores
            assert [r.rank for r in got.ranked] == [r.rank for r in orig.ranked]

    def test_events_file(self, tmp_path):
        cfg = MarketConfig(corpus_size=10, num_users=2, duration_days=1, seed=5,
                           events_per_hour=4.0)
        events = gen_event_stream(cfg)
        path = tmp_path / "events.tsv"
        write_events(path, events)
        assert read_events(path) == events
