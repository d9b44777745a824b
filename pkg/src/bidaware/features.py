"""Feature space, corpus state, and integer featurization for the model.

The model consumes integer id matrices only; this module owns the mapping
from raw market state (categoricals + numeric bid signals) to those ids,
including quantile bucketization of numerics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import FeatureBuckets, age_bucket
from .errors import InputError
from .market import Market, MarketConfig, UserRequest

# Column order of the ad feature matrix; the bid block is the tail and is
# dropped wholesale when bid features are disabled.
AD_STATIC_COLS = ("ad_id", "category", "brand", "quality")
AD_BID_COLS = ("bid_type", "constraint", "budget", "time", "abid")
NUMERIC_FEATURES = ("quality", "constraint", "budget", "time", "abid")


@dataclass
class FeatureSpace:
    num_ads: int
    num_categories: int
    num_brands: int
    user_bucket_vocab: int
    num_segments: int
    seq_len: int
    buckets: FeatureBuckets

    @classmethod
    def from_market_config(cls, cfg: MarketConfig, buckets: FeatureBuckets) -> "FeatureSpace":
        return cls(
            num_ads=cfg.corpus_size,
            num_categories=cfg.num_categories,
            num_brands=cfg.num_brands,
            user_bucket_vocab=cfg.user_bucket_vocab,
            num_segments=cfg.num_segments,
            seq_len=cfg.behavior_len,
            buckets=buckets,
        )

    def to_header(self) -> dict:
        return {
            "num_ads": self.num_ads,
            "num_categories": self.num_categories,
            "num_brands": self.num_brands,
            "user_bucket_vocab": self.user_bucket_vocab,
            "num_segments": self.num_segments,
            "seq_len": self.seq_len,
            "buckets": self.buckets.to_header(),
        }

    @classmethod
    def from_header(cls, header: dict) -> "FeatureSpace":
        return cls(
            num_ads=int(header["num_ads"]),
            num_categories=int(header["num_categories"]),
            num_brands=int(header["num_brands"]),
            user_bucket_vocab=int(header["user_bucket_vocab"]),
            num_segments=int(header["num_segments"]),
            seq_len=int(header["seq_len"]),
            buckets=FeatureBuckets.from_header(header["buckets"]),
        )


def fit_buckets(market: Market, budget_samples=None, time_samples=None) -> FeatureBuckets:
    """Quantile cut points from corpus columns plus observed bid-state samples."""
    budget = np.asarray(budget_samples if budget_samples is not None else market.budget_left)
    time_vals = np.asarray(time_samples) if time_samples is not None else np.linspace(0, 1, 512)
    return FeatureBuckets.fit({
        "quality": market.ad_quality_hint,
        "constraint": np.log1p(market.ad_constraint),
        "budget": budget,
        "time": time_vals,
        "abid": market.ad_abid,
    })


class CorpusState:
    """Mutable ad-side state the model featurizes from.

    Holds the static ad columns plus the live (budget, constraint) state;
    the near-line path mutates it through advertiser events.
    """

    def __init__(self, category, brand, bid_type, quality_hint, constraint, abid,
                 budget_left, space: FeatureSpace):
        self.category = np.asarray(category, dtype=np.int64)
        self.brand = np.asarray(brand, dtype=np.int64)
        self.bid_type = np.asarray(bid_type, dtype=np.int64)
        self.quality_hint = np.asarray(quality_hint, dtype=float)
        self.constraint = np.asarray(constraint, dtype=float)
        self.abid = np.asarray(abid, dtype=float)
        self.budget_left = np.asarray(budget_left, dtype=float)
        self.space = space
        self.num_ads = len(self.category)
        self._quality_b = space.buckets.digitize("quality", self.quality_hint)
        self._abid_b = space.buckets.digitize("abid", self.abid)

    @classmethod
    def from_market(cls, market: Market, space: FeatureSpace) -> "CorpusState":
        return cls(market.ad_category, market.ad_brand, market.ad_bid_type,
                   market.ad_quality_hint, market.constraint.copy(), market.ad_abid,
                   market.budget_left.copy(), space)

    @classmethod
    def from_corpus_columns(cls, cols: dict, space: FeatureSpace) -> "CorpusState":
        return cls(cols["category_id"], cols["brand_id"], cols["bid_type"],
                   cols["quality_hint"], cols["bid_constraint"].copy(),
                   cols["default_bid_value"], cols["budget_left_ratio"].copy(), space)

    def ad_matrix(self, ad_ids, budget=None, time_left=None, constraint=None) -> np.ndarray:
        """Integer feature matrix (N, 9): static columns then the bid block.

        `budget` / `time_left` / `constraint` override the stored state, so
        callers can featurize an ad as of a session snapshot or perturbation.
        """
        ids = np.asarray(ad_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_ads):
            raise InputError("ad id out of corpus range")
        buckets = self.space.buckets
        budget = self.budget_left[ids] if budget is None else np.asarray(budget, dtype=float)
        constraint = self.constraint[ids] if constraint is None else np.asarray(constraint, dtype=float)
        if time_left is None:
            time_left = np.ones(len(ids))
        time_left = np.broadcast_to(np.asarray(time_left, dtype=float), ids.shape)
        out = np.empty((len(ids), 9), dtype=np.int64)
        out[:, 0] = ids
        out[:, 1] = self.category[ids]
        out[:, 2] = self.brand[ids]
        out[:, 3] = self._quality_b[ids]
        out[:, 4] = self.bid_type[ids]
        out[:, 5] = buckets.digitize("constraint", np.log1p(constraint))
        out[:, 6] = buckets.digitize("budget", budget)
        out[:, 7] = buckets.digitize("time", time_left)
        out[:, 8] = self._abid_b[ids]
        return out

    def apply_event(self, ad_id: int, op_name: str, magnitude: float) -> None:
        if not 0 <= ad_id < self.num_ads:
            raise InputError(f"unknown ad_id {ad_id}")
        if op_name == "AddBudget":
            self.budget_left[ad_id] = min(1.0, self.budget_left[ad_id] + magnitude)
        elif op_name == "ReduceBudget":
            self.budget_left[ad_id] = max(0.0, self.budget_left[ad_id] - magnitude)
        elif op_name == "RelaxConstraint":
            self.constraint[ad_id] *= 1.0 + magnitude
        elif op_name == "TightenConstraint":
            self.constraint[ad_id] /= 1.0 + magnitude
        else:
            raise InputError(f"unknown event op {op_name}")


@dataclass
class RequestFeatures:
    """One request's integer features, ready for embedding."""

    prof: np.ndarray      # (2,) user_bucket, segment
    ctx: np.ndarray       # (2,) hour, slot
    seq_ad: np.ndarray    # (L,)
    seq_cat: np.ndarray   # (L,)
    seq_age_b: np.ndarray  # (L,)
    seq_mask: np.ndarray  # (L,) bool


def featurize_request(request: UserRequest, space: FeatureSpace) -> RequestFeatures:
    L = space.seq_len
    seq_ad = np.zeros(L, dtype=np.int64)
    seq_cat = np.zeros(L, dtype=np.int64)
    seq_age = np.zeros(L, dtype=np.int64)
    mask = np.zeros(L, dtype=bool)
    for j, (a, c, g) in enumerate(request.behavior_sequence[:L]):
        seq_ad[j], seq_cat[j], seq_age[j] = a, c, g
        mask[j] = True
    return RequestFeatures(
        prof=np.asarray(request.profile_features, dtype=np.int64),
        ctx=np.asarray(request.context_features, dtype=np.int64),
        seq_ad=seq_ad, seq_cat=seq_cat, seq_age_b=age_bucket(seq_age), seq_mask=mask,
    )


def request_features_from_arrays(prof, ctx, seq_ad, seq_cat, seq_age, seq_mask) -> RequestFeatures:
    return RequestFeatures(
        prof=np.asarray(prof, dtype=np.int64),
        ctx=np.asarray(ctx, dtype=np.int64),
        seq_ad=np.asarray(seq_ad, dtype=np.int64),
        seq_cat=np.asarray(seq_cat, dtype=np.int64),
        seq_age_b=age_bucket(seq_age),
        seq_mask=np.asarray(seq_mask, dtype=bool),
    )
