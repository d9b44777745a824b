"""Session logs -> training data: ranked-ad sampling, LTR pairs, bid
perturbations, temporal split, and the packed tensors the trainer consumes."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError, InvariantError
from .market import Ad, BidFeatures, RankedRecord, SessionLog
from .util import fmt_float, spawn_rng

logger = logging.getLogger(__name__)

PAIRS_SCHEMA = "bidaware-pairs-v1"
PERTURB_SCHEMA = "bidaware-perturbs-v1"
BUCKETS_SCHEMA = "bidaware-buckets-v1"

# Stratified sampling of the ranked pool: (lo, hi] rank bands, draws per band.
RANK_STRATA = ((1, 10), (11, 100), (101, None))
PER_STRATUM = 5
EASY_PER_POSITIVE = 5

BUDGET_DELTA_RANGE = (0.05, 0.3)
CONSTRAINT_FACTOR_RANGE = (1.1, 2.0)


class PairKind(enum.IntEnum):
    Hard = 0
    Easy = 1


class PerturbedFeature(enum.IntEnum):
    BudgetLeftRatio = 0
    BidConstraint = 1


@dataclass(frozen=True)
class TrainPair:
    request_id: int
    pos_ad_id: int
    neg_ad_id: int
    kind: PairKind

    def __post_init__(self):
        if self.pos_ad_id == self.neg_ad_id:
            raise InvariantError("pair with pos == neg")


@dataclass(frozen=True)
class PerturbedSample:
    request_id: int
    ad_id: int
    perturbed_bid: BidFeatures
    indicator: int
    perturbed_feature: PerturbedFeature
    direction: int  # +1 raised, -1 lowered
    magnitude: float

    def __post_init__(self):
        if self.indicator not in (1, -1):
            raise InvariantError("indicator must be +1 or -1")
        if self.indicator != self.direction:
            raise InvariantError("indicator contradicts perturbation direction")


@dataclass
class DatasetSplit:
    train_sessions: list[SessionLog]
    test_sessions: list[SessionLog]
    boundary_time: float


def stratified_sample_ranking(session: SessionLog, seed: int) -> list[RankedRecord]:
    """Up to 5 ranked ads per rank band (1-10, 11-100, >100), uniform within."""
    rng = spawn_rng(seed, 10, session.request.request_id)
    out: list[RankedRecord] = []
    for lo, hi in RANK_STRATA:
        band = [r for r in session.ranked if r.rank >= lo and (hi is None or r.rank <= hi)]
        if len(band) <= PER_STRATUM:
            out.extend(band)
        else:
            picks = rng.choice(len(band), size=PER_STRATUM, replace=False)
            out.extend(band[i] for i in sorted(picks))
    return out


def build_hard_pairs(session: SessionLog, sampled: Sequence[RankedRecord] | None = None,
                     cap: int | None = None, seed: int = 0) -> list[TrainPair]:
    """Impression x sampled-ranked cross product, optionally capped."""
    if sampled is None:
        sampled = stratified_sample_ranking(session, seed)
    rid = session.request.request_id
    pairs = [TrainPair(rid, imp.ad_id, neg.ad_id, PairKind.Hard)
             for imp in session.impressions for neg in sampled
             if imp.ad_id != neg.ad_id]
    if cap is not None and len(pairs) > cap:
        rng = spawn_rng(seed, 11, rid)
        keep = rng.choice(len(pairs), size=cap, replace=False)
        pairs = [pairs[i] for i in sorted(keep)]
    return pairs


def build_easy_pairs(session: SessionLog, corpus_size: int, seed: int = 0,
                     sampled: Sequence[RankedRecord] | None = None,
                     per_positive: int = EASY_PER_POSITIVE) -> list[TrainPair]:
    """Per positive (impressions + sampled ranked), negatives drawn uniformly
    from the corpus excluding every ad present in the session."""
    if sampled is None:
        sampled = stratified_sample_ranking(session, seed)
    session_ads = {imp.ad_id for imp in session.impressions}
    session_ads.update(r.ad_id for r in session.ranked)
    if corpus_size <= len(session_ads):
        raise ConfigError("corpus not larger than the session's ad set")
    rng = spawn_rng(seed, 12, session.request.request_id)
    positives = [imp.ad_id for imp in session.impressions] + [r.ad_id for r in sampled]
    pairs = []
    rid = session.request.request_id
    for pos in positives:
        taken = 0
        while taken < per_positive:
            draw = rng.integers(0, corpus_size, size=per_positive * 2)
            for neg in draw:
                neg = int(neg)
                if neg not in session_ads and neg != pos:
                    pairs.append(TrainPair(rid, pos, neg, PairKind.Easy))
                    taken += 1
                    if taken == per_positive:
                        break
    return pairs


def indicator_for(feature: PerturbedFeature, direction: int) -> int:
    """Raising budget or relaxing the constraint simulates a positive operation."""
    if direction not in (1, -1):
        raise InvariantError("direction must be +1 or -1")
    return direction


def perturb_bid_feature(ad: Ad, seed: int, request_id: int = -1) -> PerturbedSample:
    """Perturb one bid feature; direction flips when there is no headroom."""
    rng = spawn_rng(seed, 13, request_id, ad.ad_id)
    feature = PerturbedFeature(int(rng.integers(0, 2)))
    direction = 1 if rng.integers(0, 2) == 1 else -1
    bid = ad.bid
    if feature == PerturbedFeature.BudgetLeftRatio:
        if direction > 0 and bid.budget_left_ratio >= 1.0:
            direction = -1
        elif direction < 0 and bid.budget_left_ratio <= 0.0:
            direction = 1
        magnitude = float(rng.uniform(*BUDGET_DELTA_RANGE))
        value = min(1.0, max(0.0, bid.budget_left_ratio + direction * magnitude))
        new_bid = replace(bid, budget_left_ratio=value)
    else:
        magnitude = float(rng.uniform(*CONSTRAINT_FACTOR_RANGE))
        raw = bid.bid_constraint * magnitude if direction > 0 else bid.bid_constraint / magnitude
        new_bid = replace(bid, bid_constraint=raw, bid_constraint_log1p=math.log1p(raw))
    return PerturbedSample(
        request_id=request_id,
        ad_id=ad.ad_id,
        perturbed_bid=new_bid,
        indicator=indicator_for(feature, direction),
        perturbed_feature=feature,
        direction=direction,
        magnitude=magnitude,
    )


def temporal_split(sessions: Iterable[SessionLog], boundary_time: float) -> DatasetSplit:
    """Strict partition: strictly-before goes to train, at-or-after to test."""
    train, test = [], []
    for session in sessions:
        (train if session.request.sim_time < boundary_time else test).append(session)
    train.sort(key=lambda s: s.request.sim_time)
    test.sort(key=lambda s: s.request.sim_time)
    if not train or not test:
        logger.warning("temporal split left one side empty (boundary %.3f)", boundary_time)
    return DatasetSplit(train, test, boundary_time)


# --------------------------------------------------------------- bucketization

class FeatureBuckets:
    """Per-feature quantile cut points; values bucketize right-closed.

    A value exactly on a cut point belongs to the bucket whose right edge it
    is, i.e. bucket i covers (cuts[i-1], cuts[i]].
    """

    NUM_BUCKETS = 32

    def __init__(self, cuts: dict[str, np.ndarray]):
        self.cuts = {k: np.asarray(v, dtype=float) for k, v in cuts.items()}

    @classmethod
    def fit(cls, samples: dict[str, np.ndarray]) -> "FeatureBuckets":
        qs = np.linspace(0, 1, cls.NUM_BUCKETS + 1)[1:-1]
        return cls({name: np.quantile(np.asarray(vals, dtype=float), qs)
                    for name, vals in samples.items()})

    def digitize(self, name: str, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if np.isnan(values).any():
            raise InputError(f"NaN numeric input for feature {name}")
        return np.searchsorted(self.cuts[name], values, side="left").astype(np.int64)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"#schema={BUCKETS_SCHEMA}\n")
            for name, cuts in sorted(self.cuts.items()):
                fh.write(name + "\t" + ",".join(fmt_float(c) for c in cuts) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureBuckets":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != f"#schema={BUCKETS_SCHEMA}":
            raise InputError(f"{path}: not a buckets file")
        cuts = {}
        for line in lines[1:]:
            if line:
                name, _, vals = line.partition("\t")
                cuts[name] = np.array([float(v) for v in vals.split(",")])
        return cls(cuts)

    def to_header(self) -> dict:
        return {name: [float(c) for c in cuts] for name, cuts in self.cuts.items()}

    @classmethod
    def from_header(cls, header: dict) -> "FeatureBuckets":
        return cls({name: np.asarray(cuts) for name, cuts in header.items()})


AGE_BUCKETS = 32
AGE_SPAN = 72  # behaviour-event ages live in [0, 72) hours


def age_bucket(ages) -> np.ndarray:
    """Fixed linear bucketing for behaviour-event ages."""
    a = np.clip(np.asarray(ages, dtype=np.int64), 0, AGE_SPAN - 1)
    return a * AGE_BUCKETS // AGE_SPAN


# ------------------------------------------------------------------ file I/O

def write_pairs(path: str | Path, pairs: Iterable[TrainPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#schema={PAIRS_SCHEMA}\n")
        for p in pairs:
            fh.write(f"{p.request_id}\t{p.pos_ad_id}\t{p.neg_ad_id}\t{p.kind.name}\n")


def read_pairs(path: str | Path) -> list[TrainPair]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"#schema={PAIRS_SCHEMA}":
        raise InputError(f"{path}: not a pair file")
    out = []
    for line in lines[1:]:
        if line:
            rid, pos, neg, kind = line.split("\t")
            out.append(TrainPair(int(rid), int(pos), int(neg), PairKind[kind]))
    return out


def write_perturbs(path: str | Path, samples: Iterable[PerturbedSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#schema={PERTURB_SCHEMA}\n")
        for s in samples:
            fh.write("\t".join((
                str(s.request_id), str(s.ad_id), s.perturbed_feature.name,
                "up" if s.direction > 0 else "down",
                fmt_float(s.magnitude), str(s.indicator))) + "\n")


# ------------------------------------------------------- packed training set

@dataclass
class TrainingSet:
    """Array-packed sessions, entries, pairs, and perturbations.

    Entries are the session's logged ads (impressions + sampled ranked) with
    their teacher scores and bid-state snapshots; pairs and perturbations
    index into them. Easy-pair negatives reference corpus ads directly and
    take the corpus bid state with the session's time_left.
    """

    # per session
    sess_request_id: np.ndarray
    sess_prof: np.ndarray       # (S, 2)
    sess_ctx: np.ndarray        # (S, 2)
    sess_seq_ad: np.ndarray     # (S, L)
    sess_seq_cat: np.ndarray    # (S, L)
    sess_seq_age: np.ndarray    # (S, L)
    sess_seq_mask: np.ndarray   # (S, L) bool
    sess_time_left: np.ndarray  # (S,)
    # per entry
    entry_session: np.ndarray
    entry_ad: np.ndarray
    entry_pctr: np.ndarray
    entry_pbid: np.ndarray
    entry_budget: np.ndarray
    entry_time_left: np.ndarray
    entry_is_impression: np.ndarray
    # per pair
    pair_session: np.ndarray
    pair_pos_entry: np.ndarray
    pair_neg_entry: np.ndarray  # -1 when the negative is a raw corpus ad
    pair_neg_ad: np.ndarray
    pair_kind: np.ndarray
    # per perturbation (one per entry)
    pert_feature: np.ndarray
    pert_value: np.ndarray      # perturbed raw value of the touched feature
    pert_indicator: np.ndarray

    @property
    def num_sessions(self) -> int:
        return len(self.sess_request_id)

    @property
    def num_pairs(self) -> int:
        return len(self.pair_session)

    @property
    def num_entries(self) -> int:
        return len(self.entry_session)


def build_training_set(sessions: Sequence[SessionLog], corpus_size: int,
                       behavior_len: int, seed: int,
                       pairs_per_session: int = 25) -> TrainingSet:
    """Pack sessions into arrays; sampling matches the per-session ops above."""
    if not sessions:
        raise InputError("no sessions to build a training set from")
    S = len(sessions)
    L = behavior_len
    sess_request_id = np.zeros(S, dtype=np.int64)
    sess_prof = np.zeros((S, 2), dtype=np.int64)
    sess_ctx = np.zeros((S, 2), dtype=np.int64)
    sess_seq_ad = np.zeros((S, L), dtype=np.int64)
    sess_seq_cat = np.zeros((S, L), dtype=np.int64)
    sess_seq_age = np.zeros((S, L), dtype=np.int64)
    sess_seq_mask = np.zeros((S, L), dtype=bool)
    sess_time_left = np.zeros(S, dtype=float)

    entry_rows = []
    pair_rows = []
    pert_rows = []

    for si, session in enumerate(sessions):
        r = session.request
        sess_request_id[si] = r.request_id
        sess_prof[si] = r.profile_features
        sess_ctx[si] = r.context_features
        for j, (a, c, g) in enumerate(r.behavior_sequence[:L]):
            sess_seq_ad[si, j] = a
            sess_seq_cat[si, j] = c
            sess_seq_age[si, j] = g
            sess_seq_mask[si, j] = True
        tl = session.impressions[0].time_left_ratio if session.impressions else 1.0
        sess_time_left[si] = tl

        sampled = stratified_sample_ranking(session, seed)
        records = [(imp, True) for imp in session.impressions] + [(rk, False) for rk in sampled]
        base = len(entry_rows)
        ad_to_entry = {}
        for rec, is_imp in records:
            ad_to_entry[rec.ad_id] = len(entry_rows)
            entry_rows.append((si, rec.ad_id, rec.scores.pctr, rec.scores.pbid,
                               rec.budget_left_ratio, rec.time_left_ratio, is_imp))
        for p in build_hard_pairs(session, sampled, cap=pairs_per_session, seed=seed):
            pair_rows.append((si, ad_to_entry[p.pos_ad_id], ad_to_entry[p.neg_ad_id],
                              p.neg_ad_id, int(p.kind)))
        for p in build_easy_pairs(session, corpus_size, seed=seed, sampled=sampled):
            pair_rows.append((si, ad_to_entry[p.pos_ad_id], -1, p.neg_ad_id, int(p.kind)))
        # one perturbation per entry, against its session-time bid state
        for rec, _ in records:
            rng = spawn_rng(seed, 13, r.request_id, rec.ad_id)
            feature = int(rng.integers(0, 2))
            direction = 1 if rng.integers(0, 2) == 1 else -1
            if feature == int(PerturbedFeature.BudgetLeftRatio):
                b = rec.budget_left_ratio
                if direction > 0 and b >= 1.0:
                    direction = -1
                elif direction < 0 and b <= 0.0:
                    direction = 1
                mag = float(rng.uniform(*BUDGET_DELTA_RANGE))
                value = min(1.0, max(0.0, b + direction * mag))
            else:
                mag = float(rng.uniform(*CONSTRAINT_FACTOR_RANGE))
                value = mag if direction > 0 else 1.0 / mag  # multiplier on raw constraint
            pert_rows.append((feature, value, direction))

    entries = np.array(entry_rows, dtype=float)
    pairs = np.array(pair_rows, dtype=np.int64)
    perts = np.array(pert_rows, dtype=float)
    return TrainingSet(
        sess_request_id=sess_request_id, sess_prof=sess_prof, sess_ctx=sess_ctx,
        sess_seq_ad=sess_seq_ad, sess_seq_cat=sess_seq_cat, sess_seq_age=sess_seq_age,
        sess_seq_mask=sess_seq_mask, sess_time_left=sess_time_left,
        entry_session=entries[:, 0].astype(np.int64),
        entry_ad=entries[:, 1].astype(np.int64),
        entry_pctr=entries[:, 2],
        entry_pbid=entries[:, 3],
        entry_budget=entries[:, 4],
        entry_time_left=entries[:, 5],
        entry_is_impression=entries[:, 6].astype(bool),
        pair_session=pairs[:, 0],
        pair_pos_entry=pairs[:, 1],
        pair_neg_entry=pairs[:, 2],
        pair_neg_ad=pairs[:, 3],
        pair_kind=pairs[:, 4],
        pert_feature=perts[:, 0].astype(np.int64),
        pert_value=perts[:, 1],
        pert_indicator=perts[:, 2].astype(np.int64),
    )
