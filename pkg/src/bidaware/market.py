"""Synthetic ad marketplace: corpus, users, teacher oracle, sessions, events.

The teacher plays the ranking stage: it scores every candidate with
pCTR x pBid x 1000 and decides which ads get exposed. Ads carry hidden
latent vectors the trainable model never sees; the model has to work from
observable features, which is exactly what makes the retrieval task
non-trivial. Everything here is a pure function of (config, seed).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, InputError, InvariantError
from .util import clamp, fmt_float, hash_gauss, hash_uniform, spawn_rng

CORPUS_SCHEMA = "bidaware-corpus-v1"
USERS_SCHEMA = "bidaware-users-v1"
SESSIONS_SCHEMA = "bidaware-sessions-v1"
EVENTS_SCHEMA = "bidaware-events-v1"

# Bounds shared by the pacing and constraint factors of the bid policy.
FACTOR_LO = 0.2
FACTOR_HI = 5.0


class BidType(enum.IntEnum):
    OCPC = 0
    MaxReturn = 1
    MultiConstrained = 2


# Exponent of the constraint factor per bid type; higher KPI headroom
# raises the predicted bid more steeply for constraint-driven bidders.
CONSTRAINT_EXPONENT = {
    BidType.OCPC: 0.30,
    BidType.MaxReturn: 0.40,
    BidType.MultiConstrained: 0.50,
}


class EventOp(enum.IntEnum):
    AddBudget = 0
    ReduceBudget = 1
    RelaxConstraint = 2
    TightenConstraint = 3


POSITIVE_OPS = (EventOp.AddBudget, EventOp.RelaxConstraint)


@dataclass
class BidFeatures:
    """The mutable bid signals of an ad."""

    bid_type: BidType
    bid_constraint: float
    budget_left_ratio: float
    time_left_ratio: float
    default_bid_value: float
    bid_constraint_log1p: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.bid_constraint <= 0:
            raise InvariantError("bid_constraint must be positive")
        if self.bid_constraint_log1p is None:
            self.bid_constraint_log1p = math.log1p(self.bid_constraint)
        if self.default_bid_value <= 0:
            raise InvariantError("default_bid_value must be positive")
        if not 0.0 <= self.budget_left_ratio <= 1.0:
            raise InvariantError("budget_left_ratio outside [0,1]")
        if not 0.0 <= self.time_left_ratio <= 1.0:
            raise InvariantError("time_left_ratio outside [0,1]")
        if abs(self.bid_constraint_log1p - math.log1p(self.bid_constraint)) > 1e-9:
            raise InvariantError("stale log1p(bid_constraint)")


@dataclass
class Ad:
    ad_id: int
    category_id: int
    brand_id: int
    quality_hint: float
    bid: BidFeatures
    latent_quality: np.ndarray  # oracle-only, never a model input


@dataclass
class UserRequest:
    request_id: int
    user_id: int
    sim_time: float
    profile_features: tuple[int, int]  # (user_bucket, segment)
    context_features: tuple[int, int]  # (hour_of_day, slot)
    behavior_sequence: list[tuple[int, int, int]]  # (ad_id, category_id, event_age)
    latent_interest: np.ndarray  # oracle-only


@dataclass(frozen=True)
class TeacherScores:
    pctr: float
    pbid: float
    ecpm: float

    def __post_init__(self):
        if not 0.0 < self.pctr < 1.0 or self.pbid <= 0.0:
            raise InvariantError("teacher scores out of range")
        if abs(self.ecpm - self.pctr * self.pbid * 1000.0) > 1e-9 * max(1.0, self.ecpm):
            raise InvariantError("eCPM != pCTR * pBid * 1000")


@dataclass(frozen=True)
class ImpressionRecord:
    ad_id: int
    scores: TeacherScores
    budget_left_ratio: float
    time_left_ratio: float


@dataclass(frozen=True)
class RankedRecord:
    ad_id: int
    scores: TeacherScores
    rank: int  # 1-based position within the non-exposed ranking pool
    budget_left_ratio: float
    time_left_ratio: float


@dataclass
class SessionLog:
    request: UserRequest
    impressions: list[ImpressionRecord]
    ranked: list[RankedRecord]


@dataclass(frozen=True)
class BidEvent:
    event_id: int
    ad_id: int
    sim_time: float
    op: EventOp
    magnitude: float

    def __post_init__(self):
        if self.magnitude <= 0:
            raise InvariantError("event magnitude must be positive")


@dataclass
class MarketConfig:
    corpus_size: int = 10_000
    num_users: int = 5_000
    sessions_per_hour: int = 260
    duration_days: int = 8
    impressions_per_session: int = 5
    ranked_per_session: int = 15
    ranked_pool_depth: int = 200
    latent_dim: int = 16
    noise_sigma: float = 0.1
    num_categories: int = 50
    num_brands: int = 200
    num_segments: int = 20
    user_bucket_vocab: int = 2_000
    behavior_len: int = 20
    events_per_hour: float = 40.0
    budget_decay_per_impression: float = 0.004
    candidate_sample: int = 0  # 0 = score the full corpus per session
    pacing_gamma: float = 0.5
    pacing_eps: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        counts = (
            self.corpus_size, self.num_users, self.sessions_per_hour,
            self.duration_days, self.impressions_per_session,
            self.ranked_per_session, self.ranked_pool_depth, self.latent_dim,
        )
        if any(c <= 0 for c in counts):
            raise ConfigError("all counts must be positive")
        if self.impressions_per_session >= self.ranked_pool_depth + self.impressions_per_session + 1:
            raise ConfigError("ranked pool too small")

    @property
    def total_sessions(self) -> int:
        return self.sessions_per_hour * 24 * self.duration_days

    @property
    def duration_hours(self) -> float:
        return 24.0 * self.duration_days


def time_left_ratio_at(sim_time: float) -> float:
    """Remaining fraction of the current simulated day."""
    return 1.0 - (sim_time % 24.0) / 24.0


def pacing_factor(budget_left, time_left, gamma=0.5, eps=0.05):
    """Budget pacing multiplier: 1 when spend tracks the clock, bounded."""
    return clamp((np.asarray(budget_left, dtype=float) / np.maximum(time_left, eps)) ** gamma,
                 FACTOR_LO, FACTOR_HI)


_CONSTRAINT_EXPO = np.array([CONSTRAINT_EXPONENT[BidType(i)] for i in range(3)])


def constraint_factor(bid_constraint, bid_type):
    """KPI-headroom multiplier, strictly increasing in the constraint."""
    expo = _CONSTRAINT_EXPO[np.asarray(bid_type, dtype=np.int64)]
    return clamp(np.asarray(bid_constraint, dtype=float) ** expo, FACTOR_LO, FACTOR_HI)


class Market:
    """Generated corpus + user base with the teacher oracle over them.

    Array-of-columns layout; the mutable pieces are `budget_left` (decays
    with won impressions, re-drawn each simulated day) and `constraint`
    (moved by advertiser events).
    """

    def __init__(self, config: MarketConfig):
        config.validate()
        self.config = config
        self._build()

    # ------------------------------------------------------------------ build
    def _build(self) -> None:
        cfg = self.config
        rng = spawn_rng(cfg.seed, 0)
        n, d = cfg.corpus_size, cfg.latent_dim

        self.tilt = rng.normal(size=d) / math.sqrt(d)
        self.ad_category = rng.integers(0, cfg.num_categories, size=n)
        self.ad_brand = rng.integers(0, cfg.num_brands, size=n)
        self.ad_latent = rng.normal(size=(n, d))
        self.ad_quality_hint = self.ad_latent @ self.tilt * math.sqrt(d) + 0.3 * rng.normal(size=n)
        self.ad_bid_type = rng.integers(0, 3, size=n)
        self.ad_constraint = np.exp(rng.normal(0.0, 1.0, size=n))
        self.ad_abid = np.exp(rng.normal(0.0, 0.5, size=n))
        self.ad_budget0 = rng.uniform(0.1, 1.0, size=n)

        self.budget_left = self.ad_budget0.copy()
        self.constraint = self.ad_constraint.copy()
        self.current_day = 0

        urng = spawn_rng(cfg.seed, 1)
        u = cfg.num_users
        centers = urng.normal(size=(cfg.num_segments, d))
        self.user_segment = urng.integers(0, cfg.num_segments, size=u)
        self.user_latent = (0.6 * centers[self.user_segment]
                            + 0.4 * urng.normal(size=(u, d))
                            + 0.5 * self.tilt * math.sqrt(d))
        self.user_bucket = (np.arange(u) * 2654435761 % cfg.user_bucket_vocab).astype(np.int64)
        self.user_pref_cats = urng.integers(0, cfg.num_categories, size=(u, 3))
        self.user_pref_w = np.tile(np.array([0.9, 0.6, 0.4]), (u, 1))
        self._build_history_pools(urng)

    def _build_history_pools(self, rng: np.random.Generator, pool_size: int = 60) -> None:
        cfg = self.config
        n = cfg.corpus_size
        sample = min(n, 400)
        pools = np.empty((cfg.num_users, pool_size), dtype=np.int64)
        for uid in range(cfg.num_users):
            cand = rng.choice(n, size=sample, replace=sample > n)
            score = (self.ad_latent[cand] @ self.user_latent[uid]) / math.sqrt(cfg.latent_dim)
            score = score + self._affinity(uid, cand)
            top = cand[np.argsort(-score, kind="stable")[:pool_size]]
            pools[uid] = np.resize(top, pool_size)
        self.user_history = pools

    # ------------------------------------------------------------ teacher oracle
    def _affinity(self, user_id: int, ad_idx: np.ndarray) -> np.ndarray:
        cats = self.ad_category[ad_idx]
        out = np.zeros(len(np.atleast_1d(cats)), dtype=float)
        for c, w in zip(self.user_pref_cats[user_id], self.user_pref_w[user_id]):
            out = np.where(cats == c, np.maximum(out, w), out)
        return out

    def teacher_pctr_batch(self, request: UserRequest, ad_idx: np.ndarray) -> np.ndarray:
        cfg = self.config
        logits = (self.ad_latent[ad_idx] @ request.latent_interest) / math.sqrt(cfg.latent_dim)
        logits = logits + self._affinity(request.user_id, ad_idx)
        if cfg.noise_sigma > 0:
            logits = logits + cfg.noise_sigma * hash_gauss(cfg.seed, request.request_id, ad_idx)
        return 1.0 / (1.0 + np.exp(-logits))

    def teacher_pctr(self, request: UserRequest, ad: Ad) -> float:
        return float(self.teacher_pctr_batch(request, np.array([ad.ad_id]))[0])

    def teacher_pbid_batch(self, ad_idx: np.ndarray, sim_time: float) -> np.ndarray:
        cfg = self.config
        tl = time_left_ratio_at(sim_time)
        pace = pacing_factor(self.budget_left[ad_idx], tl, cfg.pacing_gamma, cfg.pacing_eps)
        fac = constraint_factor(self.constraint[ad_idx], self.ad_bid_type[ad_idx])
        return self.ad_abid[ad_idx] * pace * fac

    def teacher_ecpm_batch(self, request: UserRequest, ad_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pctr = self.teacher_pctr_batch(request, ad_idx)
        pbid = self.teacher_pbid_batch(ad_idx, request.sim_time)
        return pctr, pbid, pctr * pbid * 1000.0

    # --------------------------------------------------------------- sessions
    def advance_to(self, sim_time: float) -> None:
        """Roll the daily clock forward; budgets re-draw at day boundaries."""
        day = int(sim_time // 24.0)
        while self.current_day < day:
            self.current_day += 1
            fresh = 0.1 + 0.9 * hash_uniform(
                self.config.seed, np.arange(self.config.corpus_size), self.current_day, 7
            )
            self.budget_left = fresh

    def make_request(self, request_id: int, user_id: int, sim_time: float) -> UserRequest:
        cfg = self.config
        rng = spawn_rng(cfg.seed, 2, request_id)
        seq_len = int(rng.integers(max(1, cfg.behavior_len // 2), cfg.behavior_len + 1))
        picks = rng.choice(self.user_history[user_id], size=seq_len, replace=True)
        ages = np.sort(rng.integers(0, 72, size=seq_len))
        behavior = [(int(a), int(self.ad_category[a]), int(g)) for a, g in zip(picks, ages)]
        return UserRequest(
            request_id=request_id,
            user_id=user_id,
            sim_time=sim_time,
            profile_features=(int(self.user_bucket[user_id]), int(self.user_segment[user_id])),
            context_features=(int(sim_time) % 24, int(rng.integers(0, 10))),
            behavior_sequence=behavior,
            latent_interest=self.user_latent[user_id],
        )

    def run_session(self, request: UserRequest, decay_budget: bool = True) -> SessionLog:
        """Teacher-score candidates; top-n exposed, next `ranked_pool_depth` ranked."""
        cfg = self.config
        n_imp = cfg.impressions_per_session
        if cfg.corpus_size < n_imp:
            raise ConfigError("corpus smaller than impressions_per_session")
        if cfg.candidate_sample and cfg.candidate_sample < cfg.corpus_size:
            rng = spawn_rng(cfg.seed, 3, request.request_id)
            cand = rng.choice(cfg.corpus_size, size=cfg.candidate_sample, replace=False)
        else:
            cand = np.arange(cfg.corpus_size)
        pctr, pbid, ecpm = self.teacher_ecpm_batch(request, cand)
        # descending eCPM, ad_id breaks ties, so sessions are reproducible
        order = np.lexsort((cand, -ecpm))
        depth = min(len(cand), n_imp + cfg.ranked_pool_depth)
        chosen = order[:depth]
        tl = time_left_ratio_at(request.sim_time)

        impressions = []
        for j in chosen[:n_imp]:
            a = int(cand[j])
            impressions.append(ImpressionRecord(
                ad_id=a,
                scores=TeacherScores(float(pctr[j]), float(pbid[j]), float(pctr[j] * pbid[j] * 1000.0)),
                budget_left_ratio=float(self.budget_left[a]),
                time_left_ratio=tl,
            ))
        ranked = []
        for pos, j in enumerate(chosen[n_imp:], start=1):
            a = int(cand[j])
            ranked.append(RankedRecord(
                ad_id=a,
                scores=TeacherScores(float(pctr[j]), float(pbid[j]), float(pctr[j] * pbid[j] * 1000.0)),
                rank=pos,
                budget_left_ratio=float(self.budget_left[a]),
                time_left_ratio=tl,
            ))
        if decay_budget:
            ids = [imp.ad_id for imp in impressions]
            self.budget_left[ids] = np.maximum(
                self.budget_left[ids] - cfg.budget_decay_per_impression, 0.0)
        return SessionLog(request=request, impressions=impressions, ranked=ranked)

    def gen_sessions(self) -> Iterator[SessionLog]:
        """The full seeded session stream, in time order, with budget dynamics."""
        cfg = self.config
        total = cfg.total_sessions
        rng = spawn_rng(cfg.seed, 4)
        times = np.sort(rng.uniform(0.0, cfg.duration_hours, size=total))
        users = rng.integers(0, cfg.num_users, size=total)
        for i in range(total):
            self.advance_to(times[i])
            request = self.make_request(i, int(users[i]), float(times[i]))
            yield self.run_session(request)

    # ----------------------------------------------------------------- events
    def apply_event(self, event: BidEvent) -> None:
        """Mutate live market state for one advertiser operation."""
        a = event.ad_id
        if not 0 <= a < self.config.corpus_size:
            raise InputError(f"unknown ad_id {a}")
        if event.op == EventOp.AddBudget:
            self.budget_left[a] = min(1.0, self.budget_left[a] + event.magnitude)
        elif event.op == EventOp.ReduceBudget:
            self.budget_left[a] = max(0.0, self.budget_left[a] - event.magnitude)
        elif event.op == EventOp.RelaxConstraint:
            self.constraint[a] = self.constraint[a] * (1.0 + event.magnitude)
        else:
            self.constraint[a] = self.constraint[a] / (1.0 + event.magnitude)

    # ------------------------------------------------------------- object views
    def ad(self, ad_id: int) -> Ad:
        if not 0 <= ad_id < self.config.corpus_size:
            raise InputError(f"unknown ad_id {ad_id}")
        return Ad(
            ad_id=ad_id,
            category_id=int(self.ad_category[ad_id]),
            brand_id=int(self.ad_brand[ad_id]),
            quality_hint=float(self.ad_quality_hint[ad_id]),
            bid=BidFeatures(
                bid_type=BidType(int(self.ad_bid_type[ad_id])),
                bid_constraint=float(self.constraint[ad_id]),
                budget_left_ratio=float(self.budget_left[ad_id]),
                time_left_ratio=1.0,
                default_bid_value=float(self.ad_abid[ad_id]),
            ),
            latent_quality=self.ad_latent[ad_id],
        )

    def ads_list(self) -> list[Ad]:
        return [self.ad(i) for i in range(self.config.corpus_size)]


def gen_corpus(config: MarketConfig) -> list[Ad]:
    """Generate the ad corpus; deterministic given config.seed."""
    if config.corpus_size == 0:
        raise ConfigError("corpus_size must be positive")
    return Market(config).ads_list()


def teacher_pbid(ad: Ad, sim_time: float | None = None,
                 gamma: float = 0.5, eps: float = 0.05) -> float:
    """Predicted bid for a standalone ad object (policy over its bid state)."""
    tl = ad.bid.time_left_ratio if sim_time is None else time_left_ratio_at(sim_time)
    pace = pacing_factor(ad.bid.budget_left_ratio, tl, gamma, eps)
    fac = constraint_factor(ad.bid.bid_constraint, int(ad.bid.bid_type))
    return float(ad.bid.default_bid_value * pace * fac)


def apply_bid_event(ad: Ad, event: BidEvent) -> Ad:
    """Pure per-ad event application; returns a new Ad, everything else unchanged."""
    if event.ad_id != ad.ad_id:
        raise InputError(f"event ad_id {event.ad_id} != ad {ad.ad_id}")
    bid = ad.bid
    if event.op == EventOp.AddBudget:
        bid = replace(bid, budget_left_ratio=min(1.0, bid.budget_left_ratio + event.magnitude))
    elif event.op == EventOp.ReduceBudget:
        bid = replace(bid, budget_left_ratio=max(0.0, bid.budget_left_ratio - event.magnitude))
    elif event.op == EventOp.RelaxConstraint:
        c = bid.bid_constraint * (1.0 + event.magnitude)
        bid = replace(bid, bid_constraint=c, bid_constraint_log1p=math.log1p(c))
    elif event.op == EventOp.TightenConstraint:
        c = bid.bid_constraint / (1.0 + event.magnitude)
        bid = replace(bid, bid_constraint=c, bid_constraint_log1p=math.log1p(c))
    return replace(ad, bid=bid)


def gen_event_stream(config: MarketConfig, start: float = 0.0,
                     duration_hours: float | None = None,
                     rate_per_hour: float | None = None,
                     seed_key: int = 5) -> list[BidEvent]:
    """Poisson stream of advertiser operations over the corpus."""
    rate = config.events_per_hour if rate_per_hour is None else rate_per_hour
    horizon = config.duration_hours if duration_hours is None else duration_hours
    if rate <= 0:
        return []
    rng = spawn_rng(config.seed, seed_key)
    events: list[BidEvent] = []
    t = start
    next_id = 1
    while True:
        t += rng.exponential(1.0 / rate)
        if t >= start + horizon:
            break
        op = EventOp(int(rng.integers(0, 4)))
        if op in (EventOp.AddBudget, EventOp.ReduceBudget):
            mag = float(rng.uniform(0.1, 0.5))
        else:
            mag = float(rng.uniform(0.3, 1.0))
        events.append(BidEvent(
            event_id=next_id,
            ad_id=int(rng.integers(0, config.corpus_size)),
            sim_time=float(t),
            op=op,
            magnitude=mag,
        ))
        next_id += 1
    return events


def positive_ops(events: Iterable[BidEvent]) -> list[BidEvent]:
    return [e for e in events if e.op in POSITIVE_OPS]


# ------------------------------------------------------------------ file I/O

def write_corpus(path: str | Path, market: Market) -> None:
    cfg = market.config
    cols = ("ad_id", "category_id", "brand_id", "quality_hint", "bid_type",
            "bid_constraint", "bid_constraint_log1p", "budget_left_ratio",
            "time_left_ratio", "default_bid_value", "latent_quality")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#schema={CORPUS_SCHEMA}\n")
        fh.write("\t".join(cols) + "\n")
        tl = fmt_float(1.0)
        for i in range(cfg.corpus_size):
            c = float(market.constraint[i])
            latent = ",".join(fmt_float(v) for v in market.ad_latent[i])
            fh.write("\t".join((
                str(i), str(int(market.ad_category[i])), str(int(market.ad_brand[i])),
                fmt_float(market.ad_quality_hint[i]), str(int(market.ad_bid_type[i])),
                fmt_float(c), fmt_float(math.log1p(c)),
                fmt_float(market.budget_left[i]), tl, fmt_float(market.ad_abid[i]),
                latent,
            )) + "\n")


def read_corpus_state(path: str | Path) -> dict[str, np.ndarray]:
    """Corpus columns back as arrays (latents included; oracle use only)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"#schema={CORPUS_SCHEMA}":
        raise InputError(f"{path}: not a corpus file")
    rows = [line.split("\t") for line in lines[2:] if line]
    n = len(rows)
    out = {
        "ad_id": np.array([int(r[0]) for r in rows]),
        "category_id": np.array([int(r[1]) for r in rows]),
        "brand_id": np.array([int(r[2]) for r in rows]),
        "quality_hint": np.array([float(r[3]) for r in rows]),
        "bid_type": np.array([int(r[4]) for r in rows]),
        "bid_constraint": np.array([float(r[5]) for r in rows]),
        "budget_left_ratio": np.array([float(r[7]) for r in rows]),
        "time_left_ratio": np.array([float(r[8]) for r in rows]),
        "default_bid_value": np.array([float(r[9]) for r in rows]),
    }
    if n and len(rows[0]) > 10:
        out["latent_quality"] = np.array([[float(v) for v in r[10].split(",")] for r in rows])
    return out


def _session_to_line(session: SessionLog) -> str:
    r = session.request
    behavior = ";".join(f"{a}:{c}:{g}" for a, c, g in r.behavior_sequence)
    parts = [
        str(r.request_id), str(r.user_id), fmt_float(r.sim_time),
        ",".join(str(v) for v in r.profile_features),
        ",".join(str(v) for v in r.context_features),
        behavior,
    ]
    for imp in session.impressions:
        s = imp.scores
        parts.append("|I|" + ":".join((
            str(imp.ad_id), fmt_float(s.pctr), fmt_float(s.pbid), fmt_float(s.ecpm),
            fmt_float(imp.budget_left_ratio), fmt_float(imp.time_left_ratio))))
    for rk in session.ranked:
        s = rk.scores
        parts.append("|R|" + ":".join((
            str(rk.ad_id), fmt_float(s.pctr), fmt_float(s.pbid), fmt_float(s.ecpm),
            fmt_float(rk.budget_left_ratio), fmt_float(rk.time_left_ratio), str(rk.rank))))
    return "\t".join(parts)


def _session_from_line(line: str, market: Market | None = None) -> SessionLog:
    parts = line.rstrip("\n").split("\t")
    request_id, user_id = int(parts[0]), int(parts[1])
    sim_time = float(parts[2])
    prof = tuple(int(v) for v in parts[3].split(","))
    ctx = tuple(int(v) for v in parts[4].split(","))
    behavior = []
    if parts[5]:
        for item in parts[5].split(";"):
            a, c, g = item.split(":")
            behavior.append((int(a), int(c), int(g)))
    latent = market.user_latent[user_id] if market is not None else np.zeros(0)
    request = UserRequest(request_id, user_id, sim_time, prof, ctx, behavior, latent)
    impressions, ranked = [], []
    for chunk in parts[6:]:
        if chunk.startswith("|I|"):
            a, pctr, pbid, ecpm, bud, tl = chunk[3:].split(":")
            impressions.append(ImpressionRecord(
                int(a), TeacherScores(float(pctr), float(pbid), float(ecpm)),
                float(bud), float(tl)))
        elif chunk.startswith("|R|"):
            a, pctr, pbid, ecpm, bud, tl, rank = chunk[3:].split(":")
            ranked.append(RankedRecord(
                int(a), TeacherScores(float(pctr), float(pbid), float(ecpm)),
                int(rank), float(bud), float(tl)))
    return SessionLog(request, impressions, ranked)


def write_sessions(path: str | Path, sessions: Iterable[SessionLog]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#schema={SESSIONS_SCHEMA}\n")
        for session in sessions:
            fh.write(_session_to_line(session) + "\n")
            count += 1
    return count


def read_sessions(path: str | Path, market: Market | None = None) -> Iterator[SessionLog]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != f"#schema={SESSIONS_SCHEMA}":
            raise InputError(f"{path}: not a session log")
        for line in fh:
            if line.strip():
                yield _session_from_line(line, market)


def write_events(path: str | Path, events: Iterable[BidEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#schema={EVENTS_SCHEMA}\n")
        for e in events:
            fh.write("\t".join((str(e.event_id), str(e.ad_id), fmt_float(e.sim_time),
                                e.op.name, fmt_float(e.magnitude))) + "\n")


def read_events(path: str | Path) -> list[BidEvent]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"#schema={EVENTS_SCHEMA}":
        raise InputError(f"{path}: not an event stream")
    out = []
    for line in lines[1:]:
        if not line:
            continue
        eid, ad, t, op, mag = line.split("\t")
        out.append(BidEvent(int(eid), int(ad), float(t), EventOp[op], float(mag)))
    return out
