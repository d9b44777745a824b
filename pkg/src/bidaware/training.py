"""Losses, optimizer, and the epoch loop.

Three loss streams share one forward pass per batch of sessions:

* ranking loss over (positive, negative) pairs of the eCPM score,
* bid-monotonicity loss over (original, perturbed) score pairs with a
  +/-1 direction indicator,
* distillation of the teacher's pCTR and bid-normalized pBid into the
  auxiliary heads.

Batches are whole sessions, so the request context is computed once and
every logged ad is scored once per epoch regardless of pair fan-out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .dataset import TrainingSet
from .errors import InputError, InvariantError
from .features import CorpusState, request_features_from_arrays
from .model import ForwardTrace, Params, RetrievalModel
from .util import fmt_float

logger = logging.getLogger(__name__)

LOSSCURVE_SCHEMA = "bidaware-losscurve-v1"


@dataclass
class TrainConfig:
    lambda1: float = 0.5
    lambda2: float = 1.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 256  # in pairs; sessions are grouped to approximate it
    epochs: int = 1
    seed: int = 0
    disable_bao: bool = False
    disable_dao: bool = False
    disable_bf: bool = False
    disable_tar: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvariantError("lambda weights must be nonnegative")
        if self.epochs < 1:
            raise InvariantError("epochs must be >= 1")


@dataclass
class LossReport:
    step: int
    l_ltr: float
    l_bao: float
    l_pctr: float
    l_pbid: float
    l_total: float
    skipped_abid_count: int = 0

    def check_identity(self, lambda1: float, lambda2: float) -> None:
        expect = self.l_ltr + lambda1 * self.l_bao + lambda2 * (self.l_pctr + self.l_pbid)
        if abs(self.l_total - expect) > 1e-9 * max(1.0, abs(expect)):
            raise InvariantError("loss report does not reconstruct from components")


def _check_finite(name, value):
    arr = value.value if isinstance(value, Node) else np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name}: non-finite input")


def loss_ltr(score_pos, score_neg):
    """Mean log(1 + exp(-(pos - neg))) over the pair batch."""
    _check_finite("loss_ltr(pos)", score_pos)
    _check_finite("loss_ltr(neg)", score_neg)
    return ad.mean(ad.logistic_log1pexp(ad.sub(score_pos, score_neg)))


def loss_bao(score_orig, score_pert, indicator):
    """Mean log(1 + exp(-I * (perturbed - original)))."""
    ind = np.asarray(indicator, dtype=float)
    if not np.all(np.isin(ind, (1.0, -1.0))):
        raise InputError("indicator values must be +1 or -1")
    _check_finite("loss_bao(orig)", score_orig)
    _check_finite("loss_bao(pert)", score_pert)
    return ad.mean(ad.logistic_log1pexp(ad.mul(ad.sub(score_pert, score_orig), ind)))


def loss_dao(f_pctr, f_pbid, teacher_pctr, teacher_pbid, abid):
    """Squared-error distillation; pBid target is normalized by aBid.

    Samples with non-positive aBid are skipped and counted.
    Returns (l_pctr, l_pbid, skipped_count).
    """
    _check_finite("loss_dao(f_pctr)", f_pctr)
    _check_finite("loss_dao(f_pbid)", f_pbid)
    abid = np.asarray(abid, dtype=float)
    tp = np.asarray(teacher_pctr, dtype=float)
    tb = np.asarray(teacher_pbid, dtype=float)
    good = abid > 0
    skipped = int((~good).sum())
    if skipped:
        idx = np.flatnonzero(good)
        f_pctr = ad.gather_rows(f_pctr, idx) if isinstance(f_pctr, Node) else f_pctr[idx]
        f_pbid = ad.gather_rows(f_pbid, idx) if isinstance(f_pbid, Node) else f_pbid[idx]
        tp, tb, abid = tp[idx], tb[idx], abid[idx]
    l_pctr = ad.mean(ad.square(ad.sub(f_pctr, tp)))
    l_pbid = ad.mean(ad.square(ad.sub(f_pbid, tb / abid)))
    return l_pctr, l_pbid, skipped


def total_loss(l_ltr, l_bao, l_pctr, l_pbid, config: TrainConfig):
    """Weighted sum; ablated terms contribute nothing (and no gradient work)."""
    out = l_ltr
    if not config.disable_bao and l_bao is not None and config.lambda1 > 0:
        out = ad.add(out, ad.scale(l_bao, config.lambda1))
    if not config.disable_dao and l_pctr is not None and config.lambda2 > 0:
        out = ad.add(out, ad.scale(ad.add(l_pctr, l_pbid), config.lambda2))
    return out


class AdamW:
    """Decoupled weight decay + adaptive moments; embedding tables update
    only the rows touched by the batch (their moments stay put otherwise)."""

    def __init__(self, lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _state(self, name, shape):
        if name not in self._m:
            self._m[name] = np.zeros(shape)
            self._v[name] = np.zeros(shape)
        return self._m[name], self._v[name]

    def step(self, params: Params) -> bool:
        """Apply one update; returns False (step aborted) on non-finite grads."""
        updates = []
        for name, node in params.blocks.items():
            if node.sparse_grads:
                idx = np.concatenate([i.reshape(-1) for i, _ in node.sparse_grads])
                grads = np.concatenate([g.reshape(-1, node.value.shape[1])
                                        for _, g in node.sparse_grads])
                rows, inverse = np.unique(idx, return_inverse=True)
                summed = np.zeros((len(rows), node.value.shape[1]))
                np.add.at(summed, inverse, grads)
                if not np.all(np.isfinite(summed)):
                    logger.warning("aborting step: non-finite gradient in %s", name)
                    return False
                updates.append((name, node, rows, summed))
            elif node.grad is not None:
                if not np.all(np.isfinite(node.grad)):
                    logger.warning("aborting step: non-finite gradient in %s", name)
                    return False
                updates.append((name, node, None, node.grad))
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.b1 ** t
        bc2 = 1.0 - self.b2 ** t
        for name, node, rows, g in updates:
            m, v = self._state(name, node.value.shape)
            if rows is None:
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                if self.wd:
                    node.value -= self.lr * self.wd * node.value
                node.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            else:
                m[rows] = self.b1 * m[rows] + (1.0 - self.b1) * g
                v[rows] = self.b2 * v[rows] + (1.0 - self.b2) * g * g
                if self.wd:
                    node.value[rows] -= self.lr * self.wd * node.value[rows]
                node.value[rows] -= self.lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + self.eps)
        params.version += 1
        return True


@dataclass
class _BatchPlan:
    """Index bookkeeping for one batch of sessions."""

    sessions: np.ndarray
    ad_matrix: np.ndarray
    session_rows: list[tuple[int, int]]   # global candidate-row span per session
    pos_rows: np.ndarray
    neg_rows: np.ndarray
    entry_rows: np.ndarray
    pert_rows: np.ndarray
    entry_ids: np.ndarray                 # training-set entry indices, batch order


class Trainer:
    def __init__(self, model: RetrievalModel, corpus: CorpusState,
                 training_set: TrainingSet, config: TrainConfig):
        if training_set.num_pairs == 0:
            raise InputError("empty training set")
        self.model = model
        self.corpus = corpus
        self.ts = training_set
        self.config = config
        self.opt = AdamW(config.learning_rate, config.weight_decay)
        ts = training_set
        s = ts.num_sessions
        self._entry_lo = np.searchsorted(ts.entry_session, np.arange(s))
        self._entry_hi = np.searchsorted(ts.entry_session, np.arange(s), side="right")
        self._pair_lo = np.searchsorted(ts.pair_session, np.arange(s))
        self._pair_hi = np.searchsorted(ts.pair_session, np.arange(s), side="right")
        pairs_per = max(1, int(round(ts.num_pairs / s)))
        self.sessions_per_batch = max(1, int(round(config.batch_size / pairs_per)))

    # ------------------------------------------------------------- batching
    def _plan(self, sessions: np.ndarray) -> _BatchPlan:
        ts, corpus = self.ts, self.corpus
        ads, budgets, tls, constraints = [], [], [], []
        session_rows, pos_rows, neg_rows, entry_rows, pert_rows, entry_ids = [], [], [], [], [], []
        offset = 0
        for si in sessions:
            lo, hi = int(self._entry_lo[si]), int(self._entry_hi[si])
            plo, phi = int(self._pair_lo[si]), int(self._pair_hi[si])
            n_e = hi - lo
            e_ads = ts.entry_ad[lo:hi]
            e_con = corpus.constraint[e_ads]
            # candidate layout: [entries | perturbed entries | easy negatives]
            feat = ts.pert_feature[lo:hi]
            val = ts.pert_value[lo:hi]
            p_bud = np.where(feat == 0, val, ts.entry_budget[lo:hi])
            p_con = np.where(feat == 1, e_con * val, e_con)
            easy = ts.pair_neg_entry[plo:phi] < 0
            easy_ads = ts.pair_neg_ad[plo:phi][easy]
            n_k = len(easy_ads)
            ads.append(np.concatenate([e_ads, e_ads, easy_ads]))
            budgets.append(np.concatenate([ts.entry_budget[lo:hi], p_bud,
                                           corpus.budget_left[easy_ads]]))
            tl = np.full(n_e, 1.0) * ts.entry_time_left[lo:hi]
            tls.append(np.concatenate([tl, tl, np.full(n_k, ts.sess_time_left[si])]))
            constraints.append(np.concatenate([e_con, p_con, corpus.constraint[easy_ads]]))

            pos_local = ts.pair_pos_entry[plo:phi] - lo
            pos_rows.append(offset + pos_local)
            neg_local = np.where(
                easy,
                2 * n_e + np.cumsum(easy) - 1,
                ts.pair_neg_entry[plo:phi] - lo,
            )
            neg_rows.append(offset + neg_local)
            entry_rows.append(offset + np.arange(n_e))
            pert_rows.append(offset + n_e + np.arange(n_e))
            entry_ids.append(np.arange(lo, hi))
            session_rows.append((offset, offset + 2 * n_e + n_k))
            offset += 2 * n_e + n_k
        ad_matrix = corpus.ad_matrix(
            np.concatenate(ads), budget=np.concatenate(budgets),
            time_left=np.concatenate(tls), constraint=np.concatenate(constraints))
        return _BatchPlan(
            sessions=sessions, ad_matrix=ad_matrix, session_rows=session_rows,
            pos_rows=np.concatenate(pos_rows), neg_rows=np.concatenate(neg_rows),
            entry_rows=np.concatenate(entry_rows), pert_rows=np.concatenate(pert_rows),
            entry_ids=np.concatenate(entry_ids))

    def _request_features(self, si: int):
        ts = self.ts
        return request_features_from_arrays(
            ts.sess_prof[si], ts.sess_ctx[si], ts.sess_seq_ad[si],
            ts.sess_seq_cat[si], ts.sess_seq_age[si], ts.sess_seq_mask[si])

    def forward_batch(self, plan: _BatchPlan, train: bool = True):
        """Score every candidate row; returns (f_ecpm, f_pctr, f_pbid) over rows."""
        z_all = self.model.ad_network(plan.ad_matrix, train=train)
        fe_parts, fc_parts, fb_parts = [], [], []
        for si, (row_lo, row_hi) in zip(plan.sessions, plan.session_rows):
            ctx = self.model.request_context(self._request_features(int(si)), train=train)
            z_s = ad.gather_rows(z_all, np.arange(row_lo, row_hi))
            fe, fc, fb = self.model.score_candidates(ctx, z_s, train=train)
            fe_parts.append(fe)
            fc_parts.append(fc)
            fb_parts.append(fb)
        if len(fe_parts) == 1:
            return fe_parts[0], fc_parts[0], fb_parts[0]
        return (ad.concat(fe_parts, axis=0), ad.concat(fc_parts, axis=0),
                ad.concat(fb_parts, axis=0))

    def batch_loss(self, plan: _BatchPlan, train: bool = True):
        """All three loss streams on one shared forward pass."""
        cfg = self.config
        ts = self.ts
        f_ecpm, f_pctr, f_pbid = self.forward_batch(plan, train=train)
        l_ltr = loss_ltr(ad.gather_rows(f_ecpm, plan.pos_rows),
                         ad.gather_rows(f_ecpm, plan.neg_rows))
        l_bao = None
        if not cfg.disable_bao and cfg.lambda1 > 0:
            l_bao = loss_bao(ad.gather_rows(f_ecpm, plan.entry_rows),
                             ad.gather_rows(f_ecpm, plan.pert_rows),
                             ts.pert_indicator[plan.entry_ids])
        l_pctr = l_pbid = None
        skipped = 0
        if not cfg.disable_dao and cfg.lambda2 > 0:
            eids = plan.entry_ids
            abid = self.corpus.abid[ts.entry_ad[eids]]
            l_pctr, l_pbid, skipped = loss_dao(
                ad.gather_rows(f_pctr, plan.entry_rows),
                ad.gather_rows(f_pbid, plan.entry_rows),
                ts.entry_pctr[eids], ts.entry_pbid[eids], abid)
        l_total = total_loss(l_ltr, l_bao, l_pctr, l_pbid, cfg)
        return l_total, l_ltr, l_bao, l_pctr, l_pbid, skipped

    # ----------------------------------------------------------------- loop
    def run(self) -> list[LossReport]:
        cfg = self.config
        reports: list[LossReport] = []
        step = 0
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(20,)))
        for _epoch in range(cfg.epochs):
            order = rng.permutation(self.ts.num_sessions)
            for lo in range(0, len(order), self.sessions_per_batch):
                plan = self._plan(order[lo:lo + self.sessions_per_batch])
                trace = self.model.begin_trace()
                l_total, l_ltr, l_bao, l_pctr, l_pbid, skipped = self.batch_loss(plan)
                self.model.params.zero_grad()
                trace.backward(l_total)
                self.opt.step(self.model.params)
                step += 1
                report = LossReport(
                    step=step,
                    l_ltr=float(l_ltr.value),
                    l_bao=float(l_bao.value) if l_bao is not None else 0.0,
                    l_pctr=float(l_pctr.value) if l_pctr is not None else 0.0,
                    l_pbid=float(l_pbid.value) if l_pbid is not None else 0.0,
                    l_total=float(l_total.value),
                    skipped_abid_count=skipped,
                )
                lam1 = 0.0 if (cfg.disable_bao or l_bao is None) else cfg.lambda1
                lam2 = 0.0 if (cfg.disable_dao or l_pctr is None) else cfg.lambda2
                report.check_identity(lam1, lam2)
                reports.append(report)
        self.model.params.check_finite()
        return reports


def train(model: RetrievalModel, corpus: CorpusState, training_set: TrainingSet,
          config: TrainConfig) -> list[LossReport]:
    """Train in place; returns the per-batch loss curve."""
    return Trainer(model, corpus, training_set, config).run()


def write_loss_curve(path: str | Path, reports: Sequence[LossReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#schema={LOSSCURVE_SCHEMA}\n")
        fh.write("step\tl_ltr\tl_bao\tl_pctr\tl_pbid\tl_total\tskipped_abid_count\n")
        for r in reports:
            fh.write("\t".join((str(r.step), fmt_float(r.l_ltr), fmt_float(r.l_bao),
                                fmt_float(r.l_pctr), fmt_float(r.l_pbid),
                                fmt_float(r.l_total), str(r.skipped_abid_count))) + "\n")


def read_loss_curve(path: str | Path) -> list[LossReport]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"#schema={LOSSCURVE_SCHEMA}":
        raise InputError(f"{path}: not a loss curve file")
    out = []
    for line in lines[2:]:
        if line:
            step, a, b, c, d, e, skipped = line.split("\t")
            out.append(LossReport(int(step), float(a), float(b), float(c), float(d),
                                  float(e), int(skipped)))
    return out
