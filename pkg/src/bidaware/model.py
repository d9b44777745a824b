"""The retrieval scoring network.

Two variants share the ad tower (a three-layer MLP over embedded ad
features producing the index vector z_a):

* mbr -- user MLP + sequence cross-attention fused with z_a, scored either
  by three attentive task heads (eCPM / pCTR / pBid) or by three plain
  MLP heads when `tar_enabled` is off.
* ebr -- self-attentive sequence towers, one per task, each scored by an
  inner product with z_a.

Scoring is always the composition user_side(request, z_a) with
z_a = ad_side(ad): the same code runs during training (gradients tracked)
and serving (plain arrays), so the deployed split is exact by construction.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigError, InputError, InvariantError
from .features import FeatureSpace, RequestFeatures
from .util import sha256_bytes

CHECKPOINT_MAGIC = b"BAWCKPT1"


@dataclass
class ModelConfig:
    embed_dim: int = 16
    user_dim: int = 128
    ad_dim: int = 16
    seq_dim: int = 16
    attn_dim: int = 16
    user_hidden: int = 128
    ad_hidden: tuple[int, int] = (64, 32)
    head_hidden: int = 64
    bid_slots: int = 4
    variant: str = "mbr"  # "mbr" | "ebr"
    tar_enabled: bool = True
    bid_features_enabled: bool = True
    leaky_slope: float = 0.1

    def __post_init__(self):
        dims = (self.embed_dim, self.user_dim, self.ad_dim, self.seq_dim,
                self.attn_dim, self.user_hidden, self.head_hidden, self.bid_slots)
        if any(d <= 0 for d in dims):
            raise ConfigError("all model dims must be positive")
        if self.variant not in ("mbr", "ebr"):
            raise ConfigError(f"unknown variant {self.variant!r}")

    @property
    def fused_dim(self) -> int:
        return self.user_dim + self.seq_dim + self.ad_dim

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim, "user_dim": self.user_dim,
            "ad_dim": self.ad_dim, "seq_dim": self.seq_dim,
            "attn_dim": self.attn_dim, "user_hidden": self.user_hidden,
            "ad_hidden": list(self.ad_hidden), "head_hidden": self.head_hidden,
            "bid_slots": self.bid_slots, "variant": self.variant,
            "tar_enabled": self.tar_enabled,
            "bid_features_enabled": self.bid_features_enabled,
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["ad_hidden"] = tuple(d.get("ad_hidden", (64, 32)))
        return cls(**d)


@dataclass
class AdEmbedding:
    ad_id: int
    vector: np.ndarray
    version: int = 0


class Params:
    """Named parameter blocks; embedding tables accumulate sparse row grads."""

    def __init__(self, blocks: dict[str, Node]):
        self.blocks = blocks
        self.version = 0

    def __getitem__(self, name: str) -> Node:
        return self.blocks[name]

    def raw(self) -> dict[str, np.ndarray]:
        return {k: n.value for k, n in self.blocks.items()}

    def zero_grad(self) -> None:
        for node in self.blocks.values():
            node.zero_grad()

    def check_finite(self) -> None:
        for name, node in self.blocks.items():
            if not np.all(np.isfinite(node.value)):
                raise InvariantError(f"non-finite values in block {name}")

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: n.value.copy() for k, n in self.blocks.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self.blocks:
                raise InputError(f"unknown parameter block {name}")
            if self.blocks[name].value.shape != arr.shape:
                raise InputError(f"shape mismatch for block {name}")
            self.blocks[name].value[...] = arr
        self.version += 1


@dataclass
class ForwardTrace:
    """Handle for running the reverse pass of one forward computation."""

    params: Params
    version: int
    outputs: dict = field(default_factory=dict)

    def backward(self, root: Node, seed_grad=None) -> None:
        if self.version != self.params.version:
            raise InvariantError("stale trace: parameters changed since forward")
        ad.backward(root, seed_grad)

    def dense_grads(self) -> dict[str, np.ndarray]:
        return {name: node.dense_grad() for name, node in self.params.blocks.items()}


@dataclass
class RequestContext:
    """Per-request tensors shared by every candidate scored against it."""

    z_u: object = None          # (1, user_dim)
    k_seq: object = None        # (L, attn)
    v_seq: object = None        # (L, seq_dim)
    k_ctr: object = None        # (L, attn)
    v_ctr: object = None        # (L, attn)
    mask: np.ndarray = None     # (L,) bool
    empty: float = 0.0          # 1.0 when the behaviour sequence is empty
    users: dict = None          # ebr: task -> (1, ad_dim)


def _he(rng, fan_in, shape):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class RetrievalModel:
    """Parameters + forward passes for one configured variant."""

    def __init__(self, config: ModelConfig, space: FeatureSpace, seed: int = 0,
                 params: Params | None = None):
        self.config = config
        self.space = space
        self.params = params if params is not None else self._init_params(seed)

    # ---------------------------------------------------------------- params
    def _block_shapes(self) -> dict[str, tuple]:
        cfg, sp = self.config, self.space
        D, A = cfg.embed_dim, cfg.attn_dim
        F = cfg.fused_dim
        HH = cfg.head_hidden
        ad_in = 9 * D if cfg.bid_features_enabled else 4 * D
        h1, h2 = cfg.ad_hidden
        shapes = {
            # ad tower and its feature tables (one reserved out-of-vocab row each)
            "ad.emb_ad_id": (sp.num_ads + 1, D),
            "ad.emb_category": (sp.num_categories + 1, D),
            "ad.emb_brand": (sp.num_brands + 1, D),
            "ad.emb_quality": (33, D),
            "ad.emb_bid_type": (4, D),
            "ad.emb_constraint": (33, D),
            "ad.emb_budget": (33, D),
            "ad.emb_time": (33, D),
            "ad.emb_abid": (33, D),
            "ad.mlp_w1": (ad_in, h1), "ad.mlp_b1": (h1,),
            "ad.mlp_w2": (h1, h2), "ad.mlp_b2": (h2,),
            "ad.mlp_w3": (h2, cfg.ad_dim), "ad.mlp_b3": (cfg.ad_dim,),
            # user-side sequence tables (independent of the ad tower's)
            "user.emb_seq_ad": (sp.num_ads + 1, D),
            "user.emb_seq_cat": (sp.num_categories + 1, D),
            "user.emb_age": (33, D),
        }
        if cfg.variant == "mbr":
            shapes.update({
                "user.emb_bucket": (sp.user_bucket_vocab + 1, D),
                "user.emb_segment": (sp.num_segments + 1, D),
                "user.emb_hour": (25, D),
                "user.emb_slot": (11, D),
                "user.mlp_w1": (5 * D, cfg.user_hidden), "user.mlp_b1": (cfg.user_hidden,),
                "user.mlp_w2": (cfg.user_hidden, cfg.user_dim), "user.mlp_b2": (cfg.user_dim,),
                "user.attn_wq": (cfg.ad_dim, A), "user.attn_bq": (A,),
                "user.attn_wk": (D, A), "user.attn_wv": (D, cfg.seq_dim),
                "user.seq_default": (1, cfg.seq_dim),
            })
            if cfg.tar_enabled:
                shapes.update({
                    "user.ctr_wq": (F, A), "user.ctr_bq": (A,),
                    "user.ctr_wk": (D, A), "user.ctr_wv": (D, A),
                    "user.ctr_default": (1, A),
                    "user.ctr_w1": (A, HH), "user.ctr_b1": (HH,),
                    "user.ctr_w2": (HH, 1), "user.ctr_b2": (1,),
                    "user.bid_wq": (F, A), "user.bid_bq": (A,),
                    "user.bid_wk": (cfg.ad_dim, cfg.bid_slots * A), "user.bid_bk": (cfg.bid_slots * A,),
                    "user.bid_wv": (cfg.ad_dim, cfg.bid_slots * A), "user.bid_bv": (cfg.bid_slots * A,),
                    "user.bid_w1": (A, HH), "user.bid_b1": (HH,),
                    "user.bid_w2": (HH, 1), "user.bid_b2": (1,),
                    "user.ecpm_wz": (F, A), "user.ecpm_bz": (A,),
                    "user.ecpm_w1": (2 * HH + A, HH), "user.ecpm_b1": (HH,),
                    "user.ecpm_w2": (HH, 1), "user.ecpm_b2": (1,),
                })
            else:
                for task in ("ctr", "bid", "ecpm"):
                    shapes.update({
                        f"user.b{task}_w1": (F, HH), f"user.b{task}_b1": (HH,),
                        f"user.b{task}_w2": (HH, 1), f"user.b{task}_b2": (1,),
                    })
        else:  # ebr
            shapes["user.pos_emb"] = (sp.seq_len, D)
            for task in ("ecpm", "ctr", "bid"):
                shapes.update({
                    f"user.{task}_wq": (D, A), f"user.{task}_wk": (D, A),
                    f"user.{task}_wv": (D, D),
                    f"user.{task}_wo": (D, cfg.ad_dim), f"user.{task}_bo": (cfg.ad_dim,),
                    f"user.{task}_default": (1, cfg.ad_dim),
                })
        return shapes

    def _init_params(self, seed: int) -> Params:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(200,)))
        blocks: dict[str, Node] = {}
        for name, shape in sorted(self._block_shapes().items()):
            sparse = ".emb_" in name
            if sparse or name.endswith("_default") or name.endswith("pos_emb"):
                value = rng.normal(0.0, 0.05, size=shape)
            elif name.endswith(("_b1", "_b2", "_b3", "_bq", "_bk", "_bv", "_bz", "_bo")):
                value = np.zeros(shape)
            else:
                value = _he(rng, shape[0], shape)
            blocks[name] = Node.param(value, name=name, sparse=sparse)
        return Params(blocks)

    def _p(self, train: bool):
        return self.params.blocks if train else self.params.raw()

    def begin_trace(self) -> ForwardTrace:
        return ForwardTrace(self.params, self.params.version)

    # ---------------------------------------------------------- embeddings
    def _emb(self, P, name: str, ids: np.ndarray):
        """Table lookup with out-of-range ids sent to the reserved last row."""
        table = P[name]
        vocab = (table.value if isinstance(table, Node) else table).shape[0] - 1
        ids = np.asarray(ids, dtype=np.int64)
        safe = np.where((ids >= 0) & (ids < vocab), ids, vocab)
        return ad.gather(table, safe)

    def embed_feature(self, name: str, ids) -> np.ndarray:
        """Public lookup helper (inference): categorical/bucketized ids -> vectors."""
        return self._emb(self.params.raw(), name, np.asarray(ids))

    # ------------------------------------------------------------ ad tower
    def ad_network(self, ad_matrix: np.ndarray, train: bool = False):
        """(N, 9) integer ad features -> (N, ad_dim) index vectors."""
        P = self._p(train)
        cfg = self.config
        cols = [
            self._emb(P, "ad.emb_ad_id", ad_matrix[:, 0]),
            self._emb(P, "ad.emb_category", ad_matrix[:, 1]),
            self._emb(P, "ad.emb_brand", ad_matrix[:, 2]),
            self._emb(P, "ad.emb_quality", ad_matrix[:, 3]),
        ]
        if cfg.bid_features_enabled:
            cols += [
                self._emb(P, "ad.emb_bid_type", ad_matrix[:, 4]),
                self._emb(P, "ad.emb_constraint", ad_matrix[:, 5]),
                self._emb(P, "ad.emb_budget", ad_matrix[:, 6]),
                self._emb(P, "ad.emb_time", ad_matrix[:, 7]),
                self._emb(P, "ad.emb_abid", ad_matrix[:, 8]),
            ]
        x = ad.concat(cols, axis=1)
        s = cfg.leaky_slope
        h = ad.leaky_relu(ad.add(ad.matmul(x, P["ad.mlp_w1"]), P["ad.mlp_b1"]), s)
        h = ad.leaky_relu(ad.add(ad.matmul(h, P["ad.mlp_w2"]), P["ad.mlp_b2"]), s)
        return ad.add(ad.matmul(h, P["ad.mlp_w3"]), P["ad.mlp_b3"])

    def ad_embedding(self, ad_id: int, ad_matrix_row: np.ndarray, version: int = 0) -> AdEmbedding:
        z = self.ad_network(ad_matrix_row.reshape(1, -1), train=False)
        return AdEmbedding(ad_id=ad_id, vector=z[0].copy(), version=version)

    # --------------------------------------------------------- request side
    def _seq_items(self, P, req: RequestFeatures):
        e = ad.add(
            ad.add(self._emb(P, "user.emb_seq_ad", req.seq_ad),
                   self._emb(P, "user.emb_seq_cat", req.seq_cat)),
            self._emb(P, "user.emb_age", req.seq_age_b),
        )
        return e  # (L, D)

    def request_context(self, req: RequestFeatures, train: bool = False) -> RequestContext:
        P = self._p(train)
        cfg = self.config
        if cfg.variant == "ebr":
            return self._ebr_context(P, req)
        s = cfg.leaky_slope
        e = self._seq_items(P, req)
        maskf = req.seq_mask.astype(float).reshape(1, -1)
        count = float(req.seq_mask.sum())
        empty = 1.0 if count == 0 else 0.0
        pool = ad.scale(ad.matmul(maskf, e), 1.0 / max(count, 1.0))  # (1, D)
        prof = [
            self._emb(P, "user.emb_bucket", req.prof[:1]),
            self._emb(P, "user.emb_segment", req.prof[1:2]),
            self._emb(P, "user.emb_hour", req.ctx[:1]),
            self._emb(P, "user.emb_slot", req.ctx[1:2]),
        ]
        x = ad.concat(prof + [pool], axis=1)  # (1, 5D)
        h = ad.leaky_relu(ad.add(ad.matmul(x, P["user.mlp_w1"]), P["user.mlp_b1"]), s)
        z_u = ad.add(ad.matmul(h, P["user.mlp_w2"]), P["user.mlp_b2"])
        ctx = RequestContext(
            z_u=z_u,
            k_seq=ad.matmul(e, P["user.attn_wk"]),
            v_seq=ad.matmul(e, P["user.attn_wv"]),
            mask=req.seq_mask,
            empty=empty,
        )
        if cfg.tar_enabled:
            ctx.k_ctr = ad.matmul(e, P["user.ctr_wk"])
            ctx.v_ctr = ad.matmul(e, P["user.ctr_wv"])
        return ctx

    def _attend(self, q, keys, values, mask, empty, default, scale_dim):
        scores = ad.scale(ad.matmul_t(q, keys), 1.0 / math.sqrt(scale_dim))  # (N, L)
        n = scores.value.shape[0] if isinstance(scores, Node) else scores.shape[0]
        weights = ad.masked_softmax(scores, np.broadcast_to(mask, (n, mask.shape[-1])))
        mixed = ad.matmul(weights, values)  # all-masked rows mix to zero
        if empty > 0.0:
            mixed = ad.add(mixed, ad.tile_rows(default, n))
        return mixed, weights

    def score_candidates(self, ctx: RequestContext, z_a, train: bool = False):
        """Score N candidates (rows of z_a) for one request.

        Returns (f_ecpm, f_pctr, f_pbid), each of shape (N,).
        """
        if self.config.variant == "ebr":
            return self._ebr_score(ctx, z_a, train)
        P = self._p(train)
        cfg = self.config
        s = cfg.leaky_slope
        n = z_a.value.shape[0] if isinstance(z_a, Node) else z_a.shape[0]

        q = ad.add(ad.matmul(z_a, P["user.attn_wq"]), P["user.attn_bq"])
        z_seq, _ = self._attend(q, ctx.k_seq, ctx.v_seq, ctx.mask, ctx.empty,
                                P["user.seq_default"], cfg.attn_dim)
        z_ua = ad.concat([ad.tile_rows(ctx.z_u, n), z_seq, z_a], axis=1)

        if cfg.tar_enabled:
            qc = ad.add(ad.matmul(z_ua, P["user.ctr_wq"]), P["user.ctr_bq"])
            h_c, _ = self._attend(qc, ctx.k_ctr, ctx.v_ctr, ctx.mask, ctx.empty,
                                  P["user.ctr_default"], cfg.attn_dim)
            pen_c = ad.leaky_relu(ad.add(ad.matmul(h_c, P["user.ctr_w1"]), P["user.ctr_b1"]), s)
            f_pctr = ad.sigmoid(ad.add(ad.matmul(pen_c, P["user.ctr_w2"]), P["user.ctr_b2"]))

            kb = ad.reshape(ad.add(ad.matmul(z_a, P["user.bid_wk"]), P["user.bid_bk"]),
                            (n, cfg.bid_slots, cfg.attn_dim))
            vb = ad.reshape(ad.add(ad.matmul(z_a, P["user.bid_wv"]), P["user.bid_bv"]),
                            (n, cfg.bid_slots, cfg.attn_dim))
            qb = ad.add(ad.matmul(z_ua, P["user.bid_wq"]), P["user.bid_bq"])
            sb = ad.scale(ad.qk_scores(qb, kb), 1.0 / math.sqrt(cfg.attn_dim))
            wb = ad.masked_softmax(sb, np.ones((n, cfg.bid_slots), dtype=bool))
            h_b = ad.attn_mix(wb, vb)
            pen_b = ad.leaky_relu(ad.add(ad.matmul(h_b, P["user.bid_w1"]), P["user.bid_b1"]), s)
            f_pbid = ad.softplus(ad.add(ad.matmul(pen_b, P["user.bid_w2"]), P["user.bid_b2"]))

            ze = ad.add(ad.matmul(z_ua, P["user.ecpm_wz"]), P["user.ecpm_bz"])
            he = ad.concat([pen_c, pen_b, ze], axis=1)
            he = ad.leaky_relu(ad.add(ad.matmul(he, P["user.ecpm_w1"]), P["user.ecpm_b1"]), s)
            f_ecpm = ad.add(ad.matmul(he, P["user.ecpm_w2"]), P["user.ecpm_b2"])
        else:
            def head(task):
                pen = ad.leaky_relu(
                    ad.add(ad.matmul(z_ua, P[f"user.b{task}_w1"]), P[f"user.b{task}_b1"]), s)
                return ad.add(ad.matmul(pen, P[f"user.b{task}_w2"]), P[f"user.b{task}_b2"])

            f_pctr = ad.sigmoid(head("ctr"))
            f_pbid = ad.softplus(head("bid"))
            f_ecpm = head("ecpm")

        flat = (n,)
        return (ad.reshape(f_ecpm, flat), ad.reshape(f_pctr, flat), ad.reshape(f_pbid, flat))

    # ----------------------------------------------------------------- ebr
    def _ebr_context(self, P, req: RequestFeatures) -> RequestContext:
        cfg = self.config
        e = ad.add(self._seq_items(P, req), P["user.pos_emb"])  # (L, D)
        mask = req.seq_mask
        count = float(mask.sum())
        empty = 1.0 if count == 0 else 0.0
        maskf = mask.astype(float).reshape(1, -1)
        users = {}
        for task in ("ecpm", "ctr", "bid"):
            q = ad.matmul(e, P[f"user.{task}_wq"])
            k = ad.matmul(e, P[f"user.{task}_wk"])
            v = ad.matmul(e, P[f"user.{task}_wv"])
            scores = ad.scale(ad.matmul_t(q, k), 1.0 / math.sqrt(cfg.attn_dim))
            weights = ad.masked_softmax(scores, np.broadcast_to(mask, scores.value.shape
                                                                if isinstance(scores, Node) else scores.shape))
            h = ad.add(ad.matmul(weights, v), e)  # residual
            pooled = ad.scale(ad.matmul(maskf, h), 1.0 / max(count, 1.0))  # (1, D)
            u = ad.add(ad.matmul(pooled, P[f"user.{task}_wo"]), P[f"user.{task}_bo"])
            if empty > 0.0:
                u = P[f"user.{task}_default"]
            users[task] = u
        return RequestContext(mask=mask, empty=empty, users=users)

    def _ebr_score(self, ctx: RequestContext, z_a, train: bool):
        n = z_a.value.shape[0] if isinstance(z_a, Node) else z_a.shape[0]
        flat = (n,)
        f_ecpm = ad.reshape(ad.matmul_t(z_a, ctx.users["ecpm"]), flat)
        f_pctr = ad.sigmoid(ad.reshape(ad.matmul_t(z_a, ctx.users["ctr"]), flat))
        f_pbid = ad.softplus(ad.reshape(ad.matmul_t(z_a, ctx.users["bid"]), flat))
        return f_ecpm, f_pctr, f_pbid

    # --------------------------------------------------------------- fusing
    @staticmethod
    def fuse(z_u, z_seq, z_a):
        """Concatenate the three towers; dims must match the config."""
        parts = [np.atleast_2d(np.asarray(p)) for p in (z_u, z_seq, z_a)]
        rows = {p.shape[0] for p in parts}
        if len(rows) != 1:
            raise InputError("fuse: mismatched row counts")
        return np.concatenate(parts, axis=1)

    # ------------------------------------------------------------ the split
    def split_graphs(self) -> tuple["UserSideGraph", "AdSideGraph"]:
        return UserSideGraph(self), AdSideGraph(self)

    def ad_side_block_names(self) -> list[str]:
        return sorted(n for n in self.params.blocks if n.startswith("ad."))

    def user_side_block_names(self) -> list[str]:
        return sorted(n for n in self.params.blocks if n.startswith("user."))


class AdSideGraph:
    """Exactly the ad tower and its tables; input ads, output index vectors."""

    def __init__(self, model: RetrievalModel):
        self._model = model
        self.block_names = model.ad_side_block_names()

    def embed(self, ad_matrix: np.ndarray) -> np.ndarray:
        return self._model.ad_network(ad_matrix, train=False)


class UserSideGraph:
    """Everything but the ad tower; consumes z_a vectors as the ad input."""

    def __init__(self, model: RetrievalModel):
        self._model = model
        self.block_names = model.user_side_block_names()

    def context(self, req: RequestFeatures) -> RequestContext:
        return self._model.request_context(req, train=False)

    def score(self, ctx: RequestContext, z_a: np.ndarray):
        return self._model.score_candidates(ctx, z_a, train=False)


# ------------------------------------------------------------------- flops

def mlp_flops(dims: tuple[int, ...]) -> int:
    """Multiply-accumulate count of a dense chain d0->d1->...->dk."""
    return sum(a * b for a, b in zip(dims[:-1], dims[1:]))


def estimate_flops(config: ModelConfig, space: FeatureSpace) -> int:
    """Analytic MAC count of scoring one (request, ad) pair end to end."""
    D, A = config.embed_dim, config.attn_dim
    L = space.seq_len
    F = config.fused_dim
    HH = config.head_hidden
    ad_in = 9 * D if config.bid_features_enabled else 4 * D
    h1, h2 = config.ad_hidden
    total = mlp_flops((ad_in, h1, h2, config.ad_dim))
    if config.variant == "ebr":
        for _task in ("ecpm", "ctr", "bid"):
            total += 3 * L * D * max(A, D)       # q, k, v projections
            total += L * L * A + L * L * D       # attention scores + mix
            total += L * D * config.ad_dim       # output projection
            total += config.ad_dim               # the dot product
        return total
    total += mlp_flops((5 * D, config.user_hidden, config.user_dim))
    total += L * D * A + L * D * config.seq_dim          # seq key/value projections
    total += config.ad_dim * A + L * A + L * config.seq_dim  # query, scores, mix
    if config.tar_enabled:
        total += L * D * A + L * D * A                   # ctr-head key/value projections
        total += F * A + L * A + L * A                   # ctr query, scores, mix
        total += mlp_flops((A, HH, 1))
        total += 2 * config.ad_dim * config.bid_slots * A  # bid-head views of z_a
        total += F * A + config.bid_slots * A + config.bid_slots * A
        total += mlp_flops((A, HH, 1))
        total += F * A + mlp_flops((2 * HH + A, HH, 1))  # ecpm head
    else:
        total += 3 * mlp_flops((F, HH, 1))
    return total


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, model: RetrievalModel, extra: dict | None = None) -> None:
    """Named-block container: magic, json header, float64 blocks, sha256 tail."""
    names = sorted(model.params.blocks)
    header = {
        "model": model.config.to_dict(),
        "space": model.space.to_header(),
        "blocks": [[n, list(model.params.blocks[n].value.shape)] for n in names],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<Q", len(hbytes))
    payload += hbytes
    for n in names:
        payload += np.ascontiguousarray(model.params.blocks[n].value, dtype=np.float64).tobytes()
    digest = bytes.fromhex(sha256_bytes(bytes(payload)))
    Path(path).write_bytes(bytes(payload) + digest)


def load_checkpoint(path: str | Path) -> tuple[RetrievalModel, dict]:
    blob = Path(path).read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 + 32 or blob[:8] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if bytes.fromhex(sha256_bytes(body)) != digest:
        raise InputError(f"{path}: checkpoint checksum mismatch")
    hlen = struct.unpack("<Q", body[8:16])[0]
    header = json.loads(body[16:16 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["model"])
    space = FeatureSpace.from_header(header["space"])
    model = RetrievalModel(config, space, seed=0)
    offset = 16 + hlen
    for name, shape in header["blocks"]:
        shape = tuple(shape)
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(body[offset:offset + size], dtype=np.float64).reshape(shape)
        offset += size
        if name not in model.params.blocks:
            raise InputError(f"{path}: unexpected block {name}")
        if model.params.blocks[name].value.shape != shape:
            raise InputError(f"{path}: block {name} has shape {shape}, "
                             f"config expects {model.params.blocks[name].value.shape}")
        model.params.blocks[name].value[...] = arr
    return model, header["extra"]
