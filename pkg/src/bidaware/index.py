"""Dynamic hierarchical small-world index over ad vectors.

Supports model-scored top-k beam search, unlimited concurrent readers, and
atomic per-entry vector updates:

* Every entry's mutable state (vector, version, checksum, per-layer
  neighbor lists) lives in one immutable payload object that writers swap
  atomically, so a reader can never observe a torn vector or a vector and
  neighbor set from different versions of the same entry.
* Writers serialize per entry on that entry's mutex; an update touches only
  its own entry (outgoing edges re-linked, incoming edges left to their
  owners), so writer lock order is trivially deadlock-free.
* Updates are version-gated: replays and out-of-order deliveries are
  rejected with a code, which gives at-least-once delivery safety upstream.

The graph is built on inner product over the stored vectors; searches may
score traversal candidates with an arbitrary model scorer instead.
"""

from __future__ import annotations

import json
import math
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .model import AdEmbedding
from .util import hash_uniform, sha256_bytes

INDEX_MAGIC = b"BAWINDX1"
MAX_LEVEL = 12


@dataclass
class IndexParams:
    max_neighbors: int = 16          # per layer; layer 0 allows twice as many
    ef_construction: int = 100
    ef_search: int = 64
    level_multiplier: float | None = None  # default 1/ln(max_neighbors)
    seed: int = 0
    verify_checksums: bool = True

    def __post_init__(self):
        if self.max_neighbors < 2:
            raise ConfigError("max_neighbors must be >= 2")
        if self.level_multiplier is None:
            self.level_multiplier = 1.0 / math.log(self.max_neighbors)

    def to_dict(self) -> dict:
        return {"max_neighbors": self.max_neighbors, "ef_construction": self.ef_construction,
                "ef_search": self.ef_search, "level_multiplier": self.level_multiplier,
                "seed": self.seed, "verify_checksums": self.verify_checksums}


class TornReadError(RuntimeError):
    """A payload failed checksum validation; readers must never see this."""


class _Payload(NamedTuple):
    vector: np.ndarray             # read-only float64 copy
    version: int
    checksum: int
    neighbors: tuple[np.ndarray, ...]  # one id array per layer 0..level


def _checksum(vector: np.ndarray, version: int) -> int:
    return zlib.crc32(vector.tobytes()) ^ (version & 0xFFFFFFFF)


def _make_payload(vector: np.ndarray, version: int,
                  neighbors: tuple[np.ndarray, ...]) -> _Payload:
    vec = np.ascontiguousarray(vector, dtype=np.float64).copy()
    vec.setflags(write=False)
    return _Payload(vec, version, _checksum(vec, version), neighbors)


class _Entry:
    __slots__ = ("ad_id", "level", "payload", "lock")

    def __init__(self, ad_id: int, level: int, payload: _Payload):
        self.ad_id = ad_id
        self.level = level
        self.payload = payload
        self.lock = threading.Lock()  # exclusive writer; readers snapshot payloads


class InnerProductScorer:
    """query_context is the query vector itself."""

    @staticmethod
    def score_batch(query_context, vectors: np.ndarray) -> np.ndarray:
        return vectors @ np.asarray(query_context, dtype=float)


def _top(beam: list[tuple[float, int]], ef: int) -> list[tuple[float, int]]:
    beam.sort(key=lambda t: (-t[0], t[1]))
    return beam[:ef]


class DynamicIndex:
    """The live graph; see the module docstring for the concurrency model."""

    def __init__(self, dim: int, params: IndexParams | None = None):
        if dim <= 0:
            raise ConfigError("dim must be positive")
        self.dim = dim
        self.params = params or IndexParams()
        self._entries: dict[int, _Entry] = {}
        self._entry_point: int | None = None
        self._top_level: int = -1
        self._graph_lock = threading.Lock()   # membership + entry-point changes
        self._edition = 0                     # bumped by every write, for audits

    # ------------------------------------------------------------- plumbing
    def __len__(self) -> int:
        return len(self._entries)

    def ad_ids(self) -> list[int]:
        return list(self._entries.keys())

    def _level_for(self, ad_id: int) -> int:
        u = float(hash_uniform(self.params.seed, ad_id, 31))
        return min(MAX_LEVEL, int(-math.log(u) * self.params.level_multiplier))

    def _bound(self, layer: int) -> int:
        return self.params.max_neighbors * (2 if layer == 0 else 1)

    def _snapshot(self, ad_id: int) -> _Payload:
        payload = self._entries[ad_id].payload
        if self.params.verify_checksums and _checksum(payload.vector, payload.version) != payload.checksum:
            raise TornReadError(f"checksum mismatch on ad {ad_id}")
        return payload

    def read_entry(self, ad_id: int) -> tuple[np.ndarray, int]:
        """Validated (vector, version) snapshot of one entry."""
        if ad_id not in self._entries:
            raise InputError(f"unknown ad_id {ad_id}")
        payload = self._snapshot(ad_id)
        return payload.vector, payload.version

    def version_vector(self) -> dict[int, int]:
        return {a: e.payload.version for a, e in self._entries.items()}

    @property
    def edition(self) -> int:
        return self._edition

    # -------------------------------------------------------------- search
    def _search_layer(self, ctx, scorer, seeds: list[tuple[float, int]], layer: int,
                      ef: int, cache: dict[int, _Payload]) -> list[tuple[float, int]]:
        """Round-based beam search on one layer; returns (score, id) descending."""
        beam = _top(list(seeds), ef)
        visited = {aid for _, aid in beam}
        expanded: set[int] = set()
        while True:
            frontier = [aid for _, aid in beam if aid not in expanded]
            if not frontier:
                return beam
            expanded.update(frontier)
            fresh: list[int] = []
            for aid in frontier:
                payload = cache.get(aid)
                if payload is None:
                    payload = self._snapshot(aid)
                    cache[aid] = payload
                if layer <= len(payload.neighbors) - 1:
                    for n in payload.neighbors[layer]:
                        n = int(n)
                        if n not in visited and n in self._entries:
                            visited.add(n)
                            fresh.append(n)
            if not fresh:
                continue
            payloads = []
            ids = []
            for n in fresh:
                try:
                    payloads.append(self._snapshot(n))
                    ids.append(n)
                except KeyError:  # pragma: no cover - raced removal; none supported
                    continue
            for n, p in zip(ids, payloads):
                cache[n] = p
            scores = scorer.score_batch(ctx, np.stack([p.vector for p in payloads]))
            beam = _top(beam + list(zip(scores.tolist(), ids)), ef)

    def _descend(self, ctx, scorer, target_layer: int,
                 cache: dict[int, _Payload]) -> list[tuple[float, int]]:
        ep = self._entry_point
        payload = self._snapshot(ep)
        cache[ep] = payload
        score = float(scorer.score_batch(ctx, payload.vector.reshape(1, -1))[0])
        beam = [(score, ep)]
        for layer in range(self._top_level, target_layer, -1):
            beam = self._search_layer(ctx, scorer, beam, layer, 1, cache)
        return beam

    def search_topk(self, query_context, scorer, k: int, ef: int | None = None):
        """Top-k (ad_id, score) by beam search; read-only on the graph."""
        if len(self._entries) == 0:
            raise InputError("search on empty index")
        if k > len(self._entries):
            raise InputError(f"k={k} exceeds live entry count {len(self._entries)}")
        ef = self.params.ef_search if ef is None else ef
        if ef < k:
            raise InputError(f"ef={ef} must be >= k={k}")
        cache: dict[int, _Payload] = {}
        beam = self._descend(query_context, scorer, 0, cache)
        beam = self._search_layer(query_context, scorer, beam, 0, ef, cache)
        return [(aid, s) for s, aid in beam[:k]]

    def exact_topk(self, query_context, scorer, k: int,
                   embeddings: Sequence[AdEmbedding] | None = None):
        """Full-scan oracle; ties break by ascending ad_id."""
        if embeddings is not None:
            ids = np.array([e.ad_id for e in embeddings], dtype=np.int64)
            mat = np.stack([e.vector for e in embeddings])
        else:
            if not self._entries:
                raise InputError("exact_topk on empty index")
            items = [(a, self._snapshot(a)) for a in list(self._entries.keys())]
            ids = np.array([a for a, _ in items], dtype=np.int64)
            mat = np.stack([p.vector for _, p in items])
        scores = np.asarray(scorer.score_batch(query_context, mat), dtype=float)
        order = np.lexsort((ids, -scores))[:k]
        return [(int(ids[i]), float(scores[i])) for i in order]

    # --------------------------------------------------------------- build
    def build(self, embeddings: Iterable[AdEmbedding]) -> "DynamicIndex":
        seen = set()
        for emb in embeddings:
            if emb.ad_id in seen:
                raise InputError(f"duplicate ad_id {emb.ad_id}")
            seen.add(emb.ad_id)
            self.insert(emb)
        return self

    def _select_neighbors(self, vector: np.ndarray, beam: list[tuple[float, int]],
                          m: int, exclude: int) -> np.ndarray:
        picked = [aid for _, aid in beam if aid != exclude][:m]
        return np.array(picked, dtype=np.int64)

    def _link_candidates(self, vector: np.ndarray, level: int,
                         cache: dict[int, _Payload]) -> list[np.ndarray]:
        """Outgoing neighbor lists for every layer 0..level of a (new) vector."""
        scorer = InnerProductScorer()
        out: list[np.ndarray] = []
        if self._entry_point is None:
            return [np.empty(0, dtype=np.int64) for _ in range(level + 1)]
        start = min(level, self._top_level)
        beam = self._descend(vector, scorer, start, cache)
        for layer in range(start, -1, -1):
            beam = self._search_layer(vector, scorer, beam, layer,
                                      self.params.ef_construction, cache)
            out.append(self._select_neighbors(vector, beam, self._bound(layer), -1))
        out.reverse()  # now layer 0 first
        return [out[i] if i < len(out) else np.empty(0, dtype=np.int64)
                for i in range(level + 1)]

    def insert(self, emb: AdEmbedding) -> None:
        """Add a new entry; safe to run concurrently with readers."""
        vector = np.asarray(emb.vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise InputError(f"vector dim {vector.shape} != ({self.dim},)")
        if emb.ad_id in self._entries:
            raise InputError(f"duplicate ad_id {emb.ad_id}")
        level = self._level_for(emb.ad_id)
        with self._graph_lock:
            if emb.ad_id in self._entries:
                raise InputError(f"duplicate ad_id {emb.ad_id}")
            cache: dict[int, _Payload] = {}
            neighbors = self._link_candidates(vector, level, cache)
            entry = _Entry(emb.ad_id, level,
                           _make_payload(vector, emb.version, tuple(neighbors)))
            self._entries[emb.ad_id] = entry
            if self._entry_point is None or level > self._top_level:
                self._entry_point = emb.ad_id
                self._top_level = level
            self._edition += 1
            # reverse edges, one neighbor lock at a time
            for layer, ids in enumerate(neighbors):
                for n in ids:
                    self._add_reverse_edge(int(n), layer, emb.ad_id, vector)

    def _add_reverse_edge(self, owner: int, layer: int, new_id: int,
                          new_vector: np.ndarray) -> None:
        entry = self._entries.get(owner)
        if entry is None or layer > entry.level:
            return
        with entry.lock:
            payload = entry.payload
            ids = payload.neighbors[layer]
            if new_id in ids:
                return
            ids = np.append(ids, new_id)
            bound = self._bound(layer)
            if len(ids) > bound:
                # keep the strongest edges by inner product with the owner
                vecs = []
                keep_ids = []
                for cand in ids:
                    cand = int(cand)
                    if cand == new_id:
                        vecs.append(new_vector)
                        keep_ids.append(cand)
                    elif cand in self._entries:
                        vecs.append(self._entries[cand].payload.vector)
                        keep_ids.append(cand)
                scores = np.stack(vecs) @ payload.vector
                order = np.lexsort((np.array(keep_ids), -scores))[:bound]
                ids = np.array([keep_ids[i] for i in order], dtype=np.int64)
            neighbors = list(payload.neighbors)
            neighbors[layer] = ids
            entry.payload = _Payload(payload.vector, payload.version,
                                     payload.checksum, tuple(neighbors))
            self._edition += 1

    # -------------------------------------------------------------- update
    def update_entry(self, ad_id: int, new_vector: np.ndarray, new_version: int) -> str:
        """Replace one entry's vector and re-link its outgoing edges.

        Returns "applied" or "rejected_stale"; stale versions leave the
        index untouched so replays are idempotent.
        """
        entry = self._entries.get(ad_id)
        if entry is None:
            raise InputError(f"unknown ad_id {ad_id}")
        vector = np.asarray(new_vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise InputError(f"vector dim {vector.shape} != ({self.dim},)")
        with entry.lock:
            if new_version <= entry.payload.version:
                return "rejected_stale"
            cache: dict[int, _Payload] = {}
            neighbors = self._link_candidates(vector, entry.level, cache)
            for layer in range(entry.level + 1):
                neighbors[layer] = neighbors[layer][neighbors[layer] != ad_id]
            entry.payload = _make_payload(vector, new_version, tuple(neighbors))
            self._edition += 1
        return "applied"

    # ------------------------------------------------------------ analysis
    def reachable_fraction(self, layer: int = 0) -> float:
        """BFS coverage from the entry point along one layer's edges."""
        if self._entry_point is None:
            return 0.0
        seen = {self._entry_point}
        queue = [self._entry_point]
        while queue:
            aid = queue.pop()
            payload = self._entries[aid].payload
            if layer <= len(payload.neighbors) - 1:
                for n in payload.neighbors[layer]:
                    n = int(n)
                    if n not in seen and n in self._entries:
                        seen.add(n)
                        queue.append(n)
        return len(seen) / len(self._entries)

    def neighbor_counts_ok(self) -> bool:
        for entry in self._entries.values():
            for layer, ids in enumerate(entry.payload.neighbors):
                if len(ids) > self._bound(layer):
                    return False
        return True

    # ---------------------------------------------------------------- file
    def save(self, path: str | Path) -> None:
        header = {
            "dim": self.dim,
            "params": self.params.to_dict(),
            "entry_point": self._entry_point,
            "top_level": self._top_level,
            "count": len(self._entries),
        }
        hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
        payload = bytearray()
        payload += INDEX_MAGIC
        payload += struct.pack("<Q", len(hbytes))
        payload += hbytes
        for ad_id in sorted(self._entries):
            entry = self._entries[ad_id]
            p = entry.payload
            payload += struct.pack("<qqq", ad_id, p.version, entry.level)
            payload += p.vector.tobytes()
            payload += struct.pack("<q", len(p.neighbors))
            for ids in p.neighbors:
                payload += struct.pack("<q", len(ids))
                payload += np.asarray(ids, dtype=np.int64).tobytes()
        digest = bytes.fromhex(sha256_bytes(bytes(payload)))
        Path(path).write_bytes(bytes(payload) + digest)

    @classmethod
    def load(cls, path: str | Path) -> "DynamicIndex":
        blob = Path(path).read_bytes()
        if len(blob) < 48 or blob[:8] != INDEX_MAGIC:
            raise InputError(f"{path}: not an index snapshot")
        body, digest = blob[:-32], blob[-32:]
        if bytes.fromhex(sha256_bytes(body)) != digest:
            raise InputError(f"{path}: index snapshot checksum mismatch")
        hlen = struct.unpack("<Q", body[8:16])[0]
        header = json.loads(body[16:16 + hlen].decode("utf-8"))
        params = IndexParams(**header["params"])
        index = cls(int(header["dim"]), params)
        offset = 16 + hlen
        for _ in range(header["count"]):
            ad_id, version, level = struct.unpack_from("<qqq", body, offset)
            offset += 24
            vector = np.frombuffer(body, dtype=np.float64, count=index.dim, offset=offset).copy()
            offset += index.dim * 8
            (n_layers,) = struct.unpack_from("<q", body, offset)
            offset += 8
            neighbors = []
            for _layer in range(n_layers):
                (n,) = struct.unpack_from("<q", body, offset)
                offset += 8
                ids = np.frombuffer(body, dtype=np.int64, count=n, offset=offset).copy()
                offset += n * 8
                neighbors.append(ids)
            index._entries[ad_id] = _Entry(int(ad_id), int(level),
                                           _make_payload(vector, int(version), tuple(neighbors)))
        index._entry_point = header["entry_point"]
        index._top_level = header["top_level"]
        return index


def build_index(embeddings: Sequence[AdEmbedding], params: IndexParams | None = None) -> DynamicIndex:
    """Construct an index over unique, uniform-dimension embeddings."""
    embeddings = list(embeddings)
    if not embeddings:
        raise InputError("no embeddings to index")
    dims = {e.vector.shape for e in embeddings}
    if len(dims) != 1:
        raise InputError(f"mixed embedding dims: {sorted(dims)}")
    return DynamicIndex(embeddings[0].vector.shape[0], params).build(embeddings)
