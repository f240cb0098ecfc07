"""HNSW index over query encodings and the tail-sparsity analysis.

Vectors are stored L2-normalised so cosine distance is ``1 - dot``. The
graph lives in fixed-size int32 adjacency arrays; construction and search
loops are compiled with numba.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numba
import numpy as np

from .io import atomic_write_bytes

INDEX_MAGIC = b"GENANN\x00\x01"
INDEX_VERSION = 1
DEFAULT_RADII = (0.15, 0.10, 0.05)
HEAD_MIN = 2**15  # head: strictly more than this many occurrences
TAIL_MAX = 2**4  # tail: at most this many


class IndexError_(ValueError):
    pass


@dataclass(frozen=True)
class NeighborResult:
    query_id: int
    distance: float


# --- compiled kernels -------------------------------------------------------


@numba.njit(cache=True, fastmath=True)
def _dist(vectors, i, q):
    s = 0.0
    for k in range(q.shape[0]):
        s += vectors[i, k] * q[k]
    return 1.0 - s


@numba.njit(cache=True)
def _neighbors(node, layer, nbr0, cnt0, nbrU, cntU):
    if layer == 0:
        return nbr0[node, : cnt0[node]]
    return nbrU[node, layer - 1, : cntU[node, layer - 1]]


@numba.njit(cache=True)
def _search_layer(vectors, q, ep, ep_dist, ef, layer, nbr0, cnt0, nbrU, cntU, visited, tag):
    """Best-first search of one layer; returns (dists, ids) sorted ascending."""
    cand = [(ep_dist, ep)]
    top = [(-ep_dist, ep)]
    visited[ep] = tag
    while len(cand) > 0:
        d, c = heapq_pop(cand)
        if d > -top[0][0] and len(top) >= ef:
            break
        nb = _neighbors(c, layer, nbr0, cnt0, nbrU, cntU)
        for j in range(nb.shape[0]):
            e = nb[j]
            if visited[e] == tag:
                continue
            visited[e] = tag
            de = _dist(vectors, e, q)
            if len(top) < ef or de < -top[0][0]:
                heapq_push(cand, (de, e))
                heapq_push(top, (-de, e))
                if len(top) > ef:
                    heapq_pop(top)
    n = len(top)
    ids = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    # drain the max-heap from the far end
    for k in range(n - 1, -1, -1):
        nd, e = heapq_pop(top)
        dists[k] = -nd
        ids[k] = e
    return dists, ids


@numba.njit(cache=True)
def heapq_push(heap, item):
    heap.append(item)
    pos = len(heap) - 1
    while pos > 0:
        parent = (pos - 1) >> 1
        if heap[pos] < heap[parent]:
            heap[pos], heap[parent] = heap[parent], heap[pos]
            pos = parent
        else:
            break


@numba.njit(cache=True)
def heapq_pop(heap):
    last = heap.pop()
    if len(heap) == 0:
        return last
    out = heap[0]
    heap[0] = last
    n = len(heap)
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= n:
            break
        child = left
        if left + 1 < n and heap[left + 1] < heap[left]:
            child = left + 1
        if heap[child] < heap[pos]:
            heap[pos], heap[child] = heap[child], heap[pos]
            pos = child
        else:
            break
    return out


@numba.njit(cache=True)
def _select_heuristic(vectors, dists, ids, m):
    """Keep a candidate only if it is closer to the base than to every kept one."""
    out = np.empty(m, dtype=np.int64)
    n_out = 0
    for a in range(ids.shape[0]):
        if n_out >= m:
            break
        e = ids[a]
        good = True
        for b in range(n_out):
            if _dist(vectors, out[b], vectors[e]) < dists[a]:
                good = False
                break
        if good:
            out[n_out] = e
            n_out += 1
    return out[:n_out]


@numba.njit(cache=True)
def _set_neighbors(node, layer, new, nbr0, cnt0, nbrU, cntU):
    if layer == 0:
        nbr0[node, : new.shape[0]] = new
        cnt0[node] = new.shape[0]
    else:
        nbrU[node, layer - 1, : new.shape[0]] = new
        cntU[node, layer - 1] = new.shape[0]


@numba.njit(cache=True)
def _connect(vectors, node, new, layer, cap, nbr0, cnt0, nbrU, cntU):
    """Add ``new`` to ``node``'s list at ``layer``, shrinking with the heuristic if full."""
    cur = _neighbors(node, layer, nbr0, cnt0, nbrU, cntU)
    n = cur.shape[0]
    if n < cap:
        if layer == 0:
            nbr0[node, n] = new
            cnt0[node] = n + 1
        else:
            nbrU[node, layer - 1, n] = new
            cntU[node, layer - 1] = n + 1
        return
    ids = np.empty(n + 1, dtype=np.int64)
    dists = np.empty(n + 1, dtype=np.float64)
    for k in range(n):
        ids[k] = cur[k]
        dists[k] = _dist(vectors, cur[k], vectors[node])
    ids[n] = new
    dists[n] = _dist(vectors, new, vectors[node])
    order = np.argsort(dists, kind="mergesort")
    kept = _select_heuristic(vectors, dists[order], ids[order], cap)
    _set_neighbors(node, layer, kept, nbr0, cnt0, nbrU, cntU)


@numba.njit(cache=True)
def _build(vectors, levels, m, ef_construction, nbr0, cnt0, nbrU, cntU):
    n = vectors.shape[0]
    visited = np.zeros(n, dtype=np.int64)
    tag = 0
    entry = 0
    max_level = levels[0]
    for node in range(1, n):
        q = vectors[node]
        level = levels[node]
        ep = entry
        ep_dist = _dist(vectors, ep, q)
        for layer in range(max_level, level, -1):
            tag += 1
            d, ids = _search_layer(vectors, q, ep, ep_dist, 1, layer, nbr0, cnt0, nbrU, cntU, visited, tag)
            ep, ep_dist = ids[0], d[0]
        for layer in range(min(level, max_level), -1, -1):
            tag += 1
            d, ids = _search_layer(vectors, q, ep, ep_dist, ef_construction, layer,
                                   nbr0, cnt0, nbrU, cntU, visited, tag)
            chosen = _select_heuristic(vectors, d, ids, m)
            _set_neighbors(node, layer, chosen, nbr0, cnt0, nbrU, cntU)
            cap = 2 * m if layer == 0 else m
            for k in range(chosen.shape[0]):
                _connect(vectors, chosen[k], node, layer, cap, nbr0, cnt0, nbrU, cntU)
            ep, ep_dist = ids[0], d[0]
        if level > max_level:
            max_level = level
            entry = node
    return entry, max_level


@numba.njit(cache=True)
def _search(vectors, q, entry, max_level, ef, nbr0, cnt0, nbrU, cntU, visited, tag):
    ep = entry
    ep_dist = _dist(vectors, ep, q)
    for layer in range(max_level, 0, -1):
        d, ids = _search_layer(vectors, q, ep, ep_dist, 1, layer, nbr0, cnt0, nbrU, cntU, visited, tag)
        tag += 1
        ep, ep_dist = ids[0], d[0]
    return _search_layer(vectors, q, ep, ep_dist, ef, 0, nbr0, cnt0, nbrU, cntU, visited, tag)


# --- index ----------------------------------------------------------------------


def _cosine_distances(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    # einsum reduces each row on its own, so a row's value does not depend on its neighbours
    return 1.0 - np.einsum("ij,j->i", rows, q)


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if (norms <= 1e-12).any():
        bad = int(np.flatnonzero(norms <= 1e-12)[0])
        raise ValueError(f"encoding {bad} has zero norm; cosine distance undefined")
    return x / norms[:, None]


class AnnIndex:
    """Layered navigable small-world graph with cosine-distance search."""

    def __init__(self, ids, vectors, levels, nbr0, cnt0, nbrU, cntU, entry, max_level,
                 m=16, ef_construction=200, ef_search=64, seed=0):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.vectors = vectors
        self.levels = levels
        self.nbr0, self.cnt0, self.nbrU, self.cntU = nbr0, cnt0, nbrU, cntU
        self.entry, self.max_level = int(entry), int(max_level)
        self.m, self.ef_construction, self.ef_search, self.seed = m, ef_construction, ef_search, seed
        self._pos = {int(x): i for i, x in enumerate(self.ids)}
        self._visited = np.zeros(len(self.ids), dtype=np.int64)
        self._tag = 0
        for arr in (self.ids, self.vectors, self.levels, self.nbr0, self.cnt0, self.nbrU, self.cntU):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def neighbors(self, query_id: int, layer: int = 0) -> list[int]:
        node = self._pos[int(query_id)]
        if layer == 0:
            nb = self.nbr0[node, : self.cnt0[node]]
        elif layer <= self.levels[node]:
            nb = self.nbrU[node, layer - 1, : self.cntU[node, layer - 1]]
        else:
            return []
        return [int(self.ids[i]) for i in nb]

    def search(self, query_encoding, k: int = 10, radius: float = 2.0, exclude_id: int | None = None,
               ef: int | None = None) -> list[NeighborResult]:
        """Up to ``k`` nearest indexed queries within cosine distance ``radius``.

        The node whose id equals ``exclude_id`` (the probe itself) is skipped.
        """
        q = np.asarray(query_encoding, dtype=np.float64)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise ValueError(f"query has dimension {q.shape}, index has {self.dim}")
        if k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= radius <= 2.0:
            raise ValueError(f"radius must be in [0, 2], got {radius}")
        norm = np.linalg.norm(q)
        if norm <= 1e-12:
            raise ValueError("query encoding has zero norm")
        q = q / norm
        ef = max(ef or self.ef_search, k + (exclude_id is not None))
        self._tag += self.max_level + 2
        dists, nodes = _search(self.vectors, q, self.entry, self.max_level, ef, self.nbr0, self.cnt0,
                               self.nbrU, self.cntU, self._visited, self._tag)
        self._tag += self.max_level + 2
        # re-score the beam with the same arithmetic as exact_search
        nodes = np.asarray(nodes, dtype=np.int64)
        dists = _cosine_distances(self.vectors[nodes], q)
        order = np.lexsort((nodes, dists))
        out = []
        for d, node in zip(dists[order], nodes[order]):
            qid = int(self.ids[node])
            if exclude_id is not None and qid == exclude_id:
                continue
            d = min(max(float(d), 0.0), 2.0)
            if d > radius:
                break
            out.append(NeighborResult(qid, d))
            if len(out) == k:
                break
        return out

    def exact_search(self, query_encoding, k: int = 10, radius: float = 2.0,
                     exclude_id: int | None = None) -> list[NeighborResult]:
        """Brute-force scan over every indexed vector (reference answer)."""
        q = np.asarray(query_encoding, dtype=np.float64)
        q = q / np.linalg.norm(q)
        d = _cosine_distances(self.vectors, q)
        order = np.lexsort((np.arange(len(d)), d))
        out = []
        for node in order:
            qid = int(self.ids[node])
            if exclude_id is not None and qid == exclude_id:
                continue
            dist = min(max(float(d[node]), 0.0), 2.0)
            if dist > radius:
                break
            out.append(NeighborResult(qid, dist))
            if len(out) == k:
                break
        return out

    # serialization -----------------------------------------------------------
    def to_bytes(self) -> bytes:
        n = len(self.ids)
        head = INDEX_MAGIC + struct.pack(
            "<IIQIIIqqi", INDEX_VERSION, self.dim, n, self.m, self.ef_construction, self.ef_search,
            self.seed, self.entry, self.max_level,
        )
        parts = [head, self.ids.astype("<i8").tobytes(), self.levels.astype("<i4").tobytes(),
                 self.vectors.astype("<f8").tobytes()]
        node_idx = np.arange(n)
        for layer in range(self.max_level + 1):
            members = node_idx[self.levels >= layer]
            if layer == 0:
                nbr, cnt = self.nbr0[members], self.cnt0[members]
            else:
                nbr, cnt = self.nbrU[members, layer - 1], self.cntU[members, layer - 1]
            deltas = nbr.astype(np.int64)
            if deltas.shape[1]:
                deltas[:, 1:] = nbr[:, 1:].astype(np.int64) - nbr[:, :-1]
                deltas[:, 0] = nbr[:, 0].astype(np.int64) - members
            valid = np.arange(nbr.shape[1])[None, :] < cnt[:, None]
            parts.append(cnt.astype("<u2").tobytes())
            parts.append(deltas[valid].astype("<i4").tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AnnIndex":
        if blob[:8] != INDEX_MAGIC:
            raise ValueError("not a GEN ANN index file (bad magic)")
        fmt = "<IIQIIIqqi"
        version, dim, n, m, efc, efs, seed, entry, max_level = struct.unpack_from(fmt, blob, 8)
        if version != INDEX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        off = 8 + struct.calcsize(fmt)

        def take(dtype, count):
            nonlocal off
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
            off += arr.nbytes
            return arr

        ids = take("<i8", n).astype(np.int64)
        levels = take("<i4", n).astype(np.int32)
        vectors = take("<f8", n * dim).reshape(n, dim).copy()
        n_upper = max(1, max_level)
        nbr0 = np.zeros((n, 2 * m), dtype=np.int32)
        cnt0 = np.zeros(n, dtype=np.int32)
        nbrU = np.zeros((n, n_upper, m), dtype=np.int32)
        cntU = np.zeros((n, n_upper), dtype=np.int32)
        node_idx = np.arange(n)
        for layer in range(max_level + 1):
            members = node_idx[levels >= layer]
            cnt = take("<u2", len(members)).astype(np.int64)
            flat = take("<i4", int(cnt.sum())).astype(np.int64)
            width = 2 * m if layer == 0 else m
            rows = np.zeros((len(members), width), dtype=np.int64)
            valid = np.arange(width)[None, :] < cnt[:, None]
            rows[valid] = flat
            rows[:, 0] += members
            rows = np.cumsum(rows, axis=1)
            rows[~valid] = 0
            if layer == 0:
                nbr0[members], cnt0[members] = rows, cnt
            else:
                nbrU[members, layer - 1], cntU[members, layer - 1] = rows, cnt
        if off != len(blob):
            raise ValueError(f"{len(blob) - off} trailing bytes in index file")
        return cls(ids, vectors, levels, nbr0, cnt0, nbrU, cntU, entry, max_level, m, efc, efs, seed)

    @classmethod
    def load(cls, path) -> "AnnIndex":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_index(encodings, ids: Sequence[int] | None = None, m: int = 16, ef_construction: int = 200,
                ef_search: int = 64, seed: int = 0) -> AnnIndex:
    """Insert encodings in the given order; levels come from a seeded geometric draw."""
    x = np.asarray(encodings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, dim) array of encodings, got shape {x.shape}")
    n = x.shape[0]
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if ids.shape != (n,):
        raise ValueError("need exactly one id per encoding")
    if len(np.unique(ids)) != n:
        raise ValueError("duplicate ids in index input")
    if m < 2:
        raise ValueError("m must be >= 2")
    vectors = _normalize(x)
    rng = np.random.default_rng(seed)
    ml = 1.0 / math.log(m)
    levels = np.floor(-np.log(1.0 - rng.random(n)) * ml).astype(np.int32)
    n_upper = max(1, int(levels.max()))
    nbr0 = np.zeros((n, 2 * m), dtype=np.int32)
    cnt0 = np.zeros(n, dtype=np.int32)
    nbrU = np.zeros((n, n_upper, m), dtype=np.int32)
    cntU = np.zeros((n, n_upper), dtype=np.int32)
    entry, max_level = _build(vectors, levels, m, ef_construction, nbr0, cnt0, nbrU, cntU)
    return AnnIndex(ids, vectors, levels, nbr0, cnt0, nbrU, cntU, entry, max_level,
                    m, ef_construction, ef_search, seed)


# --- tail analysis ------------------------------------------------------------


def tier_of(count: int) -> str:
    if count > HEAD_MIN:
        return "head"
    if count > TAIL_MAX:
        return "torso"
    return "tail"


@dataclass
class TierRow:
    tier: str
    radius: float
    n: int
    coverage: float  # percent of queries with at least one neighbour
    mean_neighbors: float  # among covered queries
    co_intent: float  # percent of returned neighbours sharing the probe's intent

    def as_tsv(self) -> str:
        return (f"{self.tier}\t{self.radius:.2f}\t{self.n}\t{self.coverage:.2f}\t"
                f"{self.mean_neighbors:.3f}\t{self.co_intent:.2f}")


def neighbor_lists(index: AnnIndex, probes: np.ndarray, self_ids: Sequence[int | None], k: int = 10,
                   radius: float = max(DEFAULT_RADII)) -> list[list[NeighborResult]]:
    return [index.search(p, k, radius, exclude_id=s) for p, s in zip(probes, self_ids)]


def tail_stats(sample_queries: Sequence[str], sample_encodings: np.ndarray, index: AnnIndex,
               index_queries: Sequence[str], frequency: Mapping[str, int],
               intent_of: Callable[[str], int], radii: Sequence[float] = DEFAULT_RADII,
               k: int = 10) -> list[TierRow]:
    """Coverage, neighbour count and co-intent share per frequency tier and radius.

    ``index_queries[i]`` is the text of index id ``i``. A probe that is itself
    indexed never counts as its own neighbour.
    """
    position = {q: i for i, q in enumerate(index_queries)}
    self_ids = [position.get(q) for q in sample_queries]
    lists = neighbor_lists(index, np.asarray(sample_encodings), self_ids, k, max(radii))
    tiers = [tier_of(frequency.get(q, 0)) for q in sample_queries]
    rows = []
    for tier in ("head", "torso", "tail"):
        members = [i for i, t in enumerate(tiers) if t == tier]
        for r in radii:
            covered, n_neigh, n_same = 0, 0, 0
            for i in members:
                hits = [h for h in lists[i] if h.distance <= r]
                if hits:
                    covered += 1
                    n_neigh += len(hits)
                    own = intent_of(sample_queries[i])
                    n_same += sum(intent_of(index_queries[h.query_id]) == own for h in hits)
            n = len(members)
            rows.append(TierRow(
                tier, r, n,
                100.0 * covered / n if n else float("nan"),
                n_neigh / covered if covered else float("nan"),
                100.0 * n_same / n_neigh if n_neigh else float("nan"),
            ))
    return rows


UNSEEN = None


def ann_frequency_augment(count: float, neighbor_counts: Sequence[float], penalty: float = 1.0):
    """Own count plus ``penalty`` times the neighbours' counts, and its log2 bin.

    Returns ``(augmented, bin)`` with ``bin = floor(log2(augmented))`` or
    ``UNSEEN`` (None) when the augmented count is below one.
    """
    if count < 0 or any(c < 0 for c in neighbor_counts):
        raise ValueError("frequency counts must be non-negative")
    if not 0.0 <= penalty <= 1.0:
        raise ValueError(f"penalty must be in [0, 1], got {penalty}")
    augmented = count + penalty * float(sum(neighbor_counts))
    if augmented < 1:
        return augmented, UNSEEN
    return augmented, int(math.floor(math.log2(augmented)))


def frequency_bins(sample_queries: Sequence[str], frequency: Mapping[str, int],
                   neighbors: Sequence[Sequence[NeighborResult]] | None, index_queries: Sequence[str],
                   radius: float | None = None, penalty: float | Mapping[str, float] = 1.0) -> dict:
    """Fraction of sample queries per log2-frequency bin (key None = unseen).

    Without ``neighbors`` this is the plain query-frequency distribution.
    ``penalty`` may be a per-tier mapping.
    """
    counts: dict = {}
    for i, q in enumerate(sample_queries):
        own = frequency.get(q, 0)
        nb = []
        if neighbors is not None:
            nb = [frequency.get(index_queries[h.query_id], 0) for h in neighbors[i]
                  if radius is None or h.distance <= radius]
        pen = penalty[tier_of(own)] if isinstance(penalty, Mapping) else penalty
        _, b = ann_frequency_augment(own, nb, pen)
        counts[b] = counts.get(b, 0) + 1
    total = len(sample_queries)
    return {b: c / total for b, c in counts.items()}


def format_bins(bins: Mapping, label: str) -> str:
    keys = sorted(bins, key=lambda b: -1 if b is None else b)
    return "".join(f"{label}\t{'-inf' if b is None else b}\t{bins[b]:.6f}\n" for b in keys)
