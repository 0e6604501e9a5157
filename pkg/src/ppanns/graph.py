"""HNSW proximity graph with insert and hard delete.

The graph only stores ids and adjacency. Vector payloads live in a caller
supplied ``(n, d)`` array (SAP ciphertexts on the server, plaintexts in
oracle tests) which every operation takes explicitly; rows are compared by
squared Euclidean distance, which ranks identically to Euclidean.

Adjacency is kept in fixed-width numpy arrays so the hot loops run under
numba: layer 0 in ``nbr0[cap, 2m]``, upper layers in ``nbru[slot, level-1, m]``
for the few nodes that reach level >= 1.
"""

from __future__ import annotations

import heapq
import math
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np
from numba import njit

from .common import expect_magic, make_rng, read_exact, to_bytes

MAGIC = b"HNSW"
VERSION = 1
MAX_LEVELS = 16

REFERENCE_M = 40
REFERENCE_EF_CONSTRUCTION = 600


@njit(cache=True, fastmath=True)
def _sqd(vecs, a, q):
    s = 0.0
    for i in range(q.shape[0]):
        t = vecs[a, i] - q[i]
        s += t * t
    return s


@njit(cache=True)
def _neighbors(node, layer, g):
    nbr0, cnt0, uslot, nbru, cntu = g
    if layer == 0:
        return nbr0[node, : cnt0[node]]
    s = uslot[node]
    return nbru[s, layer - 1, : cntu[s, layer - 1]]


@njit(cache=True)
def _set_neighbors(node, layer, ids, g):
    nbr0, cnt0, uslot, nbru, cntu = g
    n = ids.shape[0]
    if layer == 0:
        nbr0[node, :n] = ids
        cnt0[node] = n
    else:
        s = uslot[node]
        nbru[s, layer - 1, :n] = ids
        cntu[s, layer - 1] = n


@njit(cache=True)
def _append_neighbor(node, layer, nb, g):
    nbr0, cnt0, uslot, nbru, cntu = g
    if layer == 0:
        nbr0[node, cnt0[node]] = nb
        cnt0[node] += 1
    else:
        s = uslot[node]
        nbru[s, layer - 1, cntu[s, layer - 1]] = nb
        cntu[s, layer - 1] += 1


@njit(cache=True)
def _search_layer(q, entries, ef, layer, vecs, g, visited, stamp):
    """Beam search of width ``ef``; returns (dists, ids) sorted ascending by (dist, id)."""
    e0 = np.int64(entries[0])
    d0 = _sqd(vecs, e0, q)
    visited[e0] = stamp
    cand = [(d0, e0)]
    res = [(-d0, -e0)]
    for i in range(1, entries.shape[0]):
        e = np.int64(entries[i])
        if visited[e] == stamp:
            continue
        visited[e] = stamp
        de = _sqd(vecs, e, q)
        heapq.heappush(cand, (de, e))
        heapq.heappush(res, (-de, -e))
        if len(res) > ef:
            heapq.heappop(res)
    while len(cand) > 0:
        dc, c = heapq.heappop(cand)
        if len(res) >= ef and dc > -res[0][0]:
            break
        nb = _neighbors(c, layer, g)
        for j in range(nb.shape[0]):
            e = np.int64(nb[j])
            if visited[e] == stamp:
                continue
            visited[e] = stamp
            de = _sqd(vecs, e, q)
            if len(res) < ef or de < -res[0][0]:
                heapq.heappush(cand, (de, e))
                heapq.heappush(res, (-de, -e))
                if len(res) > ef:
                    heapq.heappop(res)
    n = len(res)
    ds = np.empty(n)
    ids = np.empty(n, np.int64)
    for i in range(n - 1, -1, -1):
        nd, ni = heapq.heappop(res)
        ds[i] = -nd
        ids[i] = -ni
    return ds, ids


@njit(cache=True)
def _greedy(q, cur, top, bottom, vecs, g):
    """Greedy descent through layers ``top .. bottom+1``."""
    dcur = _sqd(vecs, cur, q)
    for layer in range(top, bottom, -1):
        changed = True
        while changed:
            changed = False
            nb = _neighbors(cur, layer, g)
            for j in range(nb.shape[0]):
                e = np.int64(nb[j])
                de = _sqd(vecs, e, q)
                if de < dcur:
                    dcur = de
                    cur = e
                    changed = True
    return cur


@njit(cache=True)
def _select(vecs, ds, ids, m):
    """Diversity heuristic: keep a candidate only if it is closer to the base
    than to every neighbor already kept."""
    out = np.empty(m, np.int64)
    n = 0
    for i in range(ids.shape[0]):
        if n >= m:
            break
        c = ids[i]
        good = True
        for j in range(n):
            if _sqd(vecs, out[j], vecs[c]) < ds[i]:
                good = False
                break
        if good:
            out[n] = c
            n += 1
    return out[:n]


@njit(cache=True)
def _add_link(src, dst, layer, cap, vecs, g):
    nb = _neighbors(src, layer, g)
    n = nb.shape[0]
    for j in range(n):
        if nb[j] == dst:
            return
    if n < cap:
        _append_neighbor(src, layer, dst, g)
        return
    ids = np.empty(n + 1, np.int64)
    ds = np.empty(n + 1)
    base = vecs[src]
    for j in range(n):
        ids[j] = nb[j]
        ds[j] = _sqd(vecs, nb[j], base)
    ids[n] = dst
    ds[n] = _sqd(vecs, dst, base)
    order = np.argsort(ds, kind="mergesort")
    _set_neighbors(src, layer, _select(vecs, ds[order], ids[order], cap), g)


@njit(cache=True)
def _insert(node, level, ep, max_level, m, efc, vecs, g, visited, stamp):
    q = vecs[node]
    cur = _greedy(q, ep, max_level, level, vecs, g)
    entries = np.empty(1, np.int64)
    entries[0] = cur
    for layer in range(min(level, max_level), -1, -1):
        stamp += 1
        ds, ids = _search_layer(q, entries, efc, layer, vecs, g, visited, stamp)
        sel = _select(vecs, ds, ids, m)
        _set_neighbors(node, layer, sel, g)
        cap = 2 * m if layer == 0 else m
        for j in range(sel.shape[0]):
            _add_link(sel[j], node, layer, cap, vecs, g)
        entries = ids
    return stamp


@njit(cache=True)
def _unlink(node, layer, levels, g):
    """Remove ``node`` from every adjacency list at ``layer``; return its in-neighbors."""
    nbr0, cnt0, uslot, nbru, cntu = g
    found = np.empty(levels.shape[0], np.int64)
    nf = 0
    for v in range(levels.shape[0]):
        if v == node or levels[v] < layer:
            continue
        nb = _neighbors(v, layer, g)
        n = nb.shape[0]
        pos = -1
        for j in range(n):
            if nb[j] == node:
                pos = j
                break
        if pos < 0:
            continue
        for j in range(pos, n - 1):
            nb[j] = nb[j + 1]
        if layer == 0:
            cnt0[v] -= 1
        else:
            cntu[uslot[v], layer - 1] -= 1
        found[nf] = v
        nf += 1
    return found[:nf].copy()


@njit(cache=True)
def _relink(v, layer, ep, max_level, m, efc, vecs, g, visited, stamp):
    q = vecs[v]
    cur = _greedy(q, ep, max_level, layer, vecs, g)
    entries = np.empty(1, np.int64)
    entries[0] = cur
    stamp += 1
    ds, ids = _search_layer(q, entries, efc, layer, vecs, g, visited, stamp)
    old = _neighbors(v, layer, g)
    cids = np.empty(ids.shape[0] + old.shape[0], np.int64)
    cds = np.empty(ids.shape[0] + old.shape[0])
    n = 0
    for j in range(ids.shape[0]):
        if ids[j] != v:
            cids[n] = ids[j]
            cds[n] = ds[j]
            n += 1
    for j in range(old.shape[0]):
        o = np.int64(old[j])
        if visited[o] == stamp:
            dup = False
            for t in range(n):
                if cids[t] == o:
                    dup = True
                    break
            if dup:
                continue
        cids[n] = o
        cds[n] = _sqd(vecs, o, q)
        n += 1
    order = np.argsort(cds[:n], kind="mergesort")
    cap = 2 * m if layer == 0 else m
    sel = _select(vecs, cds[:n][order], cids[:n][order], cap)
    _set_neighbors(v, layer, sel, g)
    for j in range(sel.shape[0]):
        _add_link(sel[j], v, layer, cap, vecs, g)
    return stamp


@njit(cache=True)
def _knn(q, k, ef, ep, max_level, vecs, g, visited, stamp):
    cur = _greedy(q, ep, max_level, 0, vecs, g)
    entries = np.empty(1, np.int64)
    entries[0] = cur
    ds, ids = _search_layer(q, entries, max(ef, k), 0, vecs, g, visited, stamp)
    return ids[:k], ds[:k]


@dataclass(frozen=True)
class SearchParams:
    ef_search: int
    k_prime: int

    def __post_init__(self):
        if not self.ef_search >= self.k_prime >= 1:
            raise ValueError(f"need ef_search >= k_prime >= 1, got {self.ef_search}, {self.k_prime}")


class HnswGraph:
    """Multi-layer proximity graph over an external vector table."""

    def __init__(self, m: int = 16, ef_construction: int = 200, seed=None, capacity: int = 16):
        if m < 2:
            raise ValueError("m must be at least 2")
        if ef_construction < 1:
            raise ValueError("ef_construction must be positive")
        self.m = int(m)
        self.ef_construction = int(ef_construction)
        self.level_multiplier = 1.0 / math.log(self.m)
        self.entry_point = -1
        self.max_level = -1
        self._rng = make_rng(seed)
        self._alloc(max(int(capacity), 1))
        self._nslots = 0
        self._stamp = 0
        self._local = threading.local()

    def _alloc(self, cap: int) -> None:
        self.levels = np.full(cap, -1, np.int64)
        self.nbr0 = np.zeros((cap, 2 * self.m), np.int32)
        self.cnt0 = np.zeros(cap, np.int32)
        self.uslot = np.full(cap, -1, np.int64)
        self.nbru = np.zeros((max(cap // self.m, 4), MAX_LEVELS - 1, self.m), np.int32)
        self.cntu = np.zeros((self.nbru.shape[0], MAX_LEVELS - 1), np.int32)
        self._visited = np.zeros(cap, np.int64)

    @property
    def capacity(self) -> int:
        return int(self.levels.shape[0])

    def _grow(self, need: int) -> None:
        cap = self.capacity
        if need <= cap:
            return
        new = max(need, 2 * cap)
        extra = new - cap
        self.levels = np.concatenate([self.levels, np.full(extra, -1, np.int64)])
        self.nbr0 = np.concatenate([self.nbr0, np.zeros((extra, 2 * self.m), np.int32)])
        self.cnt0 = np.concatenate([self.cnt0, np.zeros(extra, np.int32)])
        self.uslot = np.concatenate([self.uslot, np.full(extra, -1, np.int64)])
        self._visited = np.zeros(new, np.int64)
        self._stamp = 0

    def _assign_slot(self, node: int) -> None:
        if self._nslots == self.nbru.shape[0]:
            n = self.nbru.shape[0]
            self.nbru = np.concatenate([self.nbru, np.zeros_like(self.nbru)])
            self.cntu = np.concatenate([self.cntu, np.zeros((n, MAX_LEVELS - 1), np.int32)])
        self.uslot[node] = self._nslots
        self.cntu[self._nslots] = 0
        self._nslots += 1

    @property
    def _g(self):
        return (self.nbr0, self.cnt0, self.uslot, self.nbru, self.cntu)

    def draw_level(self, rng=None) -> int:
        rng = self._rng if rng is None else rng
        level = int(-math.log(1.0 - rng.random()) * self.level_multiplier)
        return min(level, MAX_LEVELS - 1)

    # -- queries ---------------------------------------------------------

    def __len__(self) -> int:
        return int(np.count_nonzero(self.levels >= 0))

    def __contains__(self, node: int) -> bool:
        return 0 <= node < self.capacity and self.levels[node] >= 0

    def nodes(self) -> np.ndarray:
        return np.flatnonzero(self.levels >= 0)

    def neighbors(self, node: int, layer: int = 0) -> list[int]:
        if node not in self or self.levels[node] < layer:
            raise KeyError(f"node {node} not present at layer {layer}")
        return [int(x) for x in _neighbors(node, layer, self._g)]

    @property
    def layers(self) -> list[dict[int, list[int]]]:
        out = []
        for layer in range(self.max_level + 1):
            ids = np.flatnonzero(self.levels >= layer)
            out.append({int(v): self.neighbors(int(v), layer) for v in ids})
        return out

    def search(self, store: np.ndarray, q, k: int, ef: int) -> np.ndarray:
        """Ids of the ``k`` approximate nearest rows of ``store`` to ``q``."""
        if self.entry_point < 0:
            return np.empty(0, np.int64)
        vis = getattr(self._local, "visited", None)
        if vis is None or vis.shape[0] < self.capacity:
            vis = np.zeros(self.capacity, np.int64)
            self._local.visited = vis
            self._local.stamp = 0
        self._local.stamp += 1
        q = np.ascontiguousarray(q, dtype=np.float64)
        ids, _ = _knn(q, int(k), int(ef), self.entry_point, self.max_level, store, self._g, vis, self._local.stamp)
        return ids

    # -- mutation --------------------------------------------------------

    @classmethod
    def build(cls, store: np.ndarray, m: int = 16, ef_construction: int = 200, seed=0) -> "HnswGraph":
        store = np.ascontiguousarray(store, dtype=np.float64)
        if store.shape[0] == 0:
            raise ValueError("cannot build a graph over an empty store")
        g = cls(m=m, ef_construction=ef_construction, seed=seed, capacity=store.shape[0])
        for i in range(store.shape[0]):
            g.insert(i, store)
        return g

    def insert(self, node: int, store: np.ndarray, rng=None, level: int | None = None) -> None:
        node = int(node)
        if node < 0:
            raise ValueError("ids must be non-negative")
        if node in self:
            raise KeyError(f"id {node} already present")
        if store.shape[0] <= node:
            raise IndexError(f"store has no row for id {node}")
        self._grow(node + 1)
        level = self.draw_level(rng) if level is None else int(level)
        self.levels[node] = level
        self.cnt0[node] = 0
        if level > 0:
            self._assign_slot(node)
        if self.entry_point < 0:
            self.entry_point, self.max_level = node, level
            return
        self._stamp = _insert(
            node, level, self.entry_point, self.max_level, self.m, self.ef_construction,
            store, self._g, self._visited, self._stamp,
        )
        if level > self.max_level:
            self.entry_point, self.max_level = node, level

    def delete(self, node: int, store: np.ndarray) -> None:
        """Hard-remove ``node`` and re-link each of its former in-neighbors."""
        node = int(node)
        if node not in self:
            raise KeyError(f"id {node} not present")
        top = int(self.levels[node])
        affected = [_unlink(node, layer, self.levels, self._g) for layer in range(top + 1)]
        self.levels[node] = -1
        self.cnt0[node] = 0
        if self.uslot[node] >= 0:
            self.cntu[self.uslot[node]] = 0
            self.uslot[node] = -1
        if node == self.entry_point:
            alive = self.nodes()
            if alive.size == 0:
                self.entry_point, self.max_level = -1, -1
                return
            self.max_level = int(self.levels[alive].max())
            # lowest id on the top layer, for determinism
            self.entry_point = int(alive[self.levels[alive] == self.max_level][0])
        for layer, vs in enumerate(affected):
            for v in vs:
                self._stamp = _relink(
                    int(v), layer, self.entry_point, self.max_level, self.m, self.ef_construction,
                    store, self._g, self._visited, self._stamp,
                )

    # -- invariants ------------------------------------------------------

    def check_invariants(self) -> None:
        layers = self.layers
        for layer, adj in enumerate(layers):
            cap = 2 * self.m if layer == 0 else self.m
            if layer > 0 and not set(adj) <= set(layers[layer - 1]):
                raise AssertionError(f"layer {layer} not nested in layer {layer - 1}")
            for v, nbs in adj.items():
                if len(nbs) > cap:
                    raise AssertionError(f"node {v} has degree {len(nbs)} > {cap} at layer {layer}")
                if len(set(nbs)) != len(nbs) or v in nbs:
                    raise AssertionError(f"node {v} has duplicate or self edges at layer {layer}")
                missing = [u for u in nbs if u not in adj]
                if missing:
                    raise AssertionError(f"node {v} links to absent {missing} at layer {layer}")
        if layers and (self.entry_point not in layers[-1]):
            raise AssertionError("entry point is not on the top layer")

    # -- persistence -----------------------------------------------------

    def write(self, f: BinaryIO) -> None:
        alive = self.nodes()
        n = int(alive[-1]) + 1 if alive.size else 0
        f.write(MAGIC)
        f.write(struct.pack("<BIIIiid", VERSION, n, self.m, self.ef_construction,
                            self.max_level, self.entry_point, self.level_multiplier))
        for layer in range(self.max_level + 1):
            ids = np.flatnonzero(self.levels >= layer)
            lists = [_neighbors(int(v), layer, self._g) for v in ids]
            offsets = np.zeros(len(ids) + 1, "<u8")
            offsets[1:] = np.cumsum([len(x) for x in lists])
            flat = np.concatenate(lists) if lists else np.empty(0)
            f.write(struct.pack("<I", len(ids)))
            f.write(ids.astype("<u4").tobytes())
            f.write(offsets.tobytes())
            f.write(np.asarray(flat).astype("<u4").tobytes())

    @classmethod
    def read(cls, f: BinaryIO, seed=None) -> "HnswGraph":
        expect_magic(f, MAGIC)
        version, n, m, efc, max_level, ep, mult = struct.unpack("<BIIIiid", read_exact(f, 29))
        if version != VERSION:
            raise ValueError(f"unsupported graph version {version}")
        g = cls(m=m, ef_construction=efc, seed=seed, capacity=max(n, 1))
        g.level_multiplier = mult
        per_layer = []
        for layer in range(max_level + 1):
            (count,) = struct.unpack("<I", read_exact(f, 4))
            ids = np.frombuffer(read_exact(f, 4 * count), "<u4").astype(np.int64)
            offsets = np.frombuffer(read_exact(f, 8 * (count + 1)), "<u8").astype(np.int64)
            flat = np.frombuffer(read_exact(f, 4 * int(offsets[-1])), "<u4").astype(np.int32)
            g.levels[ids] = layer
            per_layer.append((ids, offsets, flat))
        for node in np.flatnonzero(g.levels > 0):
            g._assign_slot(int(node))
        for layer, (ids, offsets, flat) in enumerate(per_layer):
            for i, v in enumerate(ids):
                _set_neighbors(int(v), layer, flat[offsets[i]:offsets[i + 1]], g._g)
        g.entry_point, g.max_level = ep, max_level
        return g

    def to_bytes(self) -> bytes:
        return to_bytes(self.write)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, seed=None) -> "HnswGraph":
        with open(path, "rb") as f:
            return cls.read(f, seed=seed)


def build(sap_store: np.ndarray, m: int = 16, ef_construction: int = 200, seed=0) -> HnswGraph:
    return HnswGraph.build(sap_store, m=m, ef_construction=ef_construction, seed=seed)


def knn_search(g: HnswGraph, sap_store: np.ndarray, cq, params: SearchParams) -> np.ndarray:
    return g.search(sap_store, cq, params.k_prime, params.ef_search)
