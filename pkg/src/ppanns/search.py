"""Filter-and-refine search over an encrypted database.

The filter phase runs HNSW over SAP ciphertexts and returns ``k'`` candidate
ids. The refine phase keeps a size-``k`` max-heap whose order is decided only
by DCE comparisons, so the server never sees a distance value.
"""

from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Sequence

import numpy as np

from . import dce, dcpe
from .common import DimensionError, derive_seeds, expect_magic, make_rng, read_exact
from .evaluation import brute_force_knn, mean_recall
from .graph import HnswGraph

QUERY_MAGIC = b"PPQ1"
RESPONSE_MAGIC = b"PPR1"
DB_FORMAT_VERSION = 1


@dataclass
class EncryptedDatabase:
    """Everything the server holds: SAP store, DCE store and the graph over SAP."""

    sap: np.ndarray
    dce: np.ndarray
    graph: HnswGraph
    d: int
    deleted: set[int] = field(default_factory=set)
    format_version: int = DB_FORMAT_VERSION

    def __post_init__(self):
        if self.sap.shape[0] != self.dce.shape[0]:
            raise ValueError("SAP and DCE stores disagree on n")
        if self.sap.shape[1] != self.d or self.dce.shape[2] != dce.lanes(self.dce_d):
            raise DimensionError("store dimensions do not match d")

    @property
    def n(self) -> int:
        return int(self.sap.shape[0])

    @property
    def dce_d(self) -> int:
        return self.d + (self.d % 2)

    @property
    def padded(self) -> bool:
        return self.d % 2 == 1

    def live_ids(self) -> np.ndarray:
        return self.graph.nodes()

    def insert(self, sap_c: np.ndarray, dce_c: np.ndarray, rng=None) -> int:
        """Append one encrypted vector (produced by the data owner) and index it."""
        new_id = self.n
        self.sap = np.vstack([self.sap, np.asarray(sap_c, dtype=np.float64)[None, :]])
        self.dce = np.concatenate([self.dce, np.asarray(dce_c, dtype=np.float64)[None]])
        self.graph.insert(new_id, self.sap, rng=rng)
        return new_id

    def delete(self, vid: int) -> None:
        self.graph.delete(vid, self.sap)
        self.sap[vid] = 0.0
        self.dce[vid] = 0.0
        self.deleted.add(int(vid))

    def metadata(self) -> dict:
        return {
            "format_version": self.format_version,
            "n": self.n,
            "d": self.d,
            "dce_d": self.dce_d,
            "padded": self.padded,
            "deleted": sorted(self.deleted),
        }

    def save(self, directory) -> dict[str, Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"sap_store": out / "sap.ctx", "dce_store": out / "dce.ctx", "graph": out / "graph.hnsw"}
        dcpe.save_store(paths["sap_store"], self.sap)
        dce.save_store(paths["dce_store"], self.dce, self.dce_d)
        self.graph.save(paths["graph"])
        paths["database"] = out / "database.json"
        paths["database"].write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return paths

    @classmethod
    def load(cls, directory) -> "EncryptedDatabase":
        src = Path(directory)
        meta = json.loads((src / "database.json").read_text())
        if meta["format_version"] != DB_FORMAT_VERSION:
            raise ValueError(f"unsupported database format {meta['format_version']}")
        sap = dcpe.load_store(src / "sap.ctx")
        store, _ = dce.load_store(src / "dce.ctx")
        graph = HnswGraph.load(src / "graph.hnsw")
        return cls(sap=sap, dce=store, graph=graph, d=meta["d"], deleted=set(meta["deleted"]))


@dataclass(frozen=True, eq=False)
class QueryCiphertext:
    trapdoor: np.ndarray
    sap_q: np.ndarray
    k: int


@dataclass
class SearchStats:
    candidates: int = 0
    comparisons: int = 0
    elapsed: float = 0.0
    filter_time: float = 0.0
    refine_time: float = 0.0


@dataclass
class SearchResult:
    ids: list[int]
    stats: SearchStats


class ComparatorMaxHeap:
    """Binary max-heap ordered solely by a ``farther(a, b)`` predicate."""

    def __init__(self, farther: Callable[[int, int], bool]):
        self._farther = farther
        self._items: list[int] = []

    def __len__(self) -> int:
        return len(self._items)

    def top(self) -> int:
        return self._items[0]

    def push(self, x: int) -> None:
        a = self._items
        a.append(x)
        i = len(a) - 1
        while i > 0:
            parent = (i - 1) // 2
            if not self._farther(a[i], a[parent]):
                break
            a[i], a[parent] = a[parent], a[i]
            i = parent

    def _sift_down(self, i: int) -> None:
        # bottom-up: follow the farther child to a leaf (one comparison per
        # level), then climb back to where the displaced item belongs
        a = self._items
        n = len(a)
        x = a[i]
        j = i
        while 2 * j + 2 < n:
            j = 2 * j + 1 if self._farther(a[2 * j + 1], a[2 * j + 2]) else 2 * j + 2
        if 2 * j + 1 < n:
            j = 2 * j + 1
        while j > i and self._farther(x, a[j]):
            j = (j - 1) // 2
        while j > i:
            a[j], x = x, a[j]
            j = (j - 1) // 2
        a[i] = x

    def replace_top(self, x: int) -> None:
        self._items[0] = x
        self._sift_down(0)

    def pop(self) -> int:
        a = self._items
        top = a[0]
        last = a.pop()
        if a:
            a[0] = last
            self._sift_down(0)
        return top

    def drain_ascending(self) -> list[int]:
        out = [self.pop() for _ in range(len(self._items))]
        out.reverse()
        return out


def refine(candidates: Sequence[int], store: np.ndarray, trapdoor: np.ndarray, k: int) -> tuple[list[int], int]:
    """Best ``k`` of ``candidates`` (closest first) and the number of comparisons used."""
    count = 0

    def z(o: int, p: int) -> float:
        nonlocal count
        count += 1
        return dce.z_value(store[o], store[p], trapdoor)

    def farther(a: int, b: int) -> bool:
        v = z(a, b)
        return v > 0 or (v == 0 and a > b)

    heap = ComparatorMaxHeap(farther)
    for p in candidates:
        if len(heap) < k:
            heap.push(p)
            continue
        # Z(o, p) > 0 means p is closer than the current worst o; exact ties go to the lower id
        o = heap.top()
        v = z(o, p)
        if v > 0 or (v == 0 and p < o):
            heap.replace_top(p)
    return heap.drain_ascending(), count


def search(db: EncryptedDatabase, qc: QueryCiphertext, k_prime: int, ef_search: int,
           refine_phase: bool = True) -> SearchResult:
    if not k_prime >= qc.k >= 1:
        raise ValueError(f"need k_prime >= k >= 1, got k_prime={k_prime}, k={qc.k}")
    if ef_search < k_prime:
        raise ValueError(f"ef_search={ef_search} must be at least k_prime={k_prime}")
    if qc.sap_q.shape != (db.d,) or qc.trapdoor.shape != (dce.lanes(db.dce_d),):
        raise DimensionError("query ciphertext does not match database dimensions")
    t0 = time.perf_counter()
    raw = db.graph.search(db.sap, qc.sap_q, k_prime, ef_search)
    cand = list(dict.fromkeys(int(x) for x in raw))
    t1 = time.perf_counter()
    if refine_phase:
        ids, comps = refine(cand, db.dce, qc.trapdoor, qc.k)
    else:
        ids, comps = cand[: qc.k], 0
    t2 = time.perf_counter()
    stats = SearchStats(candidates=len(cand), comparisons=comps, elapsed=t2 - t0,
                        filter_time=t1 - t0, refine_time=t2 - t1)
    return SearchResult(ids=ids, stats=stats)


def make_queries(queries: np.ndarray, dce_key: dce.DceSecretKey, sap_key: dcpe.SapKey, k: int,
                 seed=None) -> list[QueryCiphertext]:
    """User side: trapdoor plus SAP ciphertext for each query vector."""
    rng = make_rng(seed)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    t = dce.trapgen_many(dce.pad_to_even(queries), dce_key, rng)
    s = dcpe.sap_encrypt_many(queries, sap_key, rng)
    return [QueryCiphertext(trapdoor=t[i], sap_q=s[i], k=k) for i in range(len(queries))]


# ---------------------------------------------------------------------------
# tuning


@dataclass
class KPrimeTuning:
    ratio: int
    reached: bool
    recall: float
    curve: list[dict]


def tune_k_prime(db: EncryptedDatabase, queries: Sequence[QueryCiphertext], ground_truth: np.ndarray,
                 k: int, target_recall: float, ratios: Sequence[int] = (1, 2, 4, 8, 16),
                 ef_grid: Sequence[int] = (16, 32, 64, 128, 256, 512, 1024, 2048)) -> KPrimeTuning:
    """Smallest ``Ratio_k = k'/k`` on the grid reaching ``target_recall`` at some ef_search."""
    if not len(queries):
        raise ValueError("need at least one query")
    curve = []
    best = None
    for ratio in sorted(ratios):
        kp = ratio * k
        for ef in sorted({max(e, kp) for e in ef_grid}):
            t0 = time.perf_counter()
            res = [search(db, qc, kp, ef).ids for qc in queries]
            dt = time.perf_counter() - t0
            rec = mean_recall(res, ground_truth, k)
            curve.append({"ratio": ratio, "k_prime": kp, "ef_search": ef, "recall": rec, "qps": len(queries) / dt})
            if best is None or rec > best[1]:
                best = (ratio, rec)
            if rec >= target_recall:
                return KPrimeTuning(ratio=ratio, reached=True, recall=rec, curve=curve)
    return KPrimeTuning(ratio=best[0], reached=False, recall=best[1], curve=curve)


def filter_recall(base: np.ndarray, queries: np.ndarray, ground_truth: np.ndarray, k: int, beta: float,
                  s: float = dcpe.REFERENCE_S, seed: int = 0) -> float:
    """Filter-only recall upper bound: exact k-NN over SAP ciphertexts (exhaustive beam)."""
    key = dcpe.SapKey(s=s, beta=beta, d=base.shape[1], max_abs=float(np.max(np.abs(base))))
    # derived stream, so the noise never replays a generator the data came from
    rng = np.random.default_rng(derive_seeds(seed, 1)[0])
    enc_base = dcpe.sap_encrypt_many(base, key, rng)
    enc_q = dcpe.sap_encrypt_many(queries, key, rng)
    found = brute_force_knn(enc_base, enc_q, k)
    return mean_recall(found, ground_truth, k)


@dataclass
class BetaTuning:
    beta: float
    recall: float
    reached: bool
    history: list[tuple[float, float]]


def tune_beta(base: np.ndarray, queries: np.ndarray, ground_truth: np.ndarray, k: int,
              target_filter_recall: float = 0.5, tol: float = 0.05, s: float = dcpe.REFERENCE_S,
              seed: int = 0, lo: float | None = None, hi: float | None = None,
              max_iter: int = 40) -> BetaTuning:
    """Bisection (in log beta) for a filter-only recall within ``tol`` of the target.

    The noise stream is re-seeded identically for every probe so recall is a
    deterministic, essentially monotone function of beta.
    """
    max_abs = float(np.max(np.abs(base)))
    d = base.shape[1]
    lo = lo if lo is not None else 1e-6 * max(max_abs, 1e-12)
    hi = hi if hi is not None else 8.0 * max_abs * np.sqrt(d)
    history = []

    def probe(beta):
        r = filter_recall(base, queries, ground_truth, k, beta, s=s, seed=seed)
        history.append((beta, r))
        return r

    r_lo, r_hi = probe(lo), probe(hi)
    target = target_filter_recall
    if abs(r_lo - target) <= tol:
        return BetaTuning(lo, r_lo, True, history)
    if abs(r_hi - target) <= tol:
        return BetaTuning(hi, r_hi, True, history)
    if r_lo < target - tol or r_hi > target + tol:
        beta, r = min(history, key=lambda h: abs(h[1] - target))
        return BetaTuning(beta, r, False, history)
    for _ in range(max_iter):
        mid = float(np.sqrt(lo * hi))
        r = probe(mid)
        if abs(r - target) <= tol:
            return BetaTuning(mid, r, True, history)
        if r > target:
            lo = mid
        else:
            hi = mid
    beta, r = min(history, key=lambda h: abs(h[1] - target))
    return BetaTuning(beta, r, abs(r - target) <= tol, history)


# ---------------------------------------------------------------------------
# wire format


def write_query(f: BinaryIO, qc: QueryCiphertext, k_prime: int, ef_search: int) -> None:
    d = qc.sap_q.shape[0]
    f.write(QUERY_MAGIC)
    f.write(struct.pack("<IIII", d, qc.k, k_prime, ef_search))
    f.write(np.ascontiguousarray(qc.trapdoor, "<f8").tobytes())
    f.write(np.ascontiguousarray(qc.sap_q, "<f8").tobytes())


def read_query(f: BinaryIO) -> tuple[QueryCiphertext, int, int]:
    expect_magic(f, QUERY_MAGIC)
    d, k, k_prime, ef = struct.unpack("<IIII", read_exact(f, 16))
    lanes = dce.lanes(d + d % 2)
    t = np.frombuffer(read_exact(f, 8 * lanes), "<f8").astype(np.float64)
    s = np.frombuffer(read_exact(f, 8 * d), "<f8").astype(np.float64)
    return QueryCiphertext(trapdoor=t, sap_q=s, k=k), k_prime, ef


def read_queries(path) -> list[tuple[QueryCiphertext, int, int]]:
    raw = Path(path).read_bytes()
    f = io.BytesIO(raw)
    out = []
    while f.tell() < len(raw):
        out.append(read_query(f))
    return out


def write_response(f: BinaryIO, ids: Sequence[int]) -> None:
    f.write(RESPONSE_MAGIC)
    f.write(struct.pack("<I", len(ids)))
    f.write(np.asarray(ids, "<u4").tobytes())


def read_response(f: BinaryIO) -> list[int]:
    expect_magic(f, RESPONSE_MAGIC)
    (k,) = struct.unpack("<I", read_exact(f, 4))
    return [int(x) for x in np.frombuffer(read_exact(f, 4 * k), "<u4")]
