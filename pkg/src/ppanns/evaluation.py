"""Dataset I/O, exact k-NN ground truth and recall."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def _read_vecs(path, dtype: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw:
        return np.empty((0, 0), dtype=np.float64 if dtype == "<f4" else np.int64)
    if len(raw) < 4:
        raise ValueError("truncated record header")
    dim = int(np.frombuffer(raw[:4], dtype="<i4")[0])
    if dim <= 0:
        raise ValueError(f"invalid record dimension {dim}")
    rec = 4 + 4 * dim
    if len(raw) % rec:
        raise ValueError(f"file length {len(raw)} is not a multiple of record size {rec}")
    words = np.frombuffer(raw, dtype="<i4").reshape(-1, dim + 1)
    if np.any(words[:, 0] != dim):
        raise ValueError("inconsistent record dimensions")
    body = np.ascontiguousarray(words[:, 1:])
    if dtype == "<f4":
        return body.view("<f4").astype(np.float64)
    return body.astype(np.int64)


def read_fvecs(path) -> np.ndarray:
    return _read_vecs(path, "<f4")


def read_ivecs(path) -> np.ndarray:
    return _read_vecs(path, "<i4")


def _write_vecs(path, data: np.ndarray, dtype: str) -> None:
    data = np.asarray(data)
    n, d = data.shape
    out = np.empty((n, d + 1), dtype="<i4")
    out[:, 0] = d
    out[:, 1:] = data.astype(dtype).view("<i4") if dtype == "<f4" else data.astype("<i4")
    Path(path).write_bytes(out.tobytes())


def write_fvecs(path, data) -> None:
    _write_vecs(path, np.asarray(data), "<f4")


def write_ivecs(path, data) -> None:
    _write_vecs(path, np.asarray(data), "<i4")


def worker_count(threads: int | None = None) -> int:
    env = os.environ.get("PPANN_THREADS")
    if env:
        return max(1, int(env))
    return max(1, threads or os.cpu_count() or 1)


def _knn_chunk(base: np.ndarray, norms: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    scores = norms[None, :] - 2.0 * queries @ base.T
    n = base.shape[0]
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for i, row in enumerate(scores):
        if k < n:
            kth = np.partition(row, k - 1)[k - 1]
            # widen past the k-th score so boundary ties (and rounding in the norm trick) are all kept
            slack = 1e-9 * (abs(kth) + norms.max() + queries[i] @ queries[i]) + 1e-12
            ids = np.flatnonzero(row <= kth + slack)
        else:
            ids = np.arange(n)
        d = np.sum((base[ids] - queries[i]) ** 2, axis=1)
        out[i] = ids[np.lexsort((ids, d))][:k]
    return out


def brute_force_knn(base, q, k: int, threads: int | None = None) -> np.ndarray:
    """Exact top-k ids by squared distance, ties broken by ascending id.

    ``q`` may be one vector (returns ``(k,)``) or a batch (returns ``(m, k)``).
    """
    base = np.asarray(base, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if k > base.shape[0]:
        raise ValueError(f"k={k} exceeds database size {base.shape[0]}")
    if k < 1:
        raise ValueError("k must be positive")
    norms = np.einsum("ij,ij->i", base, base)
    chunks = [q[i:i + 256] for i in range(0, q.shape[0], 256)]
    workers = min(worker_count(threads), len(chunks)) or 1
    if workers == 1:
        parts = [_knn_chunk(base, norms, c, k) for c in chunks]
    else:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(lambda c: _knn_chunk(base, norms, c, k), chunks))
    out = np.vstack(parts) if parts else np.empty((0, k), np.int64)
    return out[0] if single else out


def recall_at_k(result_ids, truth_ids, k: int) -> float:
    truth = list(truth_ids)[:k]
    if len(truth) != k:
        raise ValueError(f"need {k} ground-truth ids, got {len(truth)}")
    return len(set(int(x) for x in result_ids) & set(int(x) for x in truth)) / k


def mean_recall(results, truth: np.ndarray, k: int) -> float:
    return float(np.mean([recall_at_k(r, t, k) for r, t in zip(results, truth)]))


@dataclass
class Dataset:
    base: np.ndarray
    queries: np.ndarray
    ground_truth: np.ndarray | None = None

    def __post_init__(self):
        if self.base.shape[1] != self.queries.shape[1]:
            raise ValueError("base and query dimensions differ")
        if self.ground_truth is not None and self.ground_truth.size and self.ground_truth.max() >= len(self.base):
            raise ValueError("ground truth references ids outside the base set")

    @property
    def d(self) -> int:
        return int(self.base.shape[1])

    def with_ground_truth(self, k: int) -> "Dataset":
        if self.ground_truth is None or self.ground_truth.shape[1] < k:
            self.ground_truth = brute_force_knn(self.base, self.queries, k)
        return self


def synthetic(n: int, d: int, n_queries: int, seed: int = 0, clusters: int = 0) -> Dataset:
    """Seeded Gaussian data; with ``clusters > 0`` a Gaussian mixture.

    Queries are drawn from the same distribution as the base set.
    """
    rng = np.random.default_rng(seed)
    if clusters:
        centers = rng.standard_normal((clusters, d)) * 3.0
        lab = rng.integers(0, clusters, n + n_queries)
        x = centers[lab] + rng.standard_normal((n + n_queries, d))
    else:
        x = rng.standard_normal((n + n_queries, d))
    return Dataset(base=x[:n], queries=x[n:])


def load_dataset(base_path, query_path, gt_path=None) -> Dataset:
    gt = read_ivecs(gt_path) if gt_path else None
    return Dataset(read_fvecs(base_path), read_fvecs(query_path), gt)
