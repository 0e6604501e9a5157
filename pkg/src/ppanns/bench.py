"""Owner-side artifact pipeline and the recall/QPS benchmark harness."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from numba import njit

from . import dce, dcpe, search
from .common import derive_seeds
from .evaluation import Dataset, load_dataset, mean_recall, synthetic
from .graph import HnswGraph

MANIFEST_VERSION = 1
CSV_SCHEMA = "ppanns-bench/1"
CSV_COLUMNS = ["schema", "mode", "ratio_k", "k_prime", "ef_search", "beta", "recall_at_k", "qps",
               "mean_dce_comparisons", "p50_ms", "p95_ms"]

# artifact name -> (file name, role that may read it)
ARTIFACTS = {
    "dce_key": ("dce.key", "owner"),
    "sap_key": ("sap.key", "owner"),
    "dce_store": ("dce.ctx", "server"),
    "sap_store": ("sap.ctx", "server"),
    "graph": ("graph.hnsw", "server"),
    "database": ("database.json", "server"),
}


@dataclass
class RunConfig:
    base: str | None = None
    queries: str | None = None
    ground_truth: str | None = None
    # synthetic fallback when no dataset paths are given
    n: int = 10_000
    d: int = 64
    n_queries: int = 100
    clusters: int = 0
    k: int = 10
    ef_grid: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 512])
    ratio_grid: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16])
    beta: float | None = None
    target_filter_recall: float = 0.5
    s: float = dcpe.REFERENCE_S
    m: int = 16
    ef_construction: int = 200
    seed: int = 0
    threads: int | None = None
    reps: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if not self.ef_grid or not self.ratio_grid:
            raise ValueError("grids must be non-empty")
        if self.reps < 1:
            raise ValueError("reps must be positive")

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build from string key/value pairs (config file or CLI overrides)."""
        kinds = {f.name: f for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise KeyError(f"unknown config key {key!r}")
            out[key] = _coerce(kinds[key].name, raw)
        return cls(**out)

    def dataset(self) -> Dataset:
        if self.base:
            if not self.queries:
                raise ValueError("a base file needs a query file")
            return load_dataset(self.base, self.queries, self.ground_truth)
        return synthetic(self.n, self.d, self.n_queries, seed=self.seed, clusters=self.clusters)


def _coerce(name: str, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if name in ("ef_grid", "ratio_grid"):
        return [int(x) for x in raw.replace(",", " ").split()]
    if name in ("base", "queries", "ground_truth"):
        return raw or None
    if name == "beta":
        return None if raw.lower() in ("", "auto", "none") else float(raw)
    if name in ("target_filter_recall", "s"):
        return float(raw)
    if name == "threads":
        return None if raw.lower() in ("", "auto", "none") else int(raw)
    return int(raw)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class OwnerArtifacts:
    directory: Path
    manifest: dict
    beta: float

    def path(self, name: str) -> Path:
        return self.directory / ARTIFACTS[name][0]


def owner_pipeline(config: RunConfig, out_dir, dataset: Dataset | None = None) -> OwnerArtifacts:
    """Keygen, encrypt both stores, build the graph and write everything with a manifest."""
    ds = dataset or config.dataset()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    key_seed, dce_seed, sap_seed, graph_seed, beta_seed = derive_seeds(config.seed, 5)
    d = ds.d
    beta = config.beta
    if beta is None:
        ds.with_ground_truth(config.k)
        tuned = search.tune_beta(ds.base, ds.queries, ds.ground_truth, config.k,
                                 config.target_filter_recall, s=config.s, seed=beta_seed)
        beta = tuned.beta
    dce_d = d + d % 2
    dk = dce.keygen(dce_d, key_seed)
    sk = dcpe.SapKey(s=config.s, beta=float(beta), d=d, max_abs=float(np.max(np.abs(ds.base))))
    sap = dcpe.sap_encrypt_many(ds.base, sk, np.random.default_rng(sap_seed))
    store = dce.encrypt_many(dce.pad_to_even(ds.base), dk, np.random.default_rng(dce_seed))
    graph = HnswGraph.build(sap, m=config.m, ef_construction=config.ef_construction, seed=graph_seed)
    db = search.EncryptedDatabase(sap=sap, dce=store, graph=graph, d=d)
    db.save(out)
    dk.save(out / ARTIFACTS["dce_key"][0])
    sk.save(out / ARTIFACTS["sap_key"][0])
    manifest = write_manifest(out, beta=float(beta), s=config.s)
    return OwnerArtifacts(out, manifest, float(beta))


def write_manifest(directory, **extra) -> dict:
    """Hash every artifact present in ``directory`` into ``manifest.json``."""
    out = Path(directory)
    meta = json.loads((out / "database.json").read_text())
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "n": meta["n"],
        "d": meta["d"],
        "padded": meta["padded"],
        "format_versions": {"dce_key": dce.KEY_VERSION, "graph": 1, "database": meta["format_version"]},
        **extra,
        "artifacts": {
            name: {"file": fname, "role": role, "sha256": sha256_file(out / fname)}
            for name, (fname, role) in ARTIFACTS.items()
            if (out / fname).exists()
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def verify_manifest(directory) -> list[str]:
    """Names of artifacts whose content hash no longer matches the manifest."""
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    bad = []
    for name, entry in manifest["artifacts"].items():
        p = src / entry["file"]
        if not p.exists() or sha256_file(p) != entry["sha256"]:
            bad.append(name)
    return bad


def load_server(directory) -> search.EncryptedDatabase:
    """Server view: only artifacts tagged ``server`` in the manifest are opened."""
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    roles = {e["file"]: e["role"] for e in manifest["artifacts"].values()}
    for f in ("sap.ctx", "dce.ctx", "graph.hnsw", "database.json"):
        if roles.get(f) != "server":
            raise PermissionError(f"{f} is not a server artifact")
    return search.EncryptedDatabase.load(src)


def load_user_keys(directory) -> tuple[dce.DceSecretKey, dcpe.SapKey]:
    src = Path(directory)
    return dce.DceSecretKey.load(src / "dce.key"), dcpe.SapKey.load(src / "sap.key")


@dataclass
class BenchReport:
    k: int
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({"schema": CSV_SCHEMA, **{c: r[c] for c in CSV_COLUMNS[1:]}})
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'mode':<7}{'Ratio_k':>8}{'k_prime':>8}{'ef':>6}{'recall@' + str(self.k):>11}{'QPS':>10}{'DCE cmp':>9}{'p50 ms':>9}{'p95 ms':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r['mode']:<7}{r['ratio_k']:>8}{r['k_prime']:>8}{r['ef_search']:>6}{r['recall_at_k']:>11.4f}"
                f"{r['qps']:>10.1f}{r['mean_dce_comparisons']:>9.1f}{r['p50_ms']:>9.3f}{r['p95_ms']:>9.3f}"
            )
        return "\n".join(lines)

    def rows_for(self, mode: str = "full") -> list[dict]:
        return [r for r in self.rows if r["mode"] == mode]


def measure(db: search.EncryptedDatabase, queries: list[search.QueryCiphertext], truth: np.ndarray, k: int,
            k_prime: int, ef: int, reps: int = 5, refine: bool = True) -> dict:
    """Single-threaded query loop; QPS over loop wall time averaged across ``reps``."""
    lat = []
    walls = []
    results = None
    for _ in range(reps):
        t0 = time.perf_counter()
        out = []
        for qc in queries:
            s = time.perf_counter()
            out.append(search.search(db, qc, k_prime, ef, refine_phase=refine))
            lat.append(time.perf_counter() - s)
        walls.append(time.perf_counter() - t0)
        results = out
    lat_ms = np.asarray(lat) * 1e3
    return {
        "recall_at_k": mean_recall([r.ids for r in results], truth, k),
        "qps": len(queries) / float(np.mean(walls)),
        "mean_dce_comparisons": float(np.mean([r.stats.comparisons for r in results])),
        "p50_ms": float(np.percentile(lat_ms, 50)),
        "p95_ms": float(np.percentile(lat_ms, 95)),
    }


def run_bench(config: RunConfig, artifacts_dir, dataset: Dataset | None = None) -> BenchReport:
    """Grid over Ratio_k x ef_search plus the filter-only curve over ef_search."""
    src = Path(artifacts_dir)
    if not (src / "manifest.json").exists():
        raise FileNotFoundError(f"no manifest in {src}; run the owner pipeline first")
    ds = (dataset or config.dataset()).with_ground_truth(config.k)
    db = load_server(src)
    dk, sk = load_user_keys(src)
    beta = json.loads((src / "manifest.json").read_text())["beta"]
    query_seed = derive_seeds(config.seed, 6)[5]
    qcs = search.make_queries(ds.queries, dk, sk, config.k, seed=query_seed)
    truth = ds.ground_truth[:, :config.k]
    report = BenchReport(k=config.k)
    k = config.k
    for ef in sorted(config.ef_grid):
        if ef < k:
            continue
        row = measure(db, qcs, truth, k, k, ef, config.reps, refine=False)
        report.rows.append({"mode": "filter", "ratio_k": 1, "k_prime": k, "ef_search": ef, "beta": beta, **row})
    for ratio in sorted(config.ratio_grid):
        kp = ratio * k
        for ef in sorted(config.ef_grid):
            if ef < kp:
                continue
            row = measure(db, qcs, truth, k, kp, ef, config.reps)
            report.rows.append({"mode": "full", "ratio_k": ratio, "k_prime": kp, "ef_search": ef, "beta": beta, **row})
    return report


def comparison_cost(d: int = 128, trials: int = 1_000_000, pool: int = 256, seed: int = 0) -> dict:
    """Per-call latency of one DCE comparison versus one plaintext squared distance.

    Both kernels run inside compiled loops over the same random index pairs into
    a cache-resident pool, so call overhead and memory misses do not dominate.
    """
    rng = np.random.default_rng(seed)
    sk = dce.keygen(d, seed)
    x = rng.standard_normal((pool, d))
    store = dce.encrypt_many(x, sk, rng)
    t = dce.trapgen_many(rng.standard_normal(d), sk, rng)[0]
    o = rng.integers(0, pool, trials)
    p = rng.integers(0, pool, trials)
    _dce_loop(store, t, o[:10], p[:10])
    _plain_loop(x, o[:10], p[:10])
    best_dce = min(_timed(_dce_loop, store, t, o, p) for _ in range(5))
    best_plain = min(_timed(_plain_loop, x, o, p) for _ in range(5))
    counts = dce.comparison_op_counts(d)
    return {
        "d": d,
        "dce_ns": best_dce / trials * 1e9,
        "plain_ns": best_plain / trials * 1e9,
        "ratio": best_dce / best_plain,
        "mac": counts["mac"],
        "ciphertext_reals": 4 * dce.lanes(d),
        "trapdoor_reals": dce.lanes(d),
    }


def _timed(fn, *args) -> float:
    t0 = time.perf_counter()
    fn(*args)
    return time.perf_counter() - t0


@njit(cache=True)
def _plain_sqd(a, b):
    s = 0.0
    for i in range(a.shape[0]):
        diff = a[i] - b[i]
        s += diff * diff
    return s


@njit(cache=True)
def _plain_loop(x, o, p):
    acc = 0.0
    for j in range(o.shape[0]):
        acc += _plain_sqd(x[o[j]], x[p[j]])
    return acc


@njit(cache=True)
def _dce_loop(store, t, o, p):
    acc = 0.0
    for j in range(o.shape[0]):
        acc += dce.distance_comp_kernel(store[o[j]], store[p[j]], t)
    return acc


def config_dict(config: RunConfig) -> dict:
    return asdict(config)
