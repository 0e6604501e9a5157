"""Acceptance suite: one test per primary criterion.

Each test records its measurement through the ``criterion`` fixture; the
terminal summary prints one PASS/FAIL line per criterion. The end-to-end and
scalability checks build a 10^5 x 128 index and take several minutes.
"""

import io
import json
import time

import numpy as np
import pytest

from ppanns import attacks, bench, dce, dcpe, search
from ppanns.common import derive_seeds
from ppanns.evaluation import brute_force_knn, mean_recall, read_fvecs
from ppanns.graph import REFERENCE_EF_CONSTRUCTION, REFERENCE_M, HnswGraph

K = 10
RATIOS = (1, 2, 4, 8, 16)
EF_GRID = (128, 256, 512, 1024, 2048)
FINE_EF_GRID = tuple(int(round(64 * 2 ** (i / 2))) for i in range(11))  # 64 .. 2048


def unit_vectors(n, d, seed):
    x = np.random.default_rng(seed).standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def encrypted_db(base, beta, seed, m=16, ef_construction=200):
    key_seed, sap_seed, dce_seed, graph_seed = derive_seeds(seed, 4)
    d = base.shape[1]
    dk = dce.keygen(d + d % 2, key_seed)
    sk = dcpe.SapKey(s=dcpe.REFERENCE_S, beta=float(beta), d=d, max_abs=float(np.abs(base).max()))
    sap = dcpe.sap_encrypt_many(base, sk, np.random.default_rng(sap_seed))
    store = dce.encrypt_many(dce.pad_to_even(base), dk, np.random.default_rng(dce_seed))
    graph = HnswGraph.build(sap, m=m, ef_construction=ef_construction, seed=graph_seed)
    return search.EncryptedDatabase(sap=sap, dce=store, graph=graph, d=d), dk, sk


def grid(db, qcs, truth, ratios=RATIOS, efs=EF_GRID, stop_at=None):
    rows = []
    for ratio in ratios:
        kp = ratio * K
        for ef in efs:
            if ef < kp:
                continue
            row = bench.measure(db, qcs, truth, K, kp, ef, reps=1)
            rows.append({"ratio": ratio, "ef": ef, **row})
            if stop_at is not None and row["recall_at_k"] >= stop_at:
                break
    return rows


# --- DCE ------------------------------------------------------------------


@pytest.mark.parametrize("d", [4, 32, 128, 960])
def test_dce_exactness(d, criterion):
    trials = 1_000_000
    rng = np.random.default_rng(derive_seeds(100 + d, 1)[0])
    sk = dce.keygen(d, rng)
    x = rng.standard_normal((1000, d))
    q = rng.standard_normal((300, d))
    store = dce.encrypt_many(x, sk, rng)
    traps = dce.trapgen_many(q, sk, rng)
    o, p, qi = rng.integers(0, 1000, trials), rng.integers(0, 1000, trials), rng.integers(0, 300, trials)
    z = dce.distance_comp_indexed(store, traps, o, p, qi)
    dist = ((q[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    do, dp = dist[qi, o], dist[qi, p]
    gap = np.abs(do - dp) / np.maximum(np.maximum(do, dp), 1e-300)
    eligible = gap > 1e-9
    agree = np.sign(z[eligible]) == np.sign(do[eligible] - dp[eligible])
    criterion(f"exactness d={d}", f"{int(agree.sum())}/{int(eligible.sum())} triples agree")
    assert agree.all()


def test_dce_sizes_and_cost(criterion):
    d = 128
    rng = np.random.default_rng(7)
    sk = dce.keygen(d, 7)
    c = dce.encrypt_db(rng.standard_normal(d), sk, rng)
    t = dce.trapgen(rng.standard_normal(d), sk, rng)
    cost = bench.comparison_cost(d)
    ok_sizes = c.size == 4 * (2 * d + 16) == 8 * d + 64 and t.size == 2 * d + 16
    ok_mac = dce.comparison_op_counts(d)["mac"] == 4 * d + 32 == cost["mac"]
    criterion("dce sizes and cost", f"ciphertext={c.size} trapdoor={t.size} mac={cost['mac']} "
                                    f"dce/plain={cost['ratio']:.2f}x ({cost['dce_ns']:.1f}ns vs {cost['plain_ns']:.1f}ns)")
    assert ok_sizes and ok_mac
    assert 2.0 <= cost["ratio"] <= 10.0


# --- DCPE -----------------------------------------------------------------


def test_dcpe_beta_dcp(criterion):
    t0 = time.perf_counter()
    d, beta = 16, 0.5
    rng = np.random.default_rng(21)
    key = dcpe.SapKey(s=dcpe.REFERENCE_S, beta=beta, d=d, max_abs=1.0)
    triples = []
    need = 100_000
    while sum(len(t) for t in triples) < need:
        o, p, q = rng.uniform(-1, 1, (3, 50_000, d))
        do = np.linalg.norm(o - q, axis=1)
        dp = np.linalg.norm(p - q, axis=1)
        keep = dp - do > beta
        triples.append(np.stack([o[keep], p[keep], q[keep]], axis=1))
    tri = np.concatenate(triples)[:need]
    enc = [dcpe.sap_encrypt_many(tri[:, j], key, rng) for j in range(3)]
    eo = np.linalg.norm(enc[0] - enc[2], axis=1)
    ep = np.linalg.norm(enc[1] - enc[2], axis=1)
    violations = int(np.sum(~(eo < ep)))
    x = rng.uniform(-1, 1, (10_000, d))
    radius = np.linalg.norm(dcpe.sap_encrypt_many(x, key, rng) - key.s * x, axis=1).max()
    elapsed = time.perf_counter() - t0
    criterion("beta-DCP", f"{violations} violations in {need} triples; max noise {radius:.3f} "
                          f"<= s*beta/4={key.noise_radius:.3f}; {elapsed:.1f}s")
    assert violations == 0 and radius <= key.noise_radius and elapsed < 30


# --- refine ---------------------------------------------------------------


def test_refine_optimality(criterion):
    t0 = time.perf_counter()
    n, d, nq = 10_000, 64, 1000
    x = np.random.default_rng(31).standard_normal((n + nq, d))
    base, queries = x[:n], x[n:]
    db, dk, sk = encrypted_db(base, beta=2.0, seed=32)
    qcs = search.make_queries(queries, dk, sk, K, seed=33)
    exact = 0
    for q, qc in zip(queries, qcs):
        cand = db.graph.search(db.sap, qc.sap_q, 4 * K, 128)
        ids = np.asarray(cand)
        dist = np.sum((base[ids] - q) ** 2, axis=1)
        want = ids[np.lexsort((ids, dist))][:K].tolist()
        exact += search.search(db, qc, 4 * K, 128).ids == want
    elapsed = time.perf_counter() - t0
    criterion("refine optimality", f"{exact}/{nq} queries equal the plaintext top-{K} of their candidates; "
                                   f"{elapsed:.1f}s")
    assert exact == nq and elapsed < 60


# --- end-to-end and scalability over random unit vectors ------------------


def _tuned_db(n, seed, m=16, ef_construction=200):
    data = unit_vectors(n + 200, 128, seed)
    base, queries = data[:n], data[n:]
    gt = brute_force_knn(base, queries, K)
    tuned = search.tune_beta(base, queries, gt, K, 0.5, seed=seed + 1)
    db, dk, sk = encrypted_db(base, tuned.beta, seed=seed + 2, m=m, ef_construction=ef_construction)
    qcs = search.make_queries(queries, dk, sk, K, seed=seed + 3)
    return tuned, db, qcs, gt


@pytest.fixture(scope="module")
def large():
    t0 = time.perf_counter()
    tuned, db, qcs, gt = _tuned_db(100_000, 500)
    rows = grid(db, qcs, gt)
    return tuned, rows, time.perf_counter() - t0


@pytest.mark.slow
def test_end_to_end_recall(large, criterion):
    tuned, rows, elapsed = large
    hits = [r for r in rows if r["recall_at_k"] >= 0.9]
    best = max(rows, key=lambda r: r["recall_at_k"])
    first = min(hits, key=lambda r: (r["ratio"], r["ef"])) if hits else best
    criterion("end-to-end recall", f"beta={tuned.beta:.4g} filter recall@10={tuned.recall:.3f}; "
                                   f"Ratio_k={first['ratio']} ef={first['ef']} recall@10={first['recall_at_k']:.3f} "
                                   f"qps={first['qps']:.1f}; {elapsed:.0f}s incl. build")
    assert 0.45 <= tuned.recall <= 0.55
    assert hits
    assert elapsed < 600


@pytest.mark.slow
def test_scalability(criterion):
    # reference build settings (m=40, efC=600): at m=16 the 1e5 graph needs a disproportionate ef for recall 0.9
    rows = {}
    for n, seed in ((10_000, 700), (100_000, 500)):
        _, db, qcs, gt = _tuned_db(n, seed, m=REFERENCE_M, ef_construction=REFERENCE_EF_CONSTRUCTION)
        rows[n] = grid(db, qcs, gt, ratios=(4, 8, 16), efs=FINE_EF_GRID, stop_at=0.95)
    rows_small, rows_large = rows[10_000], rows[100_000]

    def cheapest(rows):
        ok = [r for r in rows if r["recall_at_k"] >= 0.9]
        return min(ok, key=lambda r: r["p50_ms"]) if ok else None

    a, b = cheapest(rows_small), cheapest(rows_large)
    if a is None or b is None:
        criterion("scalability", "recall 0.9 not reached at one of the sizes")
        pytest.fail("no grid point at recall 0.9")
    growth = b["p50_ms"] / a["p50_ms"]
    criterion("scalability", f"p50 {a['p50_ms']:.2f}ms (n=1e4, Ratio_k={a['ratio']}, ef={a['ef']}, qps={a['qps']:.0f}) -> "
                             f"{b['p50_ms']:.2f}ms (n=1e5, Ratio_k={b['ratio']}, ef={b['ef']}, qps={b['qps']:.0f}); "
                             f"growth {growth:.2f}x (m={REFERENCE_M}, efC={REFERENCE_EF_CONSTRUCTION})")
    assert growth <= 5.0


# --- monotone trends --------------------------------------------------------


def test_monotone_trends(criterion):
    seeds = range(5)
    beta_curves, ratio_curves = [], []
    for seed in seeds:
        data = unit_vectors(5200, 32, 900 + seed)
        base, queries = data[:5000], data[5000:]
        gt = brute_force_knn(base, queries, K)
        tuned = search.tune_beta(base, queries, gt, K, 0.5, seed=seed)
        beta_curves.append([search.filter_recall(base, queries, gt, K, f * tuned.beta, seed=seed)
                            for f in (0.5, 1, 2, 4)])
        db, dk, sk = encrypted_db(base, tuned.beta, seed=950 + seed, m=12, ef_construction=100)
        qcs = search.make_queries(queries, dk, sk, K, seed=seed)
        ratio_curves.append([mean_recall([search.search(db, qc, r * K, 256).ids for qc in qcs], gt, K)
                             for r in RATIOS])

    def violations(curves, sign):
        c = np.asarray(curves)
        return (sign * np.diff(c, axis=1) < 0).sum(axis=0)

    vb = violations(beta_curves, -1)
    vr = violations(ratio_curves, +1)
    mean_b = np.mean(beta_curves, axis=0)
    mean_r = np.mean(ratio_curves, axis=0)
    criterion("monotone trends", f"filter recall over beta x(0.5,1,2,4) {np.round(mean_b, 3).tolist()} "
                                 f"violations/pair {vb.tolist()}; recall over Ratio_k {list(RATIOS)} "
                                 f"{np.round(mean_r, 3).tolist()} violations/pair {vr.tolist()}")
    assert vb.max() <= 1 and vr.max() <= 1


# --- attacks ----------------------------------------------------------------


@pytest.mark.parametrize("variant", list(attacks.Variant))
def test_kpa_suite(variant, criterion):
    t0 = time.perf_counter()
    outs = [attacks.run_attack(variant, 16, seed=s) for s in range(100)]
    good = sum(o.ok and o.query_error <= 1e-6 and o.db_error <= 1e-6 for o in outs)
    worst_q = max(o.query_error for o in outs)
    worst_db = max(o.db_error for o in outs)
    elapsed = time.perf_counter() - t0
    criterion(f"KPA {variant.value}", f"{good}/100 recovered (leaks={attacks.required_leaks(variant, 16)}); "
                                      f"worst query err {worst_q:.2e}, db err {worst_db:.2e}; {elapsed:.1f}s")
    assert good >= 99 and elapsed < 120


# --- maintenance ------------------------------------------------------------


# a graph-limited operating point, so a damaged index would show up in recall
MAINT_KP, MAINT_EF = 2 * K, 2 * K


def _recall(db, qcs, gt):
    return mean_recall([search.search(db, qc, MAINT_KP, MAINT_EF).ids for qc in qcs], gt, K)


def test_index_maintenance(criterion):
    n, d, moved = 10_000, 32, 100
    gaps, levels = [], []
    for seed in range(3):
        x = np.random.default_rng(1000 + seed).standard_normal((n + 200, d))
        base, queries = x[:n], x[n:]
        gt = brute_force_knn(base, queries, K)
        beta = search.tune_beta(base, queries, gt, K, 0.5, seed=seed).beta
        # insert: index the first n - 1% then add the rest one by one
        full, dk, sk = encrypted_db(base, beta, seed=1100 + seed)
        partial = search.EncryptedDatabase(
            sap=full.sap[:n - moved].copy(), dce=full.dce[:n - moved].copy(),
            graph=HnswGraph.build(full.sap[:n - moved], 16, 200, seed=seed), d=d)
        gen = np.random.default_rng(seed)
        for i in range(n - moved, n):
            partial.insert(full.sap[i], full.dce[i], rng=gen)
        qcs = search.make_queries(queries, dk, sk, K, seed=seed)
        r_ins, r_full = _recall(partial, qcs, gt), _recall(full, qcs, gt)
        ins_gap = abs(r_ins - r_full)
        # delete: drop 1% from the full index and compare with a rebuild over the survivors
        gone = np.random.default_rng(seed).choice(n, moved, replace=False)
        for v in gone:
            full.delete(int(v))
        keep = np.setdiff1d(np.arange(n), gone)
        rebuilt = search.EncryptedDatabase(
            sap=full.sap[keep].copy(), dce=full.dce[keep].copy(),
            graph=HnswGraph.build(full.sap[keep], 16, 200, seed=seed), d=d)
        gt_keep = brute_force_knn(base[keep], queries, K)
        gt_full_ids = keep[gt_keep]
        r_del = _recall(full, qcs, gt_full_ids)
        r_new = mean_recall([keep[search.search(rebuilt, qc, MAINT_KP, MAINT_EF).ids] for qc in qcs], gt_full_ids, K)
        gaps.append((ins_gap, abs(r_del - r_new)))
        levels.append(r_full)
    gaps = np.asarray(gaps)
    criterion("index maintenance", f"insert gaps {np.round(gaps[:, 0], 4).tolist()}, "
                                   f"delete gaps {np.round(gaps[:, 1], 4).tolist()} at recall ~{np.mean(levels):.3f} "
                                   f"(Ratio_k=2, ef=20; 3 seeds, 1% of 1e4)")
    assert gaps.max() <= 0.02


# --- serialization ------------------------------------------------------------


def test_serialization(tmp_path, criterion):
    cfg = bench.RunConfig(n=500, d=9, n_queries=5, k=5, beta=0.4, m=8, ef_construction=40, seed=2)
    bench.owner_pipeline(cfg, tmp_path / "a")
    src = tmp_path / "a"
    out = tmp_path / "b"
    out.mkdir()
    dce.DceSecretKey.load(src / "dce.key").save(out / "dce.key")
    dcpe.SapKey.load(src / "sap.key").save(out / "sap.key")
    search.EncryptedDatabase.load(src).save(out)
    names = ["dce.key", "sap.key", "dce.ctx", "sap.ctx", "graph.hnsw", "database.json"]
    same = [n for n in names if (src / n).read_bytes() == (out / n).read_bytes()]
    dk, sk = bench.load_user_keys(src)
    qc = search.make_queries(np.zeros((1, 9)), dk, sk, 5, seed=1)[0]
    buf = io.BytesIO()
    search.write_query(buf, qc, 20, 40)
    back, kp, ef = search.read_query(io.BytesIO(buf.getvalue()))
    again = io.BytesIO()
    search.write_query(again, back, kp, ef)
    resp = io.BytesIO()
    search.write_response(resp, [4, 2, 0])
    wire_ok = again.getvalue() == buf.getvalue() and search.read_response(io.BytesIO(resp.getvalue())) == [4, 2, 0]
    # three 2-d float32 records: [1, 2], [-0.5, 0], [3.25, -8]
    raw = bytes.fromhex("020000000000803f00000040" "02000000000000bf00000000" "0200000000005040000000c1")
    (tmp_path / "h.fvecs").write_bytes(raw)
    fvecs_ok = read_fvecs(tmp_path / "h.fvecs").tolist() == [[1.0, 2.0], [-0.5, 0.0], [3.25, -8.0]]
    manifest_ok = json.loads((src / "manifest.json").read_text())["padded"] is True
    criterion("serialization", f"{len(same)}/{len(names)} artifacts byte-identical; wire={wire_ok}; "
                               f"fvecs={fvecs_ok}")
    assert len(same) == len(names) and wire_ok and fvecs_ok and manifest_ok
