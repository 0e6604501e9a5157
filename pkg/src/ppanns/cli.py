"""Command line entry point.

Roles map onto subcommands: the data owner runs ``keygen``, ``encrypt-db`` and
``build-index``; a user runs ``trapgen``; the server runs ``search``. ``bench``,
``tune-beta``, ``tune-kprime`` and ``attack-demo`` are experiment drivers.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import attacks, bench, dce, dcpe, search
from .common import derive_seeds
from .evaluation import brute_force_knn, read_fvecs, read_ivecs
from .graph import HnswGraph


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; an optional ``[section]`` header is accepted and ignored."""
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    out: dict[str, str] = {}
    for sec in cp.sections():
        out.update({k: v.strip().strip('"') for k, v in cp[sec].items()})
    return out


def _run_config(args, **overrides) -> bench.RunConfig:
    values = read_config(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    if args.threads is not None:
        values["threads"] = args.threads
    values.update({k: v for k, v in overrides.items() if v is not None})
    return bench.RunConfig.from_mapping(values)


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def cmd_keygen(args) -> int:
    out = Path(args.dir)
    out.mkdir(parents=True, exist_ok=True)
    base = read_fvecs(args.base)
    d = base.shape[1]
    key_seed, beta_seed = derive_seeds(_seed(args), 2)
    beta = args.beta
    if beta is None:
        if not args.queries:
            raise SystemExit("keygen needs --beta or --queries for tuning")
        q = read_fvecs(args.queries)
        gt = brute_force_knn(base, q, args.k, threads=args.threads)
        tuned = search.tune_beta(base, q, gt, args.k, args.target, s=args.s, seed=beta_seed)
        print(f"tuned beta={tuned.beta:.6g} filter recall@{args.k}={tuned.recall:.4f} reached={tuned.reached}")
        beta = tuned.beta
    dce.keygen(d + d % 2, key_seed).save(out / "dce.key")
    dcpe.sap_keygen(args.s, beta, float(np.max(np.abs(base))), d).save(out / "sap.key")
    print(f"wrote {out / 'dce.key'} and {out / 'sap.key'}")
    return 0


def cmd_encrypt_db(args) -> int:
    out = Path(args.dir)
    dk, sk = bench.load_user_keys(out)
    base = read_fvecs(args.base)
    dce_seed, sap_seed = derive_seeds(_seed(args), 2)
    dcpe.save_store(out / "sap.ctx", dcpe.sap_encrypt_many(base, sk, np.random.default_rng(sap_seed)))
    store = dce.encrypt_many(dce.pad_to_even(base), dk, np.random.default_rng(dce_seed))
    dce.save_store(out / "dce.ctx", store, dk.d)
    print(f"encrypted {base.shape[0]} vectors into {out}")
    return 0


def cmd_build_index(args) -> int:
    out = Path(args.dir)
    sap = dcpe.load_store(out / "sap.ctx")
    store, _ = dce.load_store(out / "dce.ctx")
    graph = HnswGraph.build(sap, m=args.m, ef_construction=args.ef_construction, seed=_seed(args))
    db = search.EncryptedDatabase(sap=sap, dce=store, graph=graph, d=sap.shape[1])
    db.save(out)
    sk = dcpe.SapKey.load(out / "sap.key") if (out / "sap.key").exists() else None
    bench.write_manifest(out, beta=sk.beta if sk else None, s=sk.s if sk else None)
    print(f"indexed {db.n} vectors (m={args.m}, ef_construction={args.ef_construction})")
    return 0


def cmd_trapgen(args) -> int:
    dk, sk = bench.load_user_keys(args.dir)
    q = read_fvecs(args.queries)
    qcs = search.make_queries(q, dk, sk, args.k, seed=_seed(args))
    with open(args.out, "wb") as f:
        for qc in qcs:
            search.write_query(f, qc, args.k_prime or args.k, args.ef_search)
    print(f"wrote {len(qcs)} query ciphertexts to {args.out}")
    return 0


def cmd_search(args) -> int:
    db = bench.load_server(args.dir)
    requests = search.read_queries(args.requests)
    out = open(args.out, "wb") if args.out else None
    try:
        for i, (qc, kp, ef) in enumerate(requests):
            res = search.search(db, qc, kp, ef, refine_phase=not args.no_refine)
            if out:
                search.write_response(out, res.ids)
            else:
                print(i, " ".join(map(str, res.ids)))
    finally:
        if out:
            out.close()
    return 0


def cmd_bench(args) -> int:
    cfg = _run_config(args, reps=args.reps)
    art = Path(args.dir)
    ds = cfg.dataset()
    if not (art / "manifest.json").exists() or args.rebuild:
        bench.owner_pipeline(cfg, art, dataset=ds)
    report = bench.run_bench(cfg, art, dataset=ds)
    print(report.table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        print(f"wrote {args.csv}")
    return 0


def cmd_tune_beta(args) -> int:
    base, q = read_fvecs(args.base), read_fvecs(args.queries)
    gt = read_ivecs(args.ground_truth) if args.ground_truth else brute_force_knn(base, q, args.k, threads=args.threads)
    tuned = search.tune_beta(base, q, gt, args.k, args.target, s=args.s, seed=_seed(args))
    for beta, rec in tuned.history:
        print(f"beta={beta:.6g} filter_recall@{args.k}={rec:.4f}")
    flag = "" if tuned.reached else " (target not reached)"
    print(f"chosen beta={tuned.beta:.6g} recall={tuned.recall:.4f}{flag}")
    return 0 if tuned.reached else 2


def cmd_tune_kprime(args) -> int:
    db = bench.load_server(args.dir)
    dk, sk = bench.load_user_keys(args.dir)
    q = read_fvecs(args.queries)
    gt = read_ivecs(args.ground_truth) if args.ground_truth else None
    if gt is None:
        raise SystemExit("tune-kprime needs --ground-truth (the server has no plaintexts)")
    qcs = search.make_queries(q, dk, sk, args.k, seed=_seed(args))
    res = search.tune_k_prime(db, qcs, gt[:, :args.k], args.k, args.target)
    for row in res.curve:
        print(f"Ratio_k={row['ratio']} ef_search={row['ef_search']} recall={row['recall']:.4f} qps={row['qps']:.1f}")
    flag = "" if res.reached else " (target not reached)"
    print(f"chosen Ratio_k={res.ratio} recall={res.recall:.4f}{flag}")
    return 0 if res.reached else 2


def cmd_attack_demo(args) -> int:
    o = attacks.run_attack(args.variant, args.dim, _seed(args))
    print(f"variant            {o.variant.value}")
    print(f"dimension          {o.d}")
    print(f"leaked plaintexts  {attacks.required_leaks(o.variant, o.d)}")
    print(f"query rel. error   {o.query_error:.3e}")
    print(f"db rel. error      {o.db_error:.3e}")
    print(f"condition          {o.condition:.3e}")
    print(f"resamples          {o.resamples}")
    print(f"seconds            {o.elapsed:.4f}")
    print(attacks.AttackOutcome.CSV_HEADER)
    print(o.csv_row())
    return 0 if o.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppanns", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--config", default=None, help="key=value file with RunConfig keys")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("keygen", help="data owner: DCE and SAP keys")
    s.add_argument("--dir", required=True)
    s.add_argument("--base", required=True, help="fvecs base set (for d and max |x|)")
    s.add_argument("--beta", type=float, default=None)
    s.add_argument("--queries", default=None, help="fvecs sample queries for beta tuning")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--target", type=float, default=0.5)
    s.add_argument("--s", type=float, default=dcpe.REFERENCE_S)
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("encrypt-db", help="data owner: SAP and DCE ciphertext stores")
    s.add_argument("--dir", required=True)
    s.add_argument("--base", required=True)
    s.set_defaults(func=cmd_encrypt_db)

    s = sub.add_parser("build-index", help="data owner: HNSW over SAP ciphertexts")
    s.add_argument("--dir", required=True)
    s.add_argument("--m", type=int, default=16)
    s.add_argument("--ef-construction", type=int, default=200)
    s.set_defaults(func=cmd_build_index)

    s = sub.add_parser("trapgen", help="user: encrypt queries")
    s.add_argument("--dir", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--k-prime", type=int, default=None)
    s.add_argument("--ef-search", type=int, default=256)
    s.set_defaults(func=cmd_trapgen)

    s = sub.add_parser("search", help="server: answer encrypted queries")
    s.add_argument("--dir", required=True)
    s.add_argument("--requests", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--no-refine", action="store_true")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("bench", help="recall/QPS grid")
    s.add_argument("--dir", required=True)
    s.add_argument("--csv", default=None)
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--rebuild", action="store_true")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("tune-beta", help="data owner: beta for a target filter recall")
    s.add_argument("--base", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--ground-truth", default=None)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--target", type=float, default=0.5)
    s.add_argument("--s", type=float, default=dcpe.REFERENCE_S)
    s.set_defaults(func=cmd_tune_beta)

    s = sub.add_parser("tune-kprime", help="smallest Ratio_k reaching a target recall")
    s.add_argument("--dir", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--ground-truth", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--target", type=float, default=0.9)
    s.set_defaults(func=cmd_tune_kprime)

    s = sub.add_parser("attack-demo", help="known-plaintext attack on ASPE")
    s.add_argument("--variant", choices=[v.value for v in attacks.Variant], required=True)
    s.add_argument("--dim", type=int, default=16)
    s.set_defaults(func=cmd_attack_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        os.environ.setdefault("PPANN_THREADS", str(args.threads))
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
