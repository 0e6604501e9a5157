"""Known-plaintext attacks on every ASPE variant; one CSV row per instance.

    python scripts/attack_suite.py --dims 4 16 32 --instances 100 > attacks.csv
"""

import argparse
import sys

from ppanns import attacks


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, nargs="+", default=[16])
    ap.add_argument("--instances", type=int, default=100)
    ap.add_argument("--noise", type=float, default=0.0, help="Gaussian noise added to every leak")
    ap.add_argument("--variants", nargs="+", default=[v.value for v in attacks.Variant])
    args = ap.parse_args()

    print(attacks.AttackOutcome.CSV_HEADER)
    for variant in args.variants:
        for d in args.dims:
            good = 0
            for seed in range(args.instances):
                o = attacks.run_attack(variant, d, seed=seed, noise=args.noise)
                good += o.ok and o.query_error <= 1e-6 and o.db_error <= 1e-6
                print(o.csv_row())
            print(f"# {variant} d={d}: {good}/{args.instances} within 1e-6", file=sys.stderr)


if __name__ == "__main__":
    main()
