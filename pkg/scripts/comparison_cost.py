"""DCE comparison latency against a plaintext squared distance, across d."""

import argparse

from ppanns import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dims", type=int, nargs="+", default=[32, 128, 960])
    ap.add_argument("--trials", type=int, default=1_000_000)
    args = ap.parse_args()
    print("d,ciphertext_reals,trapdoor_reals,mac,dce_ns,plain_ns,ratio")
    for d in args.dims:
        c = bench.comparison_cost(d, trials=args.trials)
        print(f"{d},{c['ciphertext_reals']},{c['trapdoor_reals']},{c['mac']},"
              f"{c['dce_ns']:.2f},{c['plain_ns']:.2f},{c['ratio']:.2f}")


if __name__ == "__main__":
    main()
