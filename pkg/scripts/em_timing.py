"""Wall time of prototype generation as the number of source tokens doubles."""

import argparse

from protoseg.experiments import em_scaling


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--q", type=int, default=32)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--sizes", type=int, nargs="+", default=[1024, 2048, 4096, 8192, 16384])
    args = ap.parse_args()
    for m in args.sizes:
        a, b, ratio = em_scaling(m, q=args.q, d=args.d)
        print(f"m={m:6d}: {a * 1e3:8.2f} ms   2m: {b * 1e3:8.2f} ms   ratio {ratio:.3f}")


if __name__ == "__main__":
    main()
