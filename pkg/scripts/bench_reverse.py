"""Time the reverse pipeline across image sizes and thread counts.

Usage: python3 scripts/bench_reverse.py [--repeats N] [--threads T ...]
"""
import argparse

from rawkit import dataio
from rawkit.bench import time_pipeline


SIZES = ((504, 504), (1512, 2016), (3024, 4032))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--threads", type=int, nargs="+", default=(1, 0),
                    help="thread counts to sweep; 0 = auto")
    args = ap.parse_args()

    p = dataio.default_params()
    print("%-12s %-8s %12s %14s" % ("size", "threads", "median (ms)",
                                    "ms/megapixel"))
    for size in SIZES:
        for threads in args.threads:
            r = time_pipeline(size, p, repeats=args.repeats, threads=threads)
            print("%-12s %-8s %12.1f %14.2f"
                  % ("%dx%d" % (size[1], size[0]),
                     "auto" if threads == 0 else threads,
                     r["median_ms"], r["ms_per_megapixel"]))


if __name__ == "__main__":
    main()
