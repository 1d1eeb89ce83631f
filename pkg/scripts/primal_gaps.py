"""Summarise the primal gap and PSNR traces written by the reconstruction table.

    python scripts/primal_gaps.py results/sparse_view
"""

import argparse
import csv
from pathlib import Path


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("results", type=Path)
    args = p.parse_args()
    for path in sorted(args.results.glob("*_trace.csv")):
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        gap10 = float(rows[min(9, len(rows) - 1)]["primal_gap"])
        last = rows[-1]
        psnr = last["psnr"] or "-"
        print(f"{path.stem:40s} iters {last['iter']:>4}  gap@10 {gap10:.4g}  gap@end {float(last['primal_gap']):.4g}"
              f"  psnr@end {psnr}")


if __name__ == "__main__":
    main()
