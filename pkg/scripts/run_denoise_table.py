"""Denoise a held-out phantom at several input PSNRs with CSC1, CSC2 and CSC3.

    python scripts/run_denoise_table.py --config scripts/configs/denoise.ini
"""

import argparse
import csv
import logging
import time

from csrtomo.experiments import ensure_dictionary, load_config, make_config, run_denoise_table


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--dict", help="reuse a learned CDICT1 dictionary")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--paper-scale", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    kw = {"dict_path": args.dict, "out_dir": args.out, "workers": args.workers}
    cfg = load_config(args.config, args.paper_scale, **kw) if args.config else make_config(args.paper_scale, **kw)
    t0 = time.perf_counter()
    path = run_denoise_table(cfg, ensure_dictionary(cfg))
    with open(path) as fh:
        for row in csv.DictReader(fh):
            print(f"{row['input_psnr']:>5} dB in ({row['noisy_psnr']}): "
                  f"CSC1 {row['csc1']}  CSC2 {row['csc2']}  CSC3 {row['csc3']}")
    print(f"{path} written in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
