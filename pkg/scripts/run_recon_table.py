"""Compare FBP, MRF and the PnP reconstructions on simulated sinograms.

    python scripts/run_recon_table.py --config scripts/configs/sparse_view.ini
    python scripts/run_recon_table.py --config scripts/configs/limited_angle.ini --dict results/sparse_view/dictionary.cdict
"""

import argparse
import csv
import logging
import time

from csrtomo.experiments import load_config, make_config, run_recon_table


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--dict", help="reuse a learned CDICT1 dictionary")
    p.add_argument("--patch-dict", help="reuse a learned patch dictionary (.npz)")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--paper-scale", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    kw = {"dict_path": args.dict, "patch_dict_path": args.patch_dict, "out_dir": args.out, "workers": args.workers}
    cfg = load_config(args.config, args.paper_scale, **kw) if args.config else make_config(args.paper_scale, **kw)
    t0 = time.perf_counter()
    path = run_recon_table(cfg)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    cols = ["fbp"] + [c for c in ("mrf", "psc", "csc1", "csc", "csc3") if c in rows[0]]
    print("views  dB  " + "  ".join(f"{c:>6}" for c in cols))
    for r in rows:
        print(f"{r['views']:>5} {r['noise_psnr']:>3}  " + "  ".join(f"{float(r[c]):6.2f}" for c in cols))
    print(f"{path} written in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
