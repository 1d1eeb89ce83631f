"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import csc
from .cdl import CdlConfig, TrainingSet, learn_dictionary, load_dictionary, save_dictionary
from .experiments import (
    ConfigError,
    ExperimentConfig,
    load_config,
    make_config,
    run_tables,
)
from .imagecore import psnr, read_image, write_imgf, write_pgm
from .phantoms import PHANTOM_KINDS, add_noise, make_phantom
from .pnp import DenoiserSpec, PatchDictionary, learn_patch_dictionary, pnp_reconstruct, write_trace_csv
from .tomo import IDENTITY_WEIGHTS, Geometry, MrfParams, fbp, mrf_reconstruct, project, read_sinogram, write_sinogram

log = logging.getLogger("csrtomo")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _write_image(path: Path, img: np.ndarray) -> None:
    if path.suffix.lower() == ".pgm":
        write_pgm(path, img, float(img.min()), float(img.max()) if img.max() > img.min() else float(img.min()) + 1.0)
    else:
        write_imgf(path, img)


def _read_input_image(path) -> np.ndarray:
    if not Path(path).is_file():
        raise ConfigError(f"image {path} does not exist")
    return read_image(path)


def _corpus(path) -> list[np.ndarray]:
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"corpus {path} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".pgm", ".imgf"))
    if not files:
        raise ConfigError(f"corpus {path} contains no .pgm or .imgf images")
    return [read_image(p) for p in files]


def _experiment_config(args) -> ExperimentConfig:
    overrides = {
        "seed": args.seed,
        "out_dir": args.out,
        "views": tuple(args.views) if args.views else None,
        "noise_db": tuple(args.noise_db) if args.noise_db else None,
        "methods": tuple(m.upper() for m in args.method) if args.method else None,
        "dict_path": args.dict,
    }
    if args.config:
        return load_config(args.config, args.paper_scale, **overrides)
    return make_config(args.paper_scale, **overrides)


# --------------------------------------------------------------------------
# Subcommands


def cmd_phantom(args) -> None:
    side = args.side if args.side else (256 if args.paper_scale else 64)
    if side < 16:
        raise ConfigError("phantom side must be at least 16")
    img = make_phantom(args.kind, side, args.seed or 0)
    _write_image(Path(args.out), img)


def cmd_simulate(args) -> None:
    img = _read_input_image(args.image)
    if img.shape[0] != img.shape[1]:
        raise ConfigError("simulation needs a square image")
    views = args.views[0] if args.views else 64
    db = args.noise_db[0] if args.noise_db else None
    geom = Geometry.parallel(img.shape[0], views, args.angle_start, args.angle_stop)
    sino = project(img, geom)
    if db is not None:
        sino = add_noise(sino, db, args.seed or 0)
    write_sinogram(args.out, sino)


def cmd_train_dict(args) -> None:
    cfg = CdlConfig.paper_scale(seed=args.seed or 0) if args.paper_scale else CdlConfig(seed=args.seed or 0)
    cfg.outer_iters = args.iters or (300 if args.paper_scale else cfg.outer_iters)
    if args.lmbda is not None:
        cfg.lmbda = args.lmbda
    images = _corpus(args.corpus) if args.corpus else _generated_training(args)
    res = learn_dictionary(TrainingSet(images), cfg)
    save_dictionary(res.dictionary, args.out)
    log.info("objective %.6g -> %.6g", res.objective[0], res.objective[-1])


def _generated_training(args) -> list[np.ndarray]:
    cfg = ExperimentConfig.paper_scale() if args.paper_scale else ExperimentConfig()
    return [make_phantom(cfg.phantom_kind, cfg.side, s) for s in cfg.train_seeds]


def cmd_train_patch_dict(args) -> None:
    base = ExperimentConfig.paper_scale() if args.paper_scale else ExperimentConfig()
    images = _corpus(args.corpus) if args.corpus else _generated_training(args)
    res = learn_patch_dictionary(TrainingSet(images), args.atoms or base.patch_atoms,
                                 args.patch_size or base.patch_size, args.iters or base.patch_iters, args.seed or 0,
                                 lmbda=args.lmbda)
    res.dictionary.save(args.out)


def _need_dict(args) -> csc.Dictionary:
    if not args.dict:
        raise ConfigError("--dict is required for CSC methods")
    if not Path(args.dict).is_file():
        raise ConfigError(f"dictionary {args.dict} does not exist")
    return load_dictionary(args.dict)


def cmd_denoise(args) -> None:
    method = (args.method[0] if args.method else "CSC2").upper()
    if method not in ("CSC1", "CSC2", "CSC3"):
        raise ConfigError(f"denoise supports CSC1, CSC2 and CSC3, not {method}")
    img = _read_input_image(args.image)
    d = _need_dict(args)
    params = csc.CscParams(args.lmbda if args.lmbda is not None else 0.05,
                           mu=args.mu if method == "CSC3" else 0.0, max_iter=args.max_iter)
    out = csc.denoise(img, d, params, method)
    _write_image(Path(args.out), out)
    if args.reference:
        print(f"psnr={psnr(_read_input_image(args.reference), out):.4f}")


def cmd_reconstruct(args) -> None:
    if not Path(args.sino).is_file():
        raise ConfigError(f"sinogram {args.sino} does not exist")
    y = read_sinogram(args.sino, args.side)
    method = (args.method[0] if args.method else "CSC2").upper()
    ref = _read_input_image(args.reference) if args.reference else None
    trace = None
    if method == "FBP":
        img = fbp(y)
    elif method == "MRF":
        img = mrf_reconstruct(y, IDENTITY_WEIGHTS, MrfParams(gamma=args.gamma, iters=args.iters or 300)).image
    elif method in ("PSC", "CSC1", "CSC2", "CSC3"):
        if method == "PSC":
            if not args.patch_dict or not Path(args.patch_dict).is_file():
                raise ConfigError("--patch-dict is required for PSC")
            spec = DenoiserSpec("PSC", PatchDictionary.load(args.patch_dict), strength=args.lmbda or 0.1,
                                stride=args.stride)
        else:
            spec = DenoiserSpec(method, _need_dict(args), strength=args.lmbda or 0.2, mu=args.mu)
        res = pnp_reconstruct(y, IDENTITY_WEIGHTS, spec, args.beta, args.iters or 100, reference=ref)
        img, trace = res.image, res.trace
    else:
        raise ConfigError(f"unknown method {method}")
    _write_image(Path(args.out), img)
    if trace is not None and args.trace:
        write_trace_csv(args.trace, trace)
    if ref is not None:
        print(f"psnr={psnr(ref, img):.4f}")


def cmd_table(args) -> None:
    cfg = _experiment_config(args)
    outs = run_tables(cfg, args.which)
    for p in (outs.denoise, outs.recon):
        if p is not None:
            print(p)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="global seed (default 0, or the config value)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--views", type=int, nargs="+", help="number of view angles")
    common.add_argument("--noise-db", type=float, nargs="+", help="target PSNR in dB")
    common.add_argument("--method", nargs="+", help="MRF, PSC, CSC1, CSC2, CSC3 (FBP for reconstruct)")
    common.add_argument("--dict", help="convolutional dictionary (CDICT1)")
    common.add_argument("--paper-scale", action="store_true", help="256^2 images, 128 filters, 300 iterations")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="csrtomo", description="CSR-regularised tomography experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", parents=[common], help="write a synthetic phantom")
    s.add_argument("--kind", choices=PHANTOM_KINDS, default="grains")
    s.add_argument("--side", type=int)
    s.set_defaults(func=cmd_phantom, need_out=True)

    s = sub.add_parser("simulate", parents=[common], help="project an image and add noise")
    s.add_argument("--image", required=True)
    s.add_argument("--angle-start", type=float, default=0.0, help="degrees")
    s.add_argument("--angle-stop", type=float, default=180.0, help="degrees")
    s.set_defaults(func=cmd_simulate, need_out=True)

    s = sub.add_parser("train-dict", parents=[common], help="learn a convolutional dictionary")
    s.add_argument("--corpus", help="directory of PGM/IMGF training images")
    s.add_argument("--iters", type=int)
    s.add_argument("--lmbda", type=float)
    s.set_defaults(func=cmd_train_dict, need_out=True)

    s = sub.add_parser("train-patch-dict", parents=[common], help="learn a patch dictionary")
    s.add_argument("--corpus", help="directory of PGM/IMGF training images")
    s.add_argument("--atoms", type=int)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--lmbda", type=float)
    s.set_defaults(func=cmd_train_patch_dict, need_out=True)

    s = sub.add_parser("denoise", parents=[common], help="denoise an image with a CSC variant")
    s.add_argument("--image", required=True)
    s.add_argument("--lmbda", type=float)
    s.add_argument("--mu", type=float, default=1.0)
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--reference", help="clean image for a PSNR report")
    s.set_defaults(func=cmd_denoise, need_out=True)

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct a sinogram")
    s.add_argument("--sino", required=True)
    s.add_argument("--side", type=int, help="image side (default from detector count)")
    s.add_argument("--beta", type=float, default=200.0)
    s.add_argument("--lmbda", type=float)
    s.add_argument("--mu", type=float, default=1.0)
    s.add_argument("--gamma", type=float, default=100.0)
    s.add_argument("--iters", type=int, help="outer iterations")
    s.add_argument("--stride", type=int, default=2)
    s.add_argument("--patch-dict")
    s.add_argument("--trace", help="write the PnP trace CSV here")
    s.add_argument("--reference")
    s.set_defaults(func=cmd_reconstruct, need_out=True)

    s = sub.add_parser("table", parents=[common], help="run the comparison tables")
    s.add_argument("--which", choices=("all", "denoise", "recon"), default="all")
    s.set_defaults(func=cmd_table, need_out=False)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.need_out and not args.out:
            raise ConfigError("--out is required")
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - mapped onto the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
