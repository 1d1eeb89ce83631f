"""Experiment harness: denoising and reconstruction comparison tables.

Each table is a grid search per cell that keeps the parameters giving the
highest PSNR against the phantom. Every CSV row echoes the winning
parameters so a cell can be re-run on its own.
"""

from __future__ import annotations

import configparser
import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import csc
from .cdl import CdlConfig, TrainingSet, learn_dictionary, load_dictionary, save_dictionary
from .imagecore import psnr, psnr_for_csv, write_imgf
from .phantoms import PHANTOM_KINDS, add_image_noise, add_noise, make_phantom
from .pnp import (
    DenoiserSpec,
    PatchDictionary,
    learn_patch_dictionary,
    pnp_reconstruct,
    write_trace_csv,
)
from .tomo import IDENTITY_WEIGHTS, Geometry, MrfParams, fbp, mrf_reconstruct, project

log = logging.getLogger(__name__)

RECON_METHODS = ("MRF", "PSC", "CSC1", "CSC2", "CSC3")
DENOISE_VARIANTS = ("CSC1", "CSC2", "CSC3")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _sqrt2_grid(lo: float, n: int) -> tuple[float, ...]:
    return tuple(round(lo * 2.0 ** (k / 2.0), 6) for k in range(n))


@dataclass
class ExperimentConfig:
    """Everything a table run needs; defaults are the desk-scale protocol."""

    phantom_kind: str = "grains"
    side: int = 64
    train_seeds: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    test_seed: int = 7
    views: tuple[int, ...] = (64,)
    angle_start: float = 0.0
    angle_stop: float = 180.0
    noise_db: tuple[float, ...] = (26.0,)
    denoise_db: tuple[float, ...] = (24.0, 20.0, 14.0)
    methods: tuple[str, ...] = ("MRF", "PSC", "CSC2")
    dict_path: str | None = None
    patch_dict_path: str | None = None
    # convolutional dictionary learning
    filter_sizes: tuple[tuple[int, int], ...] = ((8, 2), (8, 4), (8, 8), (8, 16))
    cdl_outer_iters: int = 30
    # patch dictionary learning
    patch_size: int = 8
    patch_atoms: int = 64
    patch_iters: int = 20
    psc_stride: int = 2
    # denoising grids
    csc1_lambda: tuple[float, ...] = _sqrt2_grid(0.05, 9)
    csc2_lambda: tuple[float, ...] = _sqrt2_grid(0.005, 12)
    csc3_lambda: tuple[float, ...] = _sqrt2_grid(0.05, 9)
    csc3_mu: tuple[float, ...] = (1.0, 3.0)
    denoise_max_iter: int = 200
    # reconstruction grids
    beta: tuple[float, ...] = (100.0, 200.0, 400.0)
    pnp_csc_lambda: tuple[float, ...] = (0.1, 0.2, 0.3, 1.0, 3.0)
    pnp_psc_lambda: tuple[float, ...] = (0.05, 0.1, 0.2, 0.5, 1.0)
    mrf_gamma: tuple[float, ...] = (30.0, 100.0, 300.0, 1000.0)
    mrf_iters: int = 300
    outer_iters: int = 100
    f_iters: int = 25
    h_iters: int = 25
    out_dir: str = "results"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.phantom_kind not in PHANTOM_KINDS:
            raise ConfigError(f"unknown phantom kind {self.phantom_kind!r}")
        if self.side < 16:
            raise ConfigError("side must be at least 16")
        if any(v < 2 for v in self.views):
            raise ConfigError("every view count must be at least 2")
        if not 0.0 <= self.angle_start < self.angle_stop <= 180.0:
            raise ConfigError("angle range must satisfy 0 <= start < stop <= 180 degrees")
        if any(not db > 0 for db in self.noise_db + self.denoise_db):
            raise ConfigError("psnr_db values must be positive")
        bad = [m for m in self.methods if m not in RECON_METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; expected a subset of {RECON_METHODS}")
        if self.test_seed in self.train_seeds:
            raise ConfigError("test phantom seed must be held out of the training seeds")
        for name in ("dict_path", "patch_dict_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{name} {path!r} does not exist")
        grids = ("csc1_lambda", "csc2_lambda", "csc3_lambda", "csc3_mu", "beta",
                 "pnp_csc_lambda", "pnp_psc_lambda", "mrf_gamma")
        for name in grids:
            vals = getattr(self, name)
            if len(vals) == 0 or any(not v > 0 for v in vals):
                raise ConfigError(f"grid {name} must be non-empty and positive")
        ints = ("cdl_outer_iters", "patch_iters", "patch_size", "patch_atoms", "psc_stride",
                "denoise_max_iter", "mrf_iters", "outer_iters", "f_iters", "h_iters", "workers")
        for name in ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")

    @classmethod
    def paper_scale(cls, **kw) -> "ExperimentConfig":
        """256x256 phantoms, 128 filters, 300 outer iterations, 16x16 patches."""
        base = dict(
            side=256,
            views=(64, 128, 256),
            noise_db=(26.0, 20.0, 14.0),
            denoise_db=(34.0, 24.0, 20.0, 14.0),
            filter_sizes=((32, 2), (32, 4), (32, 8), (32, 16)),
            patch_size=16,
            patch_atoms=128,
            psc_stride=4,
            outer_iters=300,
        )
        base.update(kw)
        return cls(**base)

    def cdl_config(self) -> CdlConfig:
        return CdlConfig(filter_sizes=[tuple(p) for p in self.filter_sizes],
                         outer_iters=self.cdl_outer_iters, seed=self.seed)


# --------------------------------------------------------------------------
# INI loading

_TUPLE_FLOAT = {"noise_db", "denoise_db", "csc1_lambda", "csc2_lambda", "csc3_lambda", "csc3_mu",
                "beta", "pnp_csc_lambda", "pnp_psc_lambda", "mrf_gamma"}
_TUPLE_INT = {"train_seeds", "views"}


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    if name in _TUPLE_FLOAT:
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if name in _TUPLE_INT:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if name == "methods":
        return tuple(v.strip().upper() for v in raw.split(",") if v.strip())
    if name == "filter_sizes":
        # "8x2, 8x4" -> ((8, 2), (8, 4))
        return tuple(tuple(int(p) for p in item.lower().split("x")) for item in raw.split(",") if item.strip())
    if name in ("dict_path", "patch_dict_path"):
        return raw or None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path, paper_scale: bool = False, **overrides) -> ExperimentConfig:
    """Read an INI file; keys from every section map onto config fields.

    Unknown keys are a configuration error.
    """
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    base = ExperimentConfig.paper_scale() if paper_scale else ExperimentConfig()
    defaults = {f.name: getattr(base, f.name) for f in fields(ExperimentConfig)}
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            try:
                values[key] = _parse_value(key, raw, defaults[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    return replace(base, **values)


def make_config(paper_scale: bool = False, **overrides) -> ExperimentConfig:
    base = ExperimentConfig.paper_scale() if paper_scale else ExperimentConfig()
    return replace(base, **{k: v for k, v in overrides.items() if v is not None})


# --------------------------------------------------------------------------
# Shared resources


def noise_seed(global_seed: int, views: int, noise_db: float) -> int:
    """Seed for one (views, noise) cell; every method in the cell sees the same data."""
    ss = np.random.SeedSequence([global_seed, views, int(round(noise_db * 1000))])
    return int(ss.generate_state(1)[0])


def denoise_noise_seed(global_seed: int, noise_db: float) -> int:
    ss = np.random.SeedSequence([global_seed, 0, int(round(noise_db * 1000)), 1])
    return int(ss.generate_state(1)[0])


def training_images(cfg: ExperimentConfig) -> list[np.ndarray]:
    return [make_phantom(cfg.phantom_kind, cfg.side, s) for s in cfg.train_seeds]


def held_out_image(cfg: ExperimentConfig) -> np.ndarray:
    return make_phantom(cfg.phantom_kind, cfg.side, cfg.test_seed)


def ensure_dictionary(cfg: ExperimentConfig) -> csc.Dictionary:
    """Load ``cfg.dict_path`` or learn from the generated training phantoms."""
    if cfg.dict_path is not None:
        return load_dictionary(cfg.dict_path)
    log.info("learning convolutional dictionary (%d filters)", cfg.cdl_config().num_filters)
    res = learn_dictionary(TrainingSet(training_images(cfg)), cfg.cdl_config())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dictionary(res.dictionary, out / "dictionary.cdict")
    return res.dictionary


def ensure_patch_dictionary(cfg: ExperimentConfig) -> PatchDictionary:
    if cfg.patch_dict_path is not None:
        return PatchDictionary.load(cfg.patch_dict_path)
    log.info("learning patch dictionary (%d atoms of %dx%d)", cfg.patch_atoms, cfg.patch_size, cfg.patch_size)
    res = learn_patch_dictionary(TrainingSet(training_images(cfg)), cfg.patch_atoms, cfg.patch_size,
                                 cfg.patch_iters, cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.dictionary.save(out / "patch_dictionary.npz")
    return res.dictionary


def _fmt(v: float) -> str:
    return f"{psnr_for_csv(v):.4f}"


def _write_row(fh, row) -> None:
    csv.writer(fh, lineterminator="\n").writerow(row)
    fh.flush()


# --------------------------------------------------------------------------
# Denoising table

DENOISE_HEADER = ["input_psnr", "noisy_psnr", "csc1", "csc2", "csc3",
                  "csc1_lambda", "csc2_lambda", "csc3_lambda", "csc3_mu", "peak"]


def best_denoise(x, y, dictionary, variant: str, lambdas, mus, max_iter: int):
    """Grid search one CSC variant; returns ``(psnr, lambda, mu, image)``."""
    best = (-math.inf, None, None, None)
    for lam in lambdas:
        for mu in mus:
            params = csc.CscParams(lam, mu=mu, max_iter=max_iter)
            out = csc.denoise(y, dictionary, params, variant)
            val = psnr(x, out)
            if val > best[0]:
                best = (val, lam, mu, out)
    return best


def _denoise_cell(cfg: ExperimentConfig, dictionary, db: float):
    x = held_out_image(cfg)
    y = add_image_noise(x, db, denoise_noise_seed(cfg.seed, db))
    grids = {"CSC1": (cfg.csc1_lambda, (0.0,)), "CSC2": (cfg.csc2_lambda, (0.0,)),
             "CSC3": (cfg.csc3_lambda, cfg.csc3_mu)}
    results = {v: best_denoise(x, y, dictionary, v, *grids[v], cfg.denoise_max_iter) for v in DENOISE_VARIANTS}
    return db, psnr(x, y), float(x.max()), results


def run_denoise_table(cfg: ExperimentConfig, dictionary: csc.Dictionary | None = None) -> Path:
    """Write ``denoise_table.csv`` plus the best denoised image per cell."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dictionary = dictionary if dictionary is not None else ensure_dictionary(cfg)
    path = out / "denoise_table.csv"
    with open(path, "w", newline="") as fh:
        _write_row(fh, DENOISE_HEADER)
        for db, noisy, peak, res in _map_cells(cfg, _denoise_cell, [(dictionary, db) for db in cfg.denoise_db]):
            for v, (_, _, _, img) in res.items():
                write_imgf(out / f"denoise_{db:g}db_{v.lower()}.imgf", img)
            _write_row(fh, [f"{db:g}", _fmt(noisy)]
                       + [_fmt(res[v][0]) for v in DENOISE_VARIANTS]
                       + [f"{res['CSC1'][1]:g}", f"{res['CSC2'][1]:g}", f"{res['CSC3'][1]:g}",
                          f"{res['CSC3'][2]:g}", f"{peak:.6g}"])
            log.info("denoise %g dB: %s", db, {v: round(float(r[0]), 2) for v, r in res.items()})
    return path


# --------------------------------------------------------------------------
# Reconstruction table


def _column(method: str) -> str:
    return "csc" if method == "CSC2" else method.lower()


def recon_header(methods) -> list[str]:
    cols = ["views", "noise_psnr", "fbp"] + [_column(m) for m in methods]
    for m in methods:
        if m == "MRF":
            cols.append("mrf_gamma")
        else:
            cols += [f"{_column(m)}_lambda", f"{_column(m)}_beta"]
    return cols + ["peak"]


def _pnp_spec(cfg: ExperimentConfig, method: str, lam: float, dictionary, pdict) -> DenoiserSpec:
    if method == "PSC":
        return DenoiserSpec("PSC", pdict, strength=lam, stride=cfg.psc_stride)
    return DenoiserSpec(method, dictionary, strength=lam, max_iter=cfg.h_iters)


def best_reconstruction(cfg: ExperimentConfig, method: str, x, y, dictionary=None, pdict=None) -> dict:
    """Grid search one method on one sinogram; the dict holds psnr, params, image, trace."""
    best = {"psnr": -math.inf}
    if method == "MRF":
        for gamma in cfg.mrf_gamma:
            res = mrf_reconstruct(y, IDENTITY_WEIGHTS, MrfParams(gamma=gamma, iters=cfg.mrf_iters))
            val = psnr(x, res.image)
            if val > best["psnr"]:
                best = {"psnr": val, "gamma": gamma, "image": res.image, "trace": None}
        return best
    lambdas = cfg.pnp_psc_lambda if method == "PSC" else cfg.pnp_csc_lambda
    for beta in cfg.beta:
        for lam in lambdas:
            spec = _pnp_spec(cfg, method, lam, dictionary, pdict)
            res = pnp_reconstruct(y, IDENTITY_WEIGHTS, spec, beta, cfg.outer_iters, cfg.f_iters, reference=x)
            val = psnr(x, res.image)
            if val > best["psnr"]:
                best = {"psnr": val, "lambda": lam, "beta": beta, "image": res.image, "trace": res.trace}
    return best


def simulate_cell(cfg: ExperimentConfig, views: int, db: float):
    x = held_out_image(cfg)
    geom = Geometry.parallel(cfg.side, views, cfg.angle_start, cfg.angle_stop)
    y = add_noise(project(x, geom), db, noise_seed(cfg.seed, views, db))
    return x, y


def _recon_cell(cfg: ExperimentConfig, dictionary, pdict, views: int, db: float):
    x, y = simulate_cell(cfg, views, db)
    results = {m: best_reconstruction(cfg, m, x, y, dictionary, pdict) for m in cfg.methods}
    return views, db, psnr(x, fbp(y)), float(x.max()), results


def run_recon_table(cfg: ExperimentConfig, dictionary: csc.Dictionary | None = None,
                    pdict: PatchDictionary | None = None) -> Path:
    """Write ``recon_table.csv`` plus best images and PnP traces per cell."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    needs_csc = any(m.startswith("CSC") for m in cfg.methods)
    if dictionary is None and needs_csc:
        dictionary = ensure_dictionary(cfg)
    if pdict is None and "PSC" in cfg.methods:
        pdict = ensure_patch_dictionary(cfg)
    path = out / "recon_table.csv"
    cells = [(dictionary, pdict, v, db) for v in cfg.views for db in cfg.noise_db]
    with open(path, "w", newline="") as fh:
        _write_row(fh, recon_header(cfg.methods))
        for views, db, fbp_psnr, peak, res in _map_cells(cfg, _recon_cell, cells):
            row = [str(views), f"{db:g}", _fmt(fbp_psnr)] + [_fmt(res[m]["psnr"]) for m in cfg.methods]
            for m in cfg.methods:
                r = res[m]
                stem = f"recon_{views}v_{db:g}db_{m.lower()}"
                write_imgf(out / f"{stem}.imgf", r["image"])
                if m == "MRF":
                    row.append(f"{r['gamma']:g}")
                else:
                    row += [f"{r['lambda']:g}", f"{r['beta']:g}"]
                    write_trace_csv(out / f"{stem}_trace.csv", r["trace"])
            _write_row(fh, row + [f"{peak:.6g}"])
            log.info("recon %d views %g dB: fbp %.2f %s", views, db, fbp_psnr,
                     {m: round(float(r["psnr"]), 2) for m, r in res.items()})
    return path


def _map_cells(cfg: ExperimentConfig, fn, args_list):
    """Run cells in worker processes when ``cfg.workers > 1``; results keep submission order."""
    if cfg.workers == 1 or len(args_list) < 2:
        for args in args_list:
            yield fn(cfg, *args)
        return
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(fn, cfg, *args) for args in args_list]
        for fut in futures:
            yield fut.result()


@dataclass
class TableOutputs:
    denoise: Path | None = None
    recon: Path | None = None


def run_tables(cfg: ExperimentConfig, which: str = "all") -> TableOutputs:
    """Run the denoising and/or reconstruction tables with shared dictionaries."""
    if which not in ("all", "denoise", "recon"):
        raise ConfigError(f"unknown table {which!r}")
    out = TableOutputs()
    dictionary = ensure_dictionary(cfg) if which != "recon" or any(m.startswith("CSC") for m in cfg.methods) else None
    if which in ("all", "denoise"):
        out.denoise = run_denoise_table(cfg, dictionary)
    if which in ("all", "recon"):
        out.recon = run_recon_table(cfg, dictionary)
    return out
