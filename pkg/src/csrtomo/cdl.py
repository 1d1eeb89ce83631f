"""Batch convolutional dictionary learning and the CDICT1 file format."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .csc import CoefficientMaps, CscParams, Dictionary, _sm_solve, csc_solve, synthesize
from .imagecore import as_image, highpass_split

log = logging.getLogger(__name__)

_MAGIC = b"CDICT1"
LOAD_NORM_TOL = 1e-6


@dataclass
class TrainingSet:
    """Images of a common shape plus the low-pass strength used to pre-filter them.

    ``lambda_lpf=None`` disables pre-filtering (images are coded as given).
    """

    images: list[np.ndarray]
    lambda_lpf: float | None = 7.0

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("training set is empty")
        self.images = [as_image(im) for im in self.images]
        if len({im.shape for im in self.images}) != 1:
            raise ValueError("training images differ in shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.images[0].shape

    def highpass(self) -> np.ndarray:
        if self.lambda_lpf is None:
            return np.stack(self.images)
        return np.stack([highpass_split(im, self.lambda_lpf)[1] for im in self.images])


@dataclass
class CdlConfig:
    """``filter_sizes`` is a list of ``(count, size)`` pairs; ``lmbda=None`` picks a data-driven default."""

    filter_sizes: list[tuple[int, int]] = field(default_factory=lambda: [(8, 2), (8, 4), (8, 8), (8, 16)])
    lmbda: float | None = None
    outer_iters: int = 30
    seed: int = 0
    csc_iters: int = 50
    dict_iters: int = 30
    n_init: int = 1

    def __post_init__(self):
        if sum(c for c, _ in self.filter_sizes) < 1:
            raise ValueError("need at least one filter")
        if any(c < 0 or s < 1 for c, s in self.filter_sizes):
            raise ValueError("filter counts must be non-negative and sizes positive")
        if self.lmbda is not None and not self.lmbda > 0:
            raise ValueError("lmbda must be positive")
        if self.outer_iters < 1 or self.n_init < 1:
            raise ValueError("outer_iters and n_init must be at least 1")

    @property
    def num_filters(self) -> int:
        return sum(c for c, _ in self.filter_sizes)

    @classmethod
    def paper_scale(cls, **kw) -> "CdlConfig":
        return cls(filter_sizes=[(32, 2), (32, 4), (32, 8), (32, 16)], **kw)

    def sizes(self) -> list[int]:
        return [s for c, s in self.filter_sizes for _ in range(c)]


@dataclass
class CdlResult:
    dictionary: Dictionary
    objective: list[float]
    lmbda: float
    reinitialized: int = 0


def default_lambda(highpass: np.ndarray, num_filters: int) -> float:
    """``0.1 * mean per-image high-pass l2 norm / M``."""
    norms = [np.linalg.norm(h) for h in highpass]
    return 0.1 * float(np.mean(norms)) / num_filters


def cdl_objective(highpass: np.ndarray, dictionary: Dictionary, coefs: np.ndarray, lmbda: float) -> float:
    total = 0.0
    for s, a in zip(highpass, coefs):
        r = s - synthesize(dictionary, CoefficientMaps(a))
        total += 0.5 * float(np.sum(r * r))
    return total + lmbda * float(np.sum(np.abs(coefs)))


def _support_mask(sizes: list[int], shape) -> np.ndarray:
    mask = np.zeros((len(sizes),) + tuple(shape), dtype=bool)
    for m, s in enumerate(sizes):
        mask[m, :s, :s] = True
    return mask


def _project(g: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero outside each support and scale to unit norm; returns (filters, degenerate flags)."""
    g = np.where(mask, g, 0.0)
    nrm = np.sqrt(np.sum(g * g, axis=(1, 2)))
    bad = nrm <= 1e-12
    g[~bad] /= nrm[~bad][:, None, None]
    return g, bad


def _to_dictionary(g: np.ndarray, sizes: list[int]) -> Dictionary:
    return Dictionary([g[m, :s, :s].copy() for m, s in enumerate(sizes)])


def _dict_update(highpass, coefs, g0, mask, iters):
    """Consensus ADMM over the per-image copies of the padded filters."""
    shape = highpass.shape[1:]
    af = sfft.rfft2(coefs, axes=(-2, -1))           # (K, M, H, Wr)
    sf = sfft.rfft2(highpass, axes=(-2, -1))        # (K, H, Wr)
    rho = max(float(np.mean(np.sum(coefs * coefs, axis=(0, 2, 3)))), 1e-8)
    atsf = np.conj(af) * sf[:, None]
    k = highpass.shape[0]
    g = g0.copy()
    u = np.zeros((k,) + g.shape)
    bad = np.zeros(g.shape[0], dtype=bool)
    for _ in range(iters):
        rhs = atsf + rho * sfft.rfft2(g[None] - u, axes=(-2, -1))
        d = np.stack([sfft.irfft2(_sm_solve(af[i], rho, rhs[i]), s=shape, axes=(-2, -1)) for i in range(k)])
        g, bad = _project(np.mean(d + u, axis=0), mask)
        u += d - g[None]
    return g, bad


def _reseed(g, bad, sizes, highpass, coefs, dictionary):
    """Replace degenerate filters with the highest-energy residual patch."""
    resid = np.stack([s - synthesize(dictionary, CoefficientMaps(a)) for s, a in zip(highpass, coefs)])
    shape = resid.shape[1:]
    power_f = sfft.rfft2(resid * resid, axes=(-2, -1))
    for m in np.flatnonzero(bad):
        sz = sizes[m]
        box = np.zeros(shape)
        box[:sz, :sz] = 1.0
        # energy[k, i, j] = sum of resid[k]**2 over the window starting at (i, j)
        energy = sfft.irfft2(power_f * np.conj(sfft.rfft2(box)), s=shape, axes=(-2, -1))
        kk, i, j = np.unravel_index(np.argmax(energy), energy.shape)
        patch = np.roll(resid[kk], (-i, -j), axis=(0, 1))[:sz, :sz]
        nrm = np.linalg.norm(patch)
        g[m] = 0.0
        if nrm > 0:
            g[m, :sz, :sz] = patch / nrm
        else:
            g[m, 0, 0] = 1.0
    return g


def learn_dictionary(train: TrainingSet, cfg: CdlConfig, init: Dictionary | None = None) -> CdlResult:
    """Alternate CSC and consensus filter updates for ``cfg.outer_iters`` rounds.

    Each half-step is kept only if it does not raise the objective, so the
    recorded trace (one value per alternation, preceded by the initial value)
    is non-increasing. With ``cfg.n_init > 1`` the learning is repeated from
    random initialisations seeded ``cfg.seed, cfg.seed + 1, ...`` and the run
    with the lowest final objective is returned.
    """
    highpass = train.highpass()
    sizes = cfg.sizes()
    if max(sizes) > min(train.shape):
        raise ValueError("filters larger than the training images")
    lmbda = cfg.lmbda if cfg.lmbda is not None else default_lambda(highpass, len(sizes))
    if init is not None:
        return _learn_once(highpass, sizes, lmbda, cfg, cfg.seed, init)
    best = None
    for r in range(cfg.n_init):
        res = _learn_once(highpass, sizes, lmbda, cfg, cfg.seed + r, None)
        if best is None or res.objective[-1] < best.objective[-1]:
            best = res
    return best


def _learn_once(highpass, sizes, lmbda, cfg: CdlConfig, seed: int, init) -> CdlResult:
    k = highpass.shape[0]
    shape = highpass.shape[1:]
    mask = _support_mask(sizes, shape)
    if init is None:
        rng = np.random.default_rng(seed)
        g = np.zeros((len(sizes),) + shape)
        for m, s in enumerate(sizes):
            g[m, :s, :s] = rng.standard_normal((s, s))
        g, _ = _project(g, mask)
    else:
        g = init.padded(shape)
    dictionary = _to_dictionary(g, sizes)
    coefs = np.zeros((k, len(sizes)) + shape)
    params = CscParams(lmbda, max_iter=cfg.csc_iters, rel_tol=1e-4)

    obj = cdl_objective(highpass, dictionary, coefs, lmbda)
    trace = [obj]
    reinit = 0
    for it in range(cfg.outer_iters):
        for i in range(k):
            cand = csc_solve(highpass[i], dictionary, params, init=coefs[i]).maps
            before = cdl_objective(highpass[i : i + 1], dictionary, coefs[i : i + 1], lmbda)
            after = cdl_objective(highpass[i : i + 1], dictionary, cand[None], lmbda)
            if after <= before:
                coefs[i] = cand
        obj = cdl_objective(highpass, dictionary, coefs, lmbda)

        g_new, bad = _dict_update(highpass, coefs, g, mask, cfg.dict_iters)
        if bad.any():
            reinit += int(bad.sum())
            log.info("reinitialising %d degenerate filter(s)", int(bad.sum()))
            g_new = _reseed(g_new, bad, sizes, highpass, coefs, dictionary)
        cand_dict = _to_dictionary(g_new, sizes)
        cand_obj = cdl_objective(highpass, cand_dict, coefs, lmbda)
        if cand_obj <= obj:
            g, dictionary, obj = g_new, cand_dict, cand_obj
        trace.append(obj)
        log.debug("cdl iter %d objective %.6g", it + 1, obj)

    dictionary.meta.update({"lambda": repr(float(lmbda)), "seed": str(seed), "iterations": str(cfg.outer_iters)})
    return CdlResult(dictionary, trace, lmbda, reinit)


# --------------------------------------------------------------------------
# CDICT1 files


def save_dictionary(dictionary: Dictionary, path) -> None:
    """Write ``dictionary`` as CDICT1 (float32 filters plus a key=value trailer)."""
    parts = [_MAGIC, struct.pack("<I", len(dictionary))]
    for f in dictionary.filters:
        h, w = f.shape
        parts.append(struct.pack("<II", h, w))
        parts.append(np.ascontiguousarray(f, dtype="<f4").tobytes())
    trailer = "\n".join(f"{k}={v}" for k, v in dictionary.meta.items()).encode("utf-8")
    parts.append(struct.pack("<I", len(trailer)))
    parts.append(trailer)
    Path(path).write_bytes(b"".join(parts))


def load_dictionary(path) -> Dictionary:
    """Read a CDICT1 file, rejecting bad magic, truncation and non-unit filters."""
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a CDICT1 file")
    pos = len(_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise ValueError(f"{path}: truncated dictionary file")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    (m,) = struct.unpack("<I", take(4))
    filters = []
    for i in range(m):
        h, w = struct.unpack("<II", take(8))
        f = np.frombuffer(take(4 * h * w), dtype="<f4").reshape(h, w).astype(np.float64)
        if abs(np.linalg.norm(f) - 1.0) > LOAD_NORM_TOL:
            raise ValueError(f"{path}: filter {i} has norm {np.linalg.norm(f):.6g}")
        filters.append(f)
    (n,) = struct.unpack("<I", take(4))
    meta = {}
    for line in take(n).decode("utf-8").splitlines():
        if "=" in line:
            key, val = line.split("=", 1)
            meta[key] = val
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after dictionary")
    return Dictionary(filters, meta)
