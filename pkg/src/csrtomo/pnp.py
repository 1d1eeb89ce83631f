"""Plug-and-Play reconstruction with pluggable denoisers.

Denoisers available to the outer loop: the three CSC variants, patch-based
sparse coding (PSC) and the identity.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from . import csc
from .cdl import TrainingSet
from .imagecore import as_image, psnr, psnr_for_csv
from .tomo import NoiseWeights, Sinogram, fbp, solve_f

log = logging.getLogger(__name__)


class DenoiserKind(str, enum.Enum):
    CSC1 = "CSC1"
    CSC2 = "CSC2"
    CSC3 = "CSC3"
    PSC = "PSC"
    IDENTITY = "IDENTITY"


@dataclass
class PatchDictionary:
    """Unit-norm atoms stored as the columns of a ``(patch_size**2, M)`` array."""

    patch_size: int
    atoms: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2 or self.atoms.shape[0] != self.patch_size**2:
            raise ValueError(f"atoms must have {self.patch_size ** 2} rows, got {self.atoms.shape}")
        nrm = np.linalg.norm(self.atoms, axis=0)
        if np.any(np.abs(nrm - 1.0) > 1e-6):
            raise ValueError("patch dictionary atoms must be unit norm")

    @property
    def num_atoms(self) -> int:
        return self.atoms.shape[1]

    def save(self, path) -> None:
        np.savez(path, patch_size=self.patch_size, atoms=self.atoms)

    @classmethod
    def load(cls, path) -> "PatchDictionary":
        with np.load(path) as z:
            return cls(int(z["patch_size"]), z["atoms"])


@dataclass
class DenoiserSpec:
    """Which denoiser ``H`` to plug in and its parameters.

    ``strength`` is the l1 weight (lambda) for CSC and PSC kinds.
    """

    kind: DenoiserKind | str
    dictionary: csc.Dictionary | PatchDictionary | None = None
    strength: float = 0.1
    lambda_lpf: float = 7.0
    mu: float = 1.0
    max_iter: int = 25
    rho: float | None = None
    stride: int = 4
    ista_iters: int = 100

    def __post_init__(self):
        self.kind = DenoiserKind(self.kind)
        if self.kind in (DenoiserKind.CSC1, DenoiserKind.CSC2, DenoiserKind.CSC3):
            if not isinstance(self.dictionary, csc.Dictionary):
                raise ValueError(f"{self.kind.value} needs a convolutional dictionary")
        elif self.kind is DenoiserKind.PSC:
            if not isinstance(self.dictionary, PatchDictionary):
                raise ValueError("PSC needs a patch dictionary")
        if self.kind is not DenoiserKind.IDENTITY and not self.strength > 0:
            raise ValueError("denoiser strength must be positive")

    def csc_params(self) -> csc.CscParams:
        mu = self.mu if self.kind is DenoiserKind.CSC3 else 0.0
        return csc.CscParams(self.strength, mu=mu, rho=self.rho, max_iter=self.max_iter)


def csc_denoiser_adapter(v_tilde, spec: DenoiserSpec) -> np.ndarray:
    """Run the CSC denoiser named by ``spec`` on a PnP iterate."""
    if spec.kind not in (DenoiserKind.CSC1, DenoiserKind.CSC2, DenoiserKind.CSC3):
        raise ValueError(f"{spec.kind.value} is not a CSC denoiser")
    return csc.denoise(v_tilde, spec.dictionary, spec.csc_params(), spec.kind.value, spec.lambda_lpf)


def apply_denoiser(v, spec: DenoiserSpec) -> np.ndarray:
    if spec.kind is DenoiserKind.IDENTITY:
        return v
    if spec.kind is DenoiserKind.PSC:
        return psc_denoise(v, spec.dictionary, spec.strength, spec.stride, spec.ista_iters)
    return csc_denoiser_adapter(v, spec)


# --------------------------------------------------------------------------
# Patch sparse coding


def _ista(x: np.ndarray, d: np.ndarray, lmbda: float, iters: int, z0=None) -> np.ndarray:
    """l1 sparse codes of the columns of ``x`` by ISTA with step ``1 / ||D||^2``."""
    lip = np.linalg.norm(d, 2) ** 2
    z = np.zeros((d.shape[1], x.shape[1])) if z0 is None else z0.copy()
    dtx = d.T @ x
    dtd = d.T @ d
    for _ in range(iters):
        z = csc.weighted_shrink(z - (dtd @ z - dtx) / lip, lmbda / lip)
    return z


def _patch_index(shape, patch_size: int, stride: int):
    h, w = shape
    r0 = np.arange(0, h, stride)
    c0 = np.arange(0, w, stride)
    rows = (r0[:, None] + np.arange(patch_size)[None, :]) % h
    cols = (c0[:, None] + np.arange(patch_size)[None, :]) % w
    # flat pixel index of every patch element: (n_patches, p*p)
    flat = rows[:, None, :, None] * w + cols[None, :, None, :]
    return flat.reshape(len(r0) * len(c0), patch_size * patch_size)


def psc_denoise(v, pdict: PatchDictionary, lmbda: float, stride: int = 4, ista_iters: int = 100) -> np.ndarray:
    """Code every (circularly wrapped) patch on a ``stride`` grid and average the overlaps."""
    img = as_image(v)
    p = pdict.patch_size
    if p > min(img.shape):
        raise ValueError("patch larger than image")
    idx = _patch_index(img.shape, p, stride)
    patches = img.ravel()[idx].T                      # (p*p, N)
    means = patches.mean(axis=0, keepdims=True)
    z = _ista(patches - means, pdict.atoms, lmbda, ista_iters)
    recon = pdict.atoms @ z + means
    acc = np.zeros(img.size)
    cnt = np.zeros(img.size)
    np.add.at(acc, idx.T.ravel(), recon.ravel())
    np.add.at(cnt, idx.T.ravel(), 1.0)
    return (acc / cnt).reshape(img.shape)


@dataclass
class PatchLearnResult:
    dictionary: PatchDictionary
    objective: list[float]
    reseeded: int = 0


def sample_patches(images, patch_size: int, max_patches: int, rng) -> np.ndarray:
    """Random mean-removed patches (columns) drawn without wrap-around."""
    h, w = images[0].shape
    per = -(-max_patches // len(images))
    cols = []
    for im in images:
        ii = rng.integers(0, h - patch_size + 1, per)
        jj = rng.integers(0, w - patch_size + 1, per)
        for i, j in zip(ii, jj):
            cols.append(im[i : i + patch_size, j : j + patch_size].ravel())
    x = np.array(cols[:max_patches]).T
    return x - x.mean(axis=0, keepdims=True)


def learn_patch_dictionary_from_patches(
    x: np.ndarray, num_atoms: int, iters: int, seed: int, lmbda: float | None = None, ista_iters: int = 50
) -> tuple[np.ndarray, list[float], int]:
    """Alternate ISTA coding and exact unit-norm column updates on patch matrix ``x``.

    Each column update is the exact minimiser of the data term over unit
    vectors with the other columns and all codes fixed, and ISTA with step
    ``1/L`` never increases the objective, so the trace is non-increasing.
    """
    rng = np.random.default_rng(seed)
    n = x.shape[1]
    if n < num_atoms:
        raise ValueError("fewer training patches than atoms")
    if lmbda is None:
        lmbda = 0.1 * float(np.median(np.linalg.norm(x, axis=0)))
    d = x[:, rng.choice(n, num_atoms, replace=False)].copy()
    nrm = np.linalg.norm(d, axis=0)
    flat = nrm < 1e-12
    d[:, flat] = rng.standard_normal((d.shape[0], int(flat.sum())))
    d /= np.linalg.norm(d, axis=0, keepdims=True)

    def objective(dd, zz):
        return 0.5 * float(np.sum((x - dd @ zz) ** 2)) + lmbda * float(np.sum(np.abs(zz)))

    z = np.zeros((num_atoms, n))
    trace = [objective(d, z)]
    reseeded = 0
    for _ in range(iters):
        z = _ista(x, d, lmbda, ista_iters, z)
        resid = x - d @ z
        for j in range(num_atoms):
            resid += np.outer(d[:, j], z[j])
            v = resid @ z[j]
            nv = np.linalg.norm(v)
            if nv > 1e-12:
                d[:, j] = v / nv
            else:
                # unused atom: any unit vector leaves the objective unchanged
                cand = resid[:, rng.integers(n)]
                nc = np.linalg.norm(cand)
                d[:, j] = cand / nc if nc > 1e-12 else rng.standard_normal(d.shape[0])
                d[:, j] /= np.linalg.norm(d[:, j])
                reseeded += 1
            resid -= np.outer(d[:, j], z[j])
        trace.append(objective(d, z))
    return d, trace, reseeded


def learn_patch_dictionary(
    train: TrainingSet,
    num_atoms: int,
    patch_size: int,
    iters: int,
    seed: int,
    lmbda: float | None = None,
    max_patches: int = 4000,
) -> PatchLearnResult:
    """Learn a patch dictionary from mean-removed patches of the raw training images."""
    rng = np.random.default_rng(seed)
    x = sample_patches(train.images, patch_size, max_patches, rng)
    d, trace, reseeded = learn_patch_dictionary_from_patches(x, num_atoms, iters, seed, lmbda)
    return PatchLearnResult(PatchDictionary(patch_size, d), trace, reseeded)


# --------------------------------------------------------------------------
# Outer loop


@dataclass
class PnPState:
    x_hat: np.ndarray
    v_hat: np.ndarray
    u: np.ndarray
    beta: float
    outer_iter: int = 0


@dataclass
class TraceRow:
    iter: int
    primal_gap: float
    psnr: float | None


@dataclass
class PnPResult:
    image: np.ndarray
    trace: list[TraceRow]
    state: PnPState
    audit: list[dict] = field(default_factory=list)


class DenoiserFailure(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"denoiser failed at outer iteration {iteration}: {cause}")
        self.iteration = iteration


def pnp_reconstruct(
    y: Sinogram,
    w: NoiseWeights,
    denoiser: DenoiserSpec,
    beta: float,
    outer_iters: int,
    f_iters: int = 25,
    reference=None,
    x0=None,
    audit: bool = False,
) -> PnPResult:
    """PnP-ADMM: F is an OGM partial solve of the data term, H the chosen denoiser.

    Both split variables start from FBP (or ``x0``) and the scaled dual from
    zero. With ``audit=True`` every intermediate of every step is recorded.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    init = fbp(y) if x0 is None else as_image(x0)
    state = PnPState(init.copy(), init.copy(), np.zeros_like(init), beta)
    ref = None if reference is None else as_image(reference)
    trace: list[TraceRow] = []
    log_rows: list[dict] = []
    for k in range(1, outer_iters + 1):
        x_tilde = state.v_hat - state.u
        x_hat = solve_f(y, w, x_tilde, beta, f_iters)
        v_tilde = x_hat + state.u
        try:
            v_hat = apply_denoiser(v_tilde, denoiser)
        except Exception as exc:  # noqa: BLE001 - surfaced with the iteration index
            raise DenoiserFailure(k, exc) from exc
        u_prev = state.u
        u = u_prev + (x_hat - v_hat)
        if audit:
            log_rows.append({"iter": k, "x_tilde": x_tilde, "x_hat": x_hat, "v_tilde": v_tilde,
                             "v_hat": v_hat, "u_prev": u_prev, "u": u})
        state = PnPState(x_hat, v_hat, u, beta, k)
        gap = float(np.linalg.norm(x_hat - v_hat))
        trace.append(TraceRow(k, gap, None if ref is None else psnr(ref, x_hat)))
    return PnPResult(state.x_hat, trace, state, log_rows)


def write_trace_csv(path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iter", "primal_gap", "psnr"])
        for row in trace:
            ps = "" if row.psnr is None else f"{psnr_for_csv(row.psnr):.6f}"
            wr.writerow([row.iter, f"{row.primal_gap:.9g}", ps])
