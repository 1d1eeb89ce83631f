"""Convolutional sparse coding and the CSC denoisers.

All convolutions are circular and carried out at full image resolution with
filters zero-padded at the origin. The coefficient update of every ADMM
solver is a diagonal-plus-rank-one system per frequency, solved in closed
form with the Sherman-Morrison identity.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .imagecore import as_image, finite_difference, gradient_spectrum, highpass_split

DEFAULT_EPSILON = 1e-8
DEFAULT_W_CAP = 1e8


class Variant(str, enum.Enum):
    CSC1 = "CSC1"
    CSC2 = "CSC2"
    CSC3 = "CSC3"


@dataclass
class Dictionary:
    """Ordered set of unit-norm 2-D filters, possibly of different sizes."""

    filters: list[np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)
    _spectra: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.filters) == 0:
            raise ValueError("dictionary needs at least one filter")
        self.filters = [np.array(f, dtype=np.float64) for f in self.filters]
        for m, f in enumerate(self.filters):
            if f.ndim != 2:
                raise ValueError(f"filter {m} is not 2-D")
            if abs(np.linalg.norm(f) - 1.0) > 1e-6:
                raise ValueError(f"filter {m} has norm {np.linalg.norm(f):.6g}, expected 1")

    @classmethod
    def from_filters(cls, filters, normalize: bool = True, meta=None) -> "Dictionary":
        fl = [np.asarray(f, dtype=np.float64) for f in filters]
        if normalize:
            norms = [np.linalg.norm(f) for f in fl]
            if not all(n > 0 for n in norms):
                raise ValueError("cannot normalise an all-zero filter")
            fl = [f / n for f, n in zip(fl, norms)]
        return cls(fl, dict(meta or {}))

    def __len__(self) -> int:
        return len(self.filters)

    @property
    def max_size(self) -> tuple[int, int]:
        return (max(f.shape[0] for f in self.filters), max(f.shape[1] for f in self.filters))

    def padded(self, shape: tuple[int, int]) -> np.ndarray:
        """Filters zero-padded to ``shape``, stacked as ``(M, H, W)``."""
        h, w = shape
        out = np.zeros((len(self),) + tuple(shape))
        for m, f in enumerate(self.filters):
            if f.shape[0] > h or f.shape[1] > w:
                raise ValueError(f"filter {m} of shape {f.shape} exceeds image shape {shape}")
            out[m, : f.shape[0], : f.shape[1]] = f
        return out

    def spectra(self, shape: tuple[int, int]) -> np.ndarray:
        """Half-plane DFTs of the padded filters, cached per image shape."""
        key = tuple(shape)
        if key not in self._spectra:
            self._spectra[key] = sfft.rfft2(self.padded(key), axes=(-2, -1))
        return self._spectra[key]


@dataclass
class SolveStats:
    iterations: int
    primal: list[float]
    dual: list[float]
    converged: bool
    rho: float

    @property
    def residual(self) -> float:
        return self.primal[-1] + self.dual[-1] if self.primal else 0.0


@dataclass
class CoefficientMaps:
    """Per-filter coefficient maps ``(M, H, W)``; ``lowpass`` only for CSC-III."""

    maps: np.ndarray
    lowpass: np.ndarray | None = None
    stats: SolveStats | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.maps.shape[1:]


@dataclass
class CscParams:
    """ADMM settings. ``rho=None`` selects ``100 * lmbda + 1``."""

    lmbda: float
    mu: float = 0.0
    rho: float | None = None
    max_iter: int = 200
    rel_tol: float = 1e-4
    auto_rho: bool = True
    auto_rho_period: int = 10

    def __post_init__(self):
        if not self.lmbda > 0:
            raise ValueError("lmbda must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.rho is not None and not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    @property
    def rho0(self) -> float:
        return self.rho if self.rho is not None else 100.0 * self.lmbda + 1.0


def _irfft(xf, shape):
    return sfft.irfft2(xf, s=shape, axes=(-2, -1))


def synthesize(dictionary: Dictionary, coeffs: CoefficientMaps) -> np.ndarray:
    """``sum_m d_m * alpha_m``, plus ``coeffs.lowpass`` when present."""
    maps = np.asarray(coeffs.maps, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[0] != len(dictionary):
        raise ValueError(f"expected {len(dictionary)} coefficient maps, got shape {maps.shape}")
    shape = maps.shape[1:]
    df = dictionary.spectra(shape)
    out = _irfft(np.sum(df * sfft.rfft2(maps, axes=(-2, -1)), axis=0), shape)
    if coeffs.lowpass is not None:
        if coeffs.lowpass.shape != shape:
            raise ValueError("lowpass component does not match coefficient map shape")
        out = out + coeffs.lowpass
    return out


def correlate(dictionary: Dictionary, img) -> CoefficientMaps:
    """Circular cross-correlation of ``img`` with every filter (adjoint of synthesis)."""
    x = as_image(img)
    df = dictionary.spectra(x.shape)
    return CoefficientMaps(_irfft(np.conj(df) * sfft.rfft2(x)[None], x.shape))


def weighted_shrink(v, threshold, weights=None) -> np.ndarray:
    """Soft threshold ``sign(v) * max(|v| - threshold * w, 0)``; ``w = 1`` when omitted."""
    v = np.asarray(v, dtype=np.float64)
    t = threshold if weights is None else threshold * np.asarray(weights)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def compute_weights(
    dictionary: Dictionary,
    y_h,
    epsilon: float = DEFAULT_EPSILON,
    w_cap: float = DEFAULT_W_CAP,
) -> np.ndarray:
    """Data-dependent l1 weights ``1 / (D_m^T y_h)^2``, clamped to ``(0, w_cap]``.

    Returns an ``(M, H, W)`` array.
    """
    if not (epsilon > 0 and w_cap > 0):
        raise ValueError("epsilon and w_cap must be positive")
    c = correlate(dictionary, y_h).maps
    return np.minimum(1.0 / np.maximum(c * c, epsilon), w_cap)


class _ShermanMorrison:
    """Solve ``(diag + a a^H) x = b`` per frequency with ``a = conj(df)``.

    :meth:`prepare` caches the factors that depend on ``diag``; call it again
    whenever ``diag`` changes.
    """

    def __init__(self, df: np.ndarray):
        self.df = df

    def prepare(self, diag) -> None:
        self.inv = 1.0 / diag
        self.ac = np.conj(self.df) * self.inv
        self.den = 1.0 + np.sum(self.df * self.ac, axis=0).real

    def solve(self, b: np.ndarray) -> np.ndarray:
        bc = b * self.inv
        num = np.sum(self.df * bc, axis=0)
        bc -= self.ac * (num / self.den)[None]
        return bc


def _sm_solve(df: np.ndarray, diag, b: np.ndarray) -> np.ndarray:
    sm = _ShermanMorrison(df)
    sm.prepare(diag)
    return sm.solve(b)


def _admm(s, df, l1w, params: CscParams, extra_diag=None, init=None):
    """Core ADMM loop for ``1/2 ||s - sum_c d_c * x_c||^2 + sum_c ||l1w_c . x_c||_1``.

    ``l1w`` broadcasts against ``(C, H, W)``; a zero weight leaves a channel
    unpenalised. ``extra_diag`` adds a per-frequency diagonal term to the
    coefficient update.
    """
    shape = s.shape
    nch = df.shape[0]
    dsf = np.conj(df) * sfft.rfft2(s)[None]
    rho = params.rho0
    y = np.zeros((nch,) + shape) if init is None else np.array(init, dtype=np.float64)
    u = np.zeros_like(y)
    primal: list[float] = []
    dual: list[float] = []
    converged = False
    it = 0
    solver = _ShermanMorrison(df)
    diag_rho = None
    for it in range(1, params.max_iter + 1):
        if diag_rho != rho:
            diag_rho = rho
            diag = rho if extra_diag is None else rho + extra_diag
            solver.prepare(diag)
        xf = solver.solve(dsf + rho * sfft.rfft2(y - u, axes=(-2, -1)))
        x = _irfft(xf, shape)
        y_prev = y
        y = weighted_shrink(x + u, l1w / rho)
        u = u + x - y

        r = np.linalg.norm(x - y)
        sd = rho * np.linalg.norm(y - y_prev)
        primal.append(float(r))
        dual.append(float(sd))
        nrm_xy = max(np.linalg.norm(x), np.linalg.norm(y))
        nrm_u = rho * np.linalg.norm(u)
        r_rel = r / nrm_xy if nrm_xy > 0 else 0.0
        s_rel = sd / nrm_u if nrm_u > 0 else 0.0
        if r_rel < params.rel_tol and s_rel < params.rel_tol:
            converged = True
            break
        if params.auto_rho and it % params.auto_rho_period == 0:
            if r_rel > 10.0 * s_rel:
                rho *= 2.0
                u /= 2.0
            elif s_rel > 10.0 * r_rel:
                rho /= 2.0
                u *= 2.0
    return y, SolveStats(it, primal, dual, converged, rho)


def csc_solve(y_h, dictionary: Dictionary, params: CscParams, weights=None, init=None) -> CoefficientMaps:
    """Solve (weighted) convolutional BPDN on ``y_h`` by ADMM.

    Minimises ``1/2 ||y_h - sum_m d_m * a_m||^2 + lmbda sum_m ||w_m . a_m||_1``
    with ``w_m = 1`` when ``weights`` is omitted. The returned maps are the
    post-shrinkage split variable, so shrunk entries are exact zeros.
    """
    s = as_image(y_h, "y_h")
    df = dictionary.spectra(s.shape)
    if weights is None:
        l1w = params.lmbda * np.ones((len(dictionary), 1, 1))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(dictionary),) + s.shape:
            raise ValueError(f"weights shape {w.shape} does not match maps")
        l1w = params.lmbda * w
    y, stats = _admm(s, df, l1w, params, init=init)
    return CoefficientMaps(y, None, stats)


def csc3_solve(y, dictionary: Dictionary, params: CscParams, init=None) -> CoefficientMaps:
    """Jointly estimate sparse maps and a smooth low-pass component.

    The low-pass component is an extra channel with an impulse filter, no l1
    penalty and an added ``mu |G(f)|^2`` on its diagonal.
    """
    if not params.mu > 0:
        raise ValueError("CSC-III requires mu > 0")
    s = as_image(y)
    m = len(dictionary)
    df = dictionary.spectra(s.shape)
    ones = np.ones((1,) + df.shape[1:], dtype=df.dtype)
    df_ext = np.concatenate([df, ones], axis=0)
    extra = np.zeros(df_ext.shape)
    extra[m] = params.mu * gradient_spectrum(s.shape)
    l1w = np.concatenate([params.lmbda * np.ones(m), [0.0]])[:, None, None]
    yv, stats = _admm(s, df_ext, l1w, params, extra_diag=extra, init=init)
    return CoefficientMaps(yv[:m], yv[m], stats)


def csc_objective(y, dictionary: Dictionary, coeffs: CoefficientMaps, lmbda: float, weights=None, mu: float = 0.0) -> float:
    """Value of the CSC-I/II/III objective at ``coeffs``."""
    s = as_image(y)
    resid = s - synthesize(dictionary, coeffs)
    a = np.abs(coeffs.maps)
    reg = lmbda * float(np.sum(a if weights is None else np.asarray(weights) * a))
    val = 0.5 * float(np.sum(resid**2)) + reg
    if coeffs.lowpass is not None and mu > 0:
        g = finite_difference(coeffs.lowpass)
        val += 0.5 * mu * float(np.sum(g.dx**2) + np.sum(g.dy**2))
    return val


def denoise(
    y_n,
    dictionary: Dictionary,
    params: CscParams,
    variant: Variant | str = Variant.CSC2,
    lambda_lpf: float = 7.0,
    epsilon: float = DEFAULT_EPSILON,
    w_cap: float = DEFAULT_W_CAP,
) -> np.ndarray:
    """Denoise ``y_n`` with one of the three CSC variants.

    CSC1 and CSC2 code the Tikhonov high-pass component and add the low-pass
    back; CSC2 first derives l1 weights from that high-pass component. CSC3
    codes the whole image with a jointly estimated smooth component.
    """
    variant = Variant(variant)
    y = as_image(y_n)
    if variant is Variant.CSC3:
        return synthesize(dictionary, csc3_solve(y, dictionary, params))
    low, high = highpass_split(y, lambda_lpf)
    weights = compute_weights(dictionary, high, epsilon, w_cap) if variant is Variant.CSC2 else None
    coeffs = csc_solve(high, dictionary, params, weights)
    return synthesize(dictionary, coeffs) + low
