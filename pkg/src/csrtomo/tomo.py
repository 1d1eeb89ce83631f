"""Parallel-beam projector, FBP, and the OGM-based solvers.

The projector is ray driven with Joseph (linear) interpolation. Its weights
are assembled once per geometry into a sparse matrix ``A`` so that the
backprojector is the literal transpose ``A.T``.

Coordinates: pixel ``(i, j)`` of an ``N x N`` image sits at
``x = j - (N-1)/2``, ``y = (N-1)/2 - i``; detector ``k`` at
``t = (k - (n_det-1)/2) * spacing``. The ray of view ``theta`` through ``t`` is
the line ``x cos(theta) + y sin(theta) = t``.
"""

from __future__ import annotations

import functools
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .imagecore import as_image

_SINO_MAGIC = b"SINO1"


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam acquisition geometry (angles in radians).

    ``identity=True`` selects the test hook ``A = I`` with a sinogram shaped
    like the image.
    """

    angles: tuple[float, ...]
    num_detectors: int
    image_side: int
    detector_spacing: float = 1.0
    identity: bool = False

    def __post_init__(self):
        if self.image_side < 1:
            raise ValueError("image_side must be positive")
        if self.identity:
            object.__setattr__(self, "angles", tuple(float(i) for i in range(self.image_side)))
            object.__setattr__(self, "num_detectors", self.image_side)
            return
        if len(self.angles) == 0:
            raise ValueError("geometry needs at least one view")
        if self.num_detectors < 1 or not self.detector_spacing > 0:
            raise ValueError("num_detectors and detector_spacing must be positive")
        object.__setattr__(self, "angles", tuple(float(a) % math.pi for a in self.angles))
        if self.num_detectors * self.detector_spacing < math.sqrt(2) * self.image_side:
            warnings.warn("detector row does not cover the image diagonal", stacklevel=2)

    @classmethod
    def parallel(cls, image_side: int, views: int, start_deg: float = 0.0, stop_deg: float = 180.0,
                 num_detectors: int | None = None, detector_spacing: float = 1.0) -> "Geometry":
        """Equally spaced views on ``[start_deg, stop_deg)``; full-circle spans exclude the endpoint.

        A limited-angle span (shorter than 180 degrees) includes both ends.
        """
        span = stop_deg - start_deg
        endpoint = span < 180.0
        ang = np.deg2rad(np.linspace(start_deg, stop_deg, views, endpoint=endpoint))
        if num_detectors is None:
            num_detectors = math.ceil(math.sqrt(2) * image_side / detector_spacing)
        return cls(tuple(ang.tolist()), num_detectors, image_side, detector_spacing)

    @classmethod
    def identity_hook(cls, image_side: int) -> "Geometry":
        return cls((), image_side, image_side, identity=True)

    @property
    def num_views(self) -> int:
        return len(self.angles)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.num_views, self.num_detectors)


@dataclass
class Sinogram:
    data: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.geometry.sino_shape:
            raise ValueError(f"sinogram shape {self.data.shape} != geometry {self.geometry.sino_shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram contains non-finite values")

    def with_data(self, data) -> "Sinogram":
        return Sinogram(data, self.geometry)


@dataclass
class NoiseWeights:
    """Diagonal inverse-variance weights; ``values=None`` means identity."""

    values: np.ndarray | None = None

    def __post_init__(self):
        if self.values is not None:
            self.values = np.asarray(self.values, dtype=np.float64)
            if not np.all(self.values > 0):
                raise ValueError("noise weights must be positive")

    @property
    def is_identity(self) -> bool:
        return self.values is None

    def apply(self, r: np.ndarray) -> np.ndarray:
        return r if self.values is None else self.values * r


IDENTITY_WEIGHTS = NoiseWeights()


# --------------------------------------------------------------------------
# System matrix


def _joseph_view(theta: float, n: int, nd: int, spacing: float):
    c, s = math.cos(theta), math.sin(theta)
    t = (np.arange(nd) - (nd - 1) / 2.0) * spacing
    half = (n - 1) / 2.0
    steps = np.arange(n)
    if abs(c) >= abs(s):
        # step through rows; interpolate along x
        yv = half - steps
        xpos = (t[:, None] - yv[None, :] * s) / c
        frac_idx = xpos + half
        step_len = 1.0 / abs(c)
        rows = np.broadcast_to(steps[None, :], frac_idx.shape)
        j0 = np.floor(frac_idx).astype(np.int64)
        f = frac_idx - j0
        cand = [(rows, j0, 1.0 - f), (rows, j0 + 1, f)]
    else:
        # step through columns; interpolate along y
        xv = steps - half
        ypos = (t[:, None] - xv[None, :] * c) / s
        frac_idx = half - ypos
        step_len = 1.0 / abs(s)
        cols = np.broadcast_to(steps[None, :], frac_idx.shape)
        i0 = np.floor(frac_idx).astype(np.int64)
        f = frac_idx - i0
        cand = [(i0, cols, 1.0 - f), (i0 + 1, cols, f)]
    det = np.broadcast_to(np.arange(nd)[:, None], frac_idx.shape)
    out_r, out_p, out_w = [], [], []
    for ii, jj, ww in cand:
        ok = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n) & (ww > 0)
        out_r.append(det[ok])
        out_p.append(ii[ok] * n + jj[ok])
        out_w.append(ww[ok] * step_len)
    return np.concatenate(out_r), np.concatenate(out_p), np.concatenate(out_w)


@functools.lru_cache(maxsize=32)
def system_matrix(geom: Geometry) -> sp.csr_matrix:
    """Sparse ``(views * detectors, side * side)`` projection matrix."""
    n = geom.image_side
    if geom.identity:
        return sp.identity(n * n, format="csr", dtype=np.float64)
    nd = geom.num_detectors
    rows, cols, vals = [], [], []
    for v, theta in enumerate(geom.angles):
        r, p, w = _joseph_view(theta, n, nd, geom.detector_spacing)
        rows.append(r + v * nd)
        cols.append(p)
        vals.append(w)
    a = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.num_views * nd, n * n),
    )
    return a.tocsr()


@functools.lru_cache(maxsize=32)
def _transpose(geom: Geometry) -> sp.csr_matrix:
    return system_matrix(geom).T.tocsr()


def project(img, geom: Geometry) -> Sinogram:
    """Line integrals of ``img`` along every ray of ``geom``."""
    x = as_image(img)
    if x.shape != (geom.image_side, geom.image_side):
        raise ValueError(f"image shape {x.shape} does not match geometry side {geom.image_side}")
    return Sinogram((system_matrix(geom) @ x.ravel()).reshape(geom.sino_shape), geom)


def backproject(sino: Sinogram) -> np.ndarray:
    """Exact adjoint of :func:`project`."""
    g = sino.geometry
    return (_transpose(g) @ sino.data.ravel()).reshape(g.image_side, g.image_side)


def _ramp_filter(n: int, spacing: float) -> np.ndarray:
    """Frequency response of the band-limited Ram-Lak kernel on ``n`` padded samples."""
    k = np.arange(n)
    k = np.where(k > n // 2, k - n, k)
    h = np.zeros(n)
    h[0] = 0.25
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd]) ** 2
    return np.real(np.fft.fft(h)) / spacing


def fbp(sino: Sinogram) -> np.ndarray:
    """Ramp-filtered backprojection scaled by ``pi / num_views``."""
    g = sino.geometry
    if g.identity:
        return sino.data.copy()
    if g.num_views < 2:
        raise ValueError("FBP needs at least two views")
    nd = g.num_detectors
    npad = 1 << int(math.ceil(math.log2(2 * nd)))
    filt = _ramp_filter(npad, g.detector_spacing)
    q = np.real(np.fft.ifft(np.fft.fft(sino.data, n=npad, axis=1) * filt, axis=1))[:, :nd]
    return (math.pi / g.num_views) * g.detector_spacing * backproject(sino.with_data(q))


# --------------------------------------------------------------------------
# Solvers


def power_iteration(apply_op, shape, iters: int = 20) -> float:
    """Largest eigenvalue estimate of a symmetric PSD operator, started from ones."""
    v = np.ones(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = apply_op(v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


@functools.lru_cache(maxsize=32)
def _normal_op_norm(geom: Geometry) -> float:
    a, at = system_matrix(geom), _transpose(geom)
    n2 = geom.image_side**2
    return power_iteration(lambda v: at @ (a @ v), n2)


def data_lipschitz(geom: Geometry, w: NoiseWeights = IDENTITY_WEIGHTS) -> float:
    """Power-iteration estimate of ``||A^T W A||`` (cached per geometry when ``W = I``)."""
    if w.is_identity:
        return _normal_op_norm(geom)
    a, at = system_matrix(geom), _transpose(geom)
    wv = w.values.ravel()
    return power_iteration(lambda v: at @ (wv * (a @ v)), geom.image_side**2)


def _data_grad(geom: Geometry, w: NoiseWeights, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    a, at = system_matrix(geom), _transpose(geom)
    r = a @ x.ravel() - y.ravel()
    r = r if w.is_identity else w.values.ravel() * r
    return (at @ r).reshape(x.shape)


def ogm(grad, x0: np.ndarray, lipschitz: float, iters: int) -> np.ndarray:
    """Optimized gradient method (Kim & Fessler) with the final-step modification."""
    x = x0.copy()
    y_old = x0.copy()
    theta = 1.0
    for k in range(iters):
        y_new = x - grad(x) / lipschitz
        if k < iters - 1:
            theta_new = (1.0 + math.sqrt(1.0 + 4.0 * theta**2)) / 2.0
        else:
            theta_new = (1.0 + math.sqrt(1.0 + 8.0 * theta**2)) / 2.0
        x = (y_new + ((theta - 1.0) / theta_new) * (y_new - y_old)
             + (theta / theta_new) * (y_new - x))
        y_old = y_new
        theta = theta_new
    return x


def solve_f(y: Sinogram, w: NoiseWeights, x_tilde, beta: float, iters: int = 25) -> np.ndarray:
    """Partially minimise ``1/2 (||y - A x||_W^2 + beta ||x - x_tilde||^2)`` with OGM.

    Warm-started from ``x_tilde``; step ``1/L`` with ``L`` 5% above the
    power-iteration estimate of ``||A^T W A|| + beta``.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    if iters < 1:
        raise ValueError("iters must be at least 1")
    xt = as_image(x_tilde, "x_tilde")
    geom = y.geometry
    lip = 1.05 * (data_lipschitz(geom, w) + beta)

    def grad(x):
        return _data_grad(geom, w, x, y.data) + beta * (x - xt)

    return ogm(grad, xt, lip, iters)


@dataclass
class MrfParams:
    """Generalised-Gaussian MRF prior ``gamma * sum b_ij (|x_i - x_j|^2 + eps^2)^(p/2)``."""

    p: float = 1.2
    gamma: float = 1.0
    smooth_eps: float = 1e-3
    iters: int = 300

    def __post_init__(self):
        if not 1.0 < self.p <= 2.0:
            raise ValueError("p must lie in (1, 2]")
        if not (self.gamma > 0 and self.smooth_eps > 0):
            raise ValueError("gamma and smooth_eps must be positive")
        if self.iters < 1:
            raise ValueError("iters must be at least 1")


# offsets covering each 8-neighbour pair once; weights 1/distance normalised
# so the eight neighbours of a pixel sum to one
_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))
_NB_NORM = 4.0 + 4.0 / math.sqrt(2.0)
_NB_WEIGHTS = tuple(1.0 / math.hypot(*o) / _NB_NORM for o in _OFFSETS)


def _pair_slices(shape, off):
    di, dj = off
    n0, n1 = shape
    sa = (slice(0, n0 - di), slice(max(0, -dj), n1 - max(0, dj)))
    sb = (slice(di, n0), slice(max(0, dj), n1 + min(0, dj)))
    return sa, sb


def mrf_prior(x: np.ndarray, params: MrfParams) -> tuple[float, np.ndarray]:
    """Value and gradient of the smoothed MRF penalty (including ``gamma``)."""
    p, eps2 = params.p, params.smooth_eps**2
    val = 0.0
    grad = np.zeros_like(x)
    for off, b in zip(_OFFSETS, _NB_WEIGHTS):
        sa, sb = _pair_slices(x.shape, off)
        d = x[sb] - x[sa]
        q = d * d + eps2
        val += b * float(np.sum(q ** (p / 2.0)))
        g = b * p * d * q ** (p / 2.0 - 1.0)
        grad[sb] += g
        grad[sa] -= g
    return params.gamma * val, params.gamma * grad


def mrf_lipschitz_bound(params: MrfParams) -> float:
    """Upper bound on the Hessian norm of :func:`mrf_prior`."""
    # max second derivative of (d^2 + eps^2)^(p/2) is p eps^(p-2), at d = 0
    curv = params.p * params.smooth_eps ** (params.p - 2.0)
    return params.gamma * curv * 4.0 * sum(_NB_WEIGHTS)


@dataclass
class MrfResult:
    image: np.ndarray
    cost: list[float] = field(default_factory=list)
    restarts: int = 0


def mrf_reconstruct(y: Sinogram, w: NoiseWeights, params: MrfParams, x0=None) -> MrfResult:
    """Minimise ``1/2 ||y - A x||_W^2 + MRF(x)`` by OGM with monotone restart.

    Starts from FBP unless ``x0`` is given. Whenever a momentum step would
    raise the cost, momentum is reset and a plain gradient step is taken
    instead (with backtracking on ``L`` if even that fails), so the recorded
    cost trace never increases.
    """
    geom = y.geometry
    x = fbp(y) if x0 is None else as_image(x0).copy()
    lip = 1.05 * data_lipschitz(geom, w) + mrf_lipschitz_bound(params)

    def cost_grad(z):
        r = (system_matrix(geom) @ z.ravel() - y.data.ravel())
        wr = r if w.is_identity else w.values.ravel() * r
        pv, pg = mrf_prior(z, params)
        g = (_transpose(geom) @ wr).reshape(z.shape) + pg
        return 0.5 * float(r @ wr) + pv, g

    fx, gx = cost_grad(x)
    trace = [fx]
    restarts = 0
    y_old = x.copy()
    theta = 1.0
    for _ in range(params.iters):
        y_new = x - gx / lip
        theta_new = (1.0 + math.sqrt(1.0 + 4.0 * theta**2)) / 2.0
        x_new = (y_new + ((theta - 1.0) / theta_new) * (y_new - y_old)
                 + (theta / theta_new) * (y_new - x))
        f_new, g_new = cost_grad(x_new)
        if f_new > fx:
            restarts += 1
            theta_new = 1.0
            x_new = y_new
            f_new, g_new = cost_grad(x_new)
            while f_new > fx:
                lip *= 2.0
                x_new = x - gx / lip
                f_new, g_new = cost_grad(x_new)
            y_new = x_new
        x, fx, gx = x_new, f_new, g_new
        y_old = y_new
        theta = theta_new
        trace.append(fx)
    return MrfResult(x, trace, restarts)


# --------------------------------------------------------------------------
# Sinogram files


def write_sinogram(path, sino: Sinogram) -> None:
    g = sino.geometry
    with open(path, "wb") as fh:
        fh.write(_SINO_MAGIC)
        fh.write(struct.pack("<IIf", g.num_views, g.num_detectors, g.detector_spacing))
        fh.write(np.asarray(g.angles, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sino.data, dtype="<f4").tobytes())


def read_sinogram(path, image_side: int | None = None) -> Sinogram:
    """Read a SINO1 file. ``image_side`` defaults to ``floor(n_det * spacing / sqrt 2)``."""
    raw = Path(path).read_bytes()
    if raw[:5] != _SINO_MAGIC:
        raise ValueError(f"{path}: bad SINO1 magic")
    nv, nd, spacing = struct.unpack("<IIf", raw[5:17])
    off = 17
    need = off + 4 * nv + 4 * nv * nd
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    angles = np.frombuffer(raw[off : off + 4 * nv], dtype="<f4").astype(np.float64)
    data = np.frombuffer(raw[off + 4 * nv :], dtype="<f4").reshape(nv, nd).astype(np.float64)
    if image_side is None:
        image_side = int(math.floor(nd * spacing / math.sqrt(2)))
    geom = Geometry(tuple(angles.tolist()), nd, image_side, float(spacing))
    return Sinogram(data, geom)
