"""Synthetic test objects and measurement noise."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .tomo import Sinogram

PHANTOM_KINDS = ("disk", "shepp_logan", "grains")

# modified Shepp-Logan (Toft): intensity, semi-axes a, b, centre x0, y0, angle (deg)
SHEPP_LOGAN_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def _centred_coords(side: int):
    c = (side - 1) / 2.0
    i, j = np.mgrid[:side, :side].astype(np.float64)
    return j - c, c - i


def disk(side: int, supersample: int = 8) -> np.ndarray:
    """Centred disk of radius ``side / 4`` and value 1, antialiased by supersampling."""
    r = side / 4.0
    c = (side - 1) / 2.0
    off = (np.arange(supersample) + 0.5) / supersample - 0.5
    i = np.arange(side)[:, None] + off[None, :]
    ys = (i - c).ravel()
    xs = ys.copy()
    inside = (ys[:, None] ** 2 + xs[None, :] ** 2) <= r * r
    return inside.reshape(side, supersample, side, supersample).mean(axis=(1, 3))


def shepp_logan(side: int) -> np.ndarray:
    """Modified Shepp-Logan phantom sampled at pixel centres on ``[-1, 1]^2``."""
    x, y = _centred_coords(side)
    half = side / 2.0
    x, y = x / half, y / half
    img = np.zeros((side, side))
    for val, a, b, x0, y0, phi in SHEPP_LOGAN_ELLIPSES:
        t = np.deg2rad(phi)
        xr = (x - x0) * np.cos(t) + (y - y0) * np.sin(t)
        yr = -(x - x0) * np.sin(t) + (y - y0) * np.cos(t)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    return img


def grains(side: int, seed: int, n_grains: int | None = None) -> np.ndarray:
    """Voronoi tessellation with piecewise-constant grain values in ``[0.2, 1]``."""
    rng = np.random.default_rng(seed)
    if n_grains is None:
        n_grains = max(8, side * side // 200)
    sites = rng.uniform(0, side, size=(n_grains, 2))
    values = rng.uniform(0.2, 1.0, size=n_grains)
    i, j = np.mgrid[:side, :side]
    pts = np.column_stack([i.ravel() + 0.5, j.ravel() + 0.5])
    _, owner = cKDTree(sites).query(pts)
    return values[owner].reshape(side, side)


def make_phantom(kind: str, side: int, seed: int = 0) -> np.ndarray:
    if side < 16:
        raise ValueError("phantom side must be at least 16")
    if kind == "disk":
        return disk(side)
    if kind == "shepp_logan":
        return shepp_logan(side)
    if kind == "grains":
        return grains(side, seed)
    raise ValueError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")


def noise_sigma(peak: float, target_psnr_db: float) -> float:
    return peak * 10.0 ** (-target_psnr_db / 20.0)


def add_image_noise(img, target_psnr_db: float, seed: int) -> np.ndarray:
    """Gaussian noise with ``sigma = max(img) * 10^(-psnr/20)``."""
    x = np.asarray(img, dtype=np.float64)
    sigma = noise_sigma(float(x.max()), target_psnr_db)
    return x + sigma * np.random.default_rng(seed).standard_normal(x.shape)


def add_noise(sino: Sinogram, target_psnr_db: float, seed: int) -> Sinogram:
    """I.i.d. Gaussian noise at the requested projection-domain PSNR (peak = sinogram max)."""
    if not target_psnr_db > 0:
        raise ValueError("target PSNR must be positive")
    peak = float(np.max(sino.data))
    if peak <= 0:
        raise ValueError("sinogram has no positive peak; PSNR reference undefined")
    sigma = noise_sigma(peak, target_psnr_db)
    noisy = sino.data + sigma * np.random.default_rng(seed).standard_normal(sino.data.shape)
    return sino.with_data(noisy)
