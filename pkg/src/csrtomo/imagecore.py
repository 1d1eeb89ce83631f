"""Grid arithmetic shared by every other module.

Images are plain 2-D ``float64`` numpy arrays. All difference operators use
circular boundaries so that ``G^T G`` is diagonalised by the 2-D DFT.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.fft as sfft

#: Value written in place of an infinite PSNR in serialized output.
PSNR_INF_SENTINEL = 999.0

_IMGF_MAGIC = b"IMGF1"


class GradientField(NamedTuple):
    """Horizontal and vertical first differences of an image."""

    dx: np.ndarray
    dy: np.ndarray


def as_image(img, name: str = "image") -> np.ndarray:
    """Validate and return ``img`` as a finite 2-D float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def finite_difference(img) -> GradientField:
    """Forward differences with circular wrap.

    ``dx[i, j] = img[i, j+1] - img[i, j]`` and ``dy[i, j] = img[i+1, j] - img[i, j]``,
    indices taken modulo the image shape.
    """
    x = as_image(img)
    return GradientField(np.roll(x, -1, axis=1) - x, np.roll(x, -1, axis=0) - x)


def finite_difference_adjoint(g: GradientField) -> np.ndarray:
    """Exact transpose of :func:`finite_difference`."""
    dx = np.asarray(g.dx, dtype=np.float64)
    dy = np.asarray(g.dy, dtype=np.float64)
    if dx.shape != dy.shape:
        raise ValueError("gradient components differ in shape")
    return (np.roll(dx, 1, axis=1) - dx) + (np.roll(dy, 1, axis=0) - dy)


def gradient_spectrum(shape: tuple[int, int], real: bool = True) -> np.ndarray:
    """DFT of ``G^T G`` on a grid of the given shape, i.e. ``|G_x(f)|^2 + |G_y(f)|^2``.

    With ``real=True`` the half spectrum matching ``rfft2`` is returned.
    """
    h, w = shape
    fy = np.arange(h)[:, None]
    fx = (np.arange(w // 2 + 1) if real else np.arange(w))[None, :]
    return 4.0 * np.sin(np.pi * fy / h) ** 2 + 4.0 * np.sin(np.pi * fx / w) ** 2


def tikhonov_lowpass(img, lambda_lpf: float) -> np.ndarray:
    """Solve ``(I + lambda_lpf G^T G) l = img`` exactly in the frequency domain."""
    x = as_image(img)
    if lambda_lpf < 0:
        raise ValueError("lambda_lpf must be non-negative")
    if lambda_lpf == 0:
        return x.copy()
    spec = sfft.rfft2(x)
    spec /= 1.0 + lambda_lpf * gradient_spectrum(x.shape)
    return sfft.irfft2(spec, s=x.shape)


def highpass_split(img, lambda_lpf: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(lowpass, highpass)`` with ``lowpass + highpass == img``."""
    x = as_image(img)
    low = tikhonov_lowpass(x, lambda_lpf)
    return low, x - low


def psnr(reference, test, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB.

    ``peak`` defaults to the maximum of ``reference``. Returns ``inf`` when the
    two images are identical.
    """
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {tst.shape}")
    if peak is None:
        peak = float(ref.max())
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak**2 / mse)


def psnr_for_csv(value: float) -> float:
    """Map an infinite PSNR onto :data:`PSNR_INF_SENTINEL`."""
    return PSNR_INF_SENTINEL if np.isinf(value) else float(value)


# --------------------------------------------------------------------------
# Image files


def write_imgf(path, img) -> None:
    """Write ``img`` in the raw IMGF1 float32 format."""
    arr = np.ascontiguousarray(img, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("IMGF1 holds 2-D images only")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_IMGF_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(arr.tobytes())


def read_imgf(path) -> np.ndarray:
    """Read an IMGF1 file; values are returned as float64."""
    raw = Path(path).read_bytes()
    if raw[:5] != _IMGF_MAGIC:
        raise ValueError(f"{path}: bad IMGF1 magic")
    if len(raw) < 13:
        raise ValueError(f"{path}: truncated header")
    h, w = struct.unpack("<II", raw[5:13])
    body = raw[13:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {4 * h * w} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def write_pgm(path, img, vmin: float = 0.0, vmax: float = 1.0) -> None:
    """Write a 16-bit binary PGM, mapping ``[vmin, vmax]`` onto ``[0, 65535]``."""
    arr = np.asarray(img, dtype=np.float64)
    scaled = np.clip((arr - vmin) / (vmax - vmin), 0.0, 1.0)
    data = np.round(scaled * 65535).astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8- or 16-bit binary PGM and scale to ``[0, 1]``."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h
    body = raw[pos : pos + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise ValueError(f"{path}: truncated PGM data")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.float64) / maxval


def read_image(path) -> np.ndarray:
    """Read either an IMGF1 or a PGM file, chosen by content."""
    with open(path, "rb") as fh:
        head = fh.read(5)
    if head == _IMGF_MAGIC:
        return read_imgf(path)
    return read_pgm(path)
