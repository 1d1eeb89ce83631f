import math

import numpy as np
import pytest

from csrtomo.imagecore import psnr
from csrtomo.phantoms import (
    SHEPP_LOGAN_ELLIPSES,
    add_image_noise,
    add_noise,
    disk,
    grains,
    make_phantom,
    noise_sigma,
    shepp_logan,
)
from csrtomo.tomo import Geometry, Sinogram, project


def test_disk_values_and_mass():
    x = disk(64)
    assert abs(x.sum() - math.pi * 16**2) <= 0.01 * math.pi * 16**2
    r = np.hypot(*np.mgrid[:64, :64] - 31.5)
    assert np.all(x[r < 14] == 1.0)
    assert np.all(x[r > 18] == 0.0)


def test_shepp_logan_centre_matches_ellipse_sum():
    side = 65
    x = shepp_logan(side)
    expected = 0.0
    for val, a, b, x0, y0, phi in SHEPP_LOGAN_ELLIPSES:
        t = math.radians(phi)
        xr = -x0 * math.cos(t) - y0 * math.sin(t)
        yr = x0 * math.sin(t) - y0 * math.cos(t)
        if (xr / a) ** 2 + (yr / b) ** 2 <= 1:
            expected += val
    assert x[32, 32] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.2)


def test_grains_deterministic_and_in_range():
    a, b = grains(48, 9), grains(48, 9)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, grains(48, 10))
    assert a.min() >= 0.2 and a.max() <= 1.0
    assert 2 <= len(np.unique(a)) <= max(8, 48 * 48 // 200)


def test_make_phantom_dispatch_and_errors():
    assert np.array_equal(make_phantom("grains", 32, 4), grains(32, 4))
    assert np.array_equal(make_phantom("disk", 32), disk(32))
    with pytest.raises(ValueError):
        make_phantom("cube", 32)
    with pytest.raises(ValueError):
        make_phantom("disk", 15)


def test_noise_sigma_formula():
    assert noise_sigma(1.0, 20.0) == pytest.approx(0.1)
    assert noise_sigma(4.0, 40.0) == pytest.approx(0.04)


def test_sinogram_noise_hits_target_psnr():
    x = shepp_logan(64)
    s = project(x, Geometry.parallel(64, 256))
    for target in (14.0, 20.0, 26.0):
        noisy = add_noise(s, target, seed=1)
        assert abs(psnr(s.data, noisy.data) - target) <= 0.3


def test_vanishing_noise():
    s = project(disk(32), Geometry.parallel(32, 16))
    assert psnr(s.data, add_noise(s, 140.0, 0).data) >= 100.0


def test_noise_deterministic_under_seed():
    s = project(disk(32), Geometry.parallel(32, 16))
    assert np.array_equal(add_noise(s, 20, 3).data, add_noise(s, 20, 3).data)
    assert not np.array_equal(add_noise(s, 20, 3).data, add_noise(s, 20, 4).data)
    x = grains(32, 1)
    assert np.array_equal(add_image_noise(x, 20, 2), add_image_noise(x, 20, 2))


def test_noise_errors():
    g = Geometry.parallel(16, 4)
    with pytest.raises(ValueError):
        add_noise(Sinogram(np.zeros(g.sino_shape), g), 20.0, 0)
    s = project(disk(16), g)
    with pytest.raises(ValueError):
        add_noise(s, 0.0, 0)
