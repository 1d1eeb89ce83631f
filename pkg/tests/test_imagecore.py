import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csrtomo.imagecore import (
    PSNR_INF_SENTINEL,
    GradientField,
    finite_difference,
    finite_difference_adjoint,
    highpass_split,
    psnr,
    psnr_for_csv,
    read_image,
    read_imgf,
    read_pgm,
    tikhonov_lowpass,
    write_imgf,
    write_pgm,
)


def dense_gradient(h, w):
    """Stack the dense matrices of the horizontal and vertical differences."""
    n = h * w
    g = np.zeros((2 * n, n))
    for q in range(n):
        e = np.zeros(n)
        e[q] = 1.0
        f = finite_difference(e.reshape(h, w))
        g[:n, q] = f.dx.ravel()
        g[n:, q] = f.dy.ravel()
    return g


def test_constant_has_zero_gradient():
    f = finite_difference(np.full((5, 7), 3.2))
    assert np.all(f.dx == 0) and np.all(f.dy == 0)


def test_two_pixel_wrap():
    f = finite_difference(np.array([[0.0, 1.0]]))
    np.testing.assert_array_equal(f.dx, [[1.0, -1.0]])
    np.testing.assert_array_equal(f.dy, [[0.0, 0.0]])


def test_adjoint_matches_dense_transpose_8x8():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 8))
    z = GradientField(rng.standard_normal((8, 8)), rng.standard_normal((8, 8)))
    g = dense_gradient(8, 8)
    gx = finite_difference(x)
    lhs = np.dot(np.concatenate([gx.dx.ravel(), gx.dy.ravel()]), np.concatenate([z.dx.ravel(), z.dy.ravel()]))
    rhs = np.dot(x.ravel(), finite_difference_adjoint(z).ravel())
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)
    dense = g.T @ np.concatenate([z.dx.ravel(), z.dy.ravel()])
    np.testing.assert_allclose(finite_difference_adjoint(z).ravel(), dense, rtol=0, atol=1e-12)


def test_adjoint_dense_6x6():
    rng = np.random.default_rng(1)
    z = GradientField(rng.standard_normal((6, 6)), rng.standard_normal((6, 6)))
    dense = dense_gradient(6, 6).T @ np.concatenate([z.dx.ravel(), z.dy.ravel()])
    out = finite_difference_adjoint(z).ravel()
    assert np.linalg.norm(out - dense) <= 1e-10 * np.linalg.norm(dense)


def test_adjoint_trivial_cases():
    zero = GradientField(np.zeros((4, 4)), np.zeros((4, 4)))
    assert np.all(finite_difference_adjoint(zero) == 0)
    assert np.all(finite_difference_adjoint(finite_difference(np.full((4, 5), 2.0))) == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31 - 1))
def test_adjoint_identity_property(h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((h, w))
    z = GradientField(rng.standard_normal((h, w)), rng.standard_normal((h, w)))
    gx = finite_difference(x)
    lhs = np.sum(gx.dx * z.dx) + np.sum(gx.dy * z.dy)
    rhs = np.sum(x * finite_difference_adjoint(z))
    scale = np.linalg.norm(x) * np.hypot(np.linalg.norm(z.dx), np.linalg.norm(z.dy))
    assert abs(lhs - rhs) <= 1e-10 * scale


def test_lowpass_zero_lambda_is_identity():
    x = np.random.default_rng(2).standard_normal((9, 7))
    assert np.array_equal(tikhonov_lowpass(x, 0.0), x)


@pytest.mark.parametrize("lam", [0.5, 7.0, 100.0])
def test_lowpass_preserves_constants(lam):
    c = np.full((6, 10), 0.37)
    np.testing.assert_allclose(tikhonov_lowpass(c, lam), c, rtol=1e-12)


@pytest.mark.parametrize("n", [4, 8])
def test_lowpass_matches_dense_solve(n):
    rng = np.random.default_rng(n)
    y = rng.standard_normal((n, n))
    g = dense_gradient(n, n)
    dense = np.linalg.solve(np.eye(n * n) + 7.0 * g.T @ g, y.ravel()).reshape(n, n)
    out = tikhonov_lowpass(y, 7.0)
    assert np.linalg.norm(out - dense) <= 1e-8 * np.linalg.norm(dense)


def test_lowpass_rejects_negative_lambda():
    with pytest.raises(ValueError):
        tikhonov_lowpass(np.zeros((3, 3)), -1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31 - 1))
def test_lowpass_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 12, 10))
    lhs = tikhonov_lowpass(a * x + b * y, 7.0)
    rhs = a * tikhonov_lowpass(x, 7.0) + b * tikhonov_lowpass(y, 7.0)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * (1 + abs(a) + abs(b)))


def test_split_recombines_exactly():
    x = np.random.default_rng(3).standard_normal((16, 16))
    low, high = highpass_split(x, 7.0)
    assert np.array_equal(x - low, high)
    np.testing.assert_allclose(low + high, x, rtol=0, atol=1e-15)


def test_smoothing_monotone_in_lambda():
    x = np.random.default_rng(4).standard_normal((32, 32))
    norms = []
    for lam in (0.0, 1.0, 7.0, 50.0):
        g = finite_difference(tikhonov_lowpass(x, lam))
        norms.append(np.hypot(np.linalg.norm(g.dx), np.linalg.norm(g.dy)))
    assert all(b <= a for a, b in zip(norms, norms[1:]))


def test_psnr_values():
    ref = np.zeros((10, 10))
    ref[0, 0] = 1.0
    assert psnr(ref, ref) == float("inf")
    assert psnr(ref, ref + 0.1, peak=1.0) == pytest.approx(20.0, abs=1e-9)
    assert psnr(ref, ref + 0.01, peak=1.0) == pytest.approx(40.0, abs=1e-9)
    # default peak is the reference maximum
    assert psnr(2 * ref, 2 * ref + 0.2) == pytest.approx(20.0, abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))


def test_psnr_sentinel():
    assert psnr_for_csv(float("inf")) == PSNR_INF_SENTINEL == 999.0
    assert psnr_for_csv(12.5) == 12.5


def test_imgf_roundtrip_bit_exact(tmp_path):
    x = np.random.default_rng(5).standard_normal((7, 11)).astype(np.float32)
    p = tmp_path / "a.imgf"
    write_imgf(p, x)
    back = read_imgf(p)
    assert np.array_equal(back.astype(np.float32).view(np.uint32), x.view(np.uint32))
    assert np.array_equal(read_image(p), back)
    raw = p.read_bytes()
    assert raw[:5] == b"IMGF1" and len(raw) == 13 + 4 * 77


def test_imgf_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.imgf"
    p.write_bytes(b"NOPE1" + bytes(8))
    with pytest.raises(ValueError):
        read_imgf(p)
    write_imgf(p, np.zeros((4, 4)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError):
        read_imgf(p)


def test_pgm_roundtrip(tmp_path):
    x = np.random.default_rng(6).uniform(0, 1, (9, 5))
    p = tmp_path / "a.pgm"
    write_pgm(p, x)
    back = read_pgm(p)
    assert back.shape == x.shape
    assert np.max(np.abs(back - x)) <= 0.5 / 65535 + 1e-12
    assert p.read_bytes().startswith(b"P5\n5 9\n65535\n")


def test_pgm_8bit_with_comment(tmp_path):
    p = tmp_path / "b.pgm"
    p.write_bytes(b"P5\n# made by hand\n3 2\n255\n" + bytes([0, 51, 255, 102, 0, 255]))
    np.testing.assert_allclose(read_pgm(p), [[0, 0.2, 1], [0.4, 0, 1]])
