import numpy as np
import pytest

import oracles
from srlab import spectral as S
from srlab import tensor as T


def _rel(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


def test_constant_image_dc_only():
    s = S.fft2(np.full((4, 6), 0.3)).to_complex()
    assert s[0, 0] == pytest.approx(0.3 * 24)
    s[0, 0] = 0
    assert np.abs(s).max() < 1e-6


def test_cosine_two_bins():
    H = 8
    u = np.arange(H)[:, None] * np.ones((1, H))
    s = np.abs(S.fft2(np.cos(2 * np.pi * u / H)).to_complex())
    assert set(zip(*np.nonzero(s > 1e-9))) == {(1, 0), (H - 1, 0)}


def test_fft2_vs_direct_dft(rng):
    x = rng.standard_normal((8, 8))
    assert _rel(S.fft2(x).to_complex(), oracles.dft2(x)) < 1e-6


def test_ifft2_round_trip_32bit(rng):
    x = rng.random((32, 32)).astype(np.float32)
    assert np.abs(S.ifft2(S.fft2(x)) - x).max() < 1e-5


def test_ifft2_zero():
    z = np.zeros((4, 4))
    np.testing.assert_array_equal(S.ifft2(S.ComplexSpectrum(z, z)), z)


def test_ifft2_vs_direct_inverse():
    s = np.zeros((4, 4), dtype=complex)
    s[0, 0] = 2.0
    s[1, 2], s[3, 2] = 1 + 2j, 1 - 2j
    s[2, 0] = -0.5
    s[0, 1], s[0, 3] = 0.25j, -0.25j
    want = oracles.idft2(s)
    assert np.abs(want.imag).max() < 1e-12
    got = S.ifft2(S.ComplexSpectrum.from_complex(s))
    assert np.abs(got - want.real).max() < 1e-6


def test_ifft2_rejects_asymmetric_spectrum():
    s = np.zeros((4, 4), dtype=complex)
    s[1, 1] = 1.0
    with pytest.raises(ValueError):
        S.ifft2(S.ComplexSpectrum.from_complex(s))


def test_parseval(rng):
    x = rng.standard_normal((16, 16)).astype(np.float32)
    s = S.fft2(x).to_complex()
    lhs = float((x.astype(np.float64) ** 2).sum())
    rhs = float((np.abs(s) ** 2).sum() / x.size)
    assert abs(lhs - rhs) / lhs < 1e-5


def test_shift_moves_dc_to_centre():
    z = np.zeros((4, 4))
    d = z.copy()
    d[0, 0] = 1
    out = S.fftshift(S.ComplexSpectrum(d, z)).re
    assert out[2, 2] == 1 and out.sum() == 1


@pytest.mark.parametrize("shape", [(3, 3), (4, 4), (5, 4)])
def test_shift_inverse(shape, rng):
    a = rng.standard_normal(shape)
    s = S.ComplexSpectrum(a, -a)
    np.testing.assert_array_equal(S.ifftshift(S.fftshift(s)).re, a)
    twice = S.fftshift(S.fftshift(s)).re
    if shape[0] % 2 == 0 and shape[1] % 2 == 0:
        np.testing.assert_array_equal(twice, a)
    else:
        assert not np.array_equal(twice, a)


@pytest.mark.parametrize("make", [S.lpf, S.hpf])
def test_full_bandwidth_is_identity(make, rng):
    x = rng.random((3, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(S.apply_filter(x, make(16)), x)


@pytest.mark.parametrize("make", [S.lpf, S.hpf])
def test_zero_bandwidth_is_zero(make, rng):
    x = rng.random((2, 1, 8, 8))
    np.testing.assert_array_equal(S.apply_filter(x, make(0)), np.zeros_like(x))


@pytest.mark.parametrize("make", [S.lpf, S.hpf])
@pytest.mark.parametrize("k", range(17))
def test_filters_linear(make, k, rng):
    x, y = rng.standard_normal((2, 16, 16))
    f = make(k)
    lhs = S.apply_filter(2.5 * x - 0.7 * y, f)
    rhs = 2.5 * S.apply_filter(x, f) - 0.7 * S.apply_filter(y, f)
    assert np.abs(lhs - rhs).max() < 1e-5


@pytest.mark.parametrize("make", [S.lpf, S.hpf])
@pytest.mark.parametrize("k", [0, 1, 3, 5, 7, 9, 11, 13, 15, 16])
def test_filters_idempotent_for_symmetric_bands(make, k, rng):
    x = rng.standard_normal((16, 16))
    once = S.apply_filter(x, make(k))
    assert np.abs(S.apply_filter(once, make(k)) - once).max() < 1e-5


@pytest.mark.parametrize("make", [S.lpf, S.hpf])
@pytest.mark.parametrize("k", [2, 4, 8, 14])
def test_even_band_acts_as_half_weight_mask(make, k, rng):
    # an even band on an even grid keeps one edge row/column without its
    # mirror; dropping the imaginary part averages the mask with its mirror
    x = rng.standard_normal((16, 16))
    keep = S.filter_mask(make(k).kind, k, 16, 16).astype(float)
    mirror = np.roll(keep[::-1, ::-1], 1, axis=(0, 1))
    weights = (keep + mirror) / 2
    assert set(np.unique(weights)) == {0.0, 0.5, 1.0}
    want = oracles.idft2(oracles.dft2(x) * weights).real
    assert np.abs(S.apply_filter(x, make(k)) - want).max() < 1e-9


def test_lpf2_vs_masked_direct_dft():
    x = np.arange(16.0).reshape(4, 4) ** 1.5 / 10
    keep = oracles.lpf_mask_unshifted(4, 4, 2)
    want = oracles.idft2(np.where(keep, oracles.dft2(x), 0)).real
    got = S.apply_filter(x, S.lpf(2))
    assert np.abs(got - want).max() < 1e-6


def test_lpf_keeps_low_and_hpf_keeps_high():
    # bin (0,0) is the lowest frequency, (H/2, W/2) the highest
    assert S.filter_mask(S.LOW_PASS, 2, 8, 8)[0, 0]
    assert not S.filter_mask(S.LOW_PASS, 2, 8, 8)[4, 4]
    assert S.filter_mask(S.HIGH_PASS, 2, 8, 8)[4, 4]
    assert not S.filter_mask(S.HIGH_PASS, 2, 8, 8)[0, 0]


def test_filter_bandwidth_validation():
    with pytest.raises(ValueError):
        S.apply_filter(np.zeros((8, 8)), S.lpf(9))
    with pytest.raises(ValueError):
        S.lpf(-1)
    with pytest.raises(ValueError):
        S.FilterSpec("band", 2)


def test_filter_rejects_nan():
    with pytest.raises(T.NonFiniteError):
        S.apply_filter(np.full((4, 4), np.nan), S.lpf(2))


def test_fft1_constant_and_delta():
    s = S.fft1(np.full(10, 0.5))
    assert s.re.data[0] == pytest.approx(5.0)
    assert np.abs(s.re.data[1:]).max() < 1e-6 and np.abs(s.im.data).max() < 1e-6
    d = S.fft1(np.array([1.0, 0, 0, 0]))
    np.testing.assert_allclose(d.re.data, 1.0)
    np.testing.assert_allclose(d.im.data, 0.0, atol=1e-7)


def test_fft1_vs_direct(f64, rng):
    v = rng.standard_normal(10)
    s = S.fft1(v)
    want = np.array(oracles.dft1(v))
    assert _rel(s.re.data + 1j * s.im.data, want) < 1e-6


def test_fft1_empty():
    with pytest.raises(ValueError):
        S.fft1(np.zeros(0))


@pytest.mark.parametrize("metric", S.METRICS)
def test_distance_to_self_is_zero(metric, rng, f64):
    a = S.fft1(rng.standard_normal((3, 5)))
    np.testing.assert_allclose(S.spectral_distance(a, a, metric).data, 0.0, atol=1e-12)


def test_l1_from_zero(rng, f64):
    b = S.ComplexSpectrum(rng.standard_normal(6), rng.standard_normal(6))
    z = S.ComplexSpectrum(np.zeros(6), np.zeros(6))
    want = np.abs(b.re).sum() + np.abs(b.im).sum()
    assert float(S.spectral_distance(z, b, "l1").data) == pytest.approx(want, abs=1e-12)


def test_distances_vs_scalar_recomputation(rng, f64):
    ar, ai, br, bi = rng.standard_normal((4, 7))
    a, b = S.ComplexSpectrum(ar, ai), S.ComplexSpectrum(br, bi)
    l1 = sum(abs(p - q) for p, q in zip(ar, br)) + sum(abs(p - q) for p, q in zip(ai, bi))
    l2 = sum((p - q) ** 2 for p, q in zip(ar, br)) ** 0.5 + sum((p - q) ** 2 for p, q in zip(ai, bi)) ** 0.5
    dot = sum(p * q for p, q in zip(ar, br)) + sum(p * q for p, q in zip(ai, bi))
    na = (sum(p * p for p in ar) + sum(p * p for p in ai)) ** 0.5
    nb = (sum(p * p for p in br) + sum(p * p for p in bi)) ** 0.5
    for metric, want in (("l1", l1), ("l2", l2), ("cosine", 1 - dot / (na * nb))):
        assert abs(float(S.spectral_distance(a, b, metric).data) - want) < 1e-7


def test_distance_errors():
    a = S.ComplexSpectrum(np.ones(3), np.zeros(3))
    z = S.ComplexSpectrum(np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        S.spectral_distance(a, S.ComplexSpectrum(np.ones(4), np.ones(4)))
    with pytest.raises(ValueError):
        S.spectral_distance(a, z, "cosine")
    with pytest.raises(ValueError):
        S.spectral_distance(a, a, "linf")


def test_power_spectrum_cases(rng):
    np.testing.assert_array_equal(S.power_spectrum(np.zeros((4, 4))), np.zeros((4, 4)))
    m = S.power_spectrum(np.full((1, 4, 4), 0.5))
    assert m[2, 2] == pytest.approx(8.0)
    m[2, 2] = 0
    assert np.abs(m).max() < 1e-9
    x = rng.standard_normal((8, 8))
    want = np.fft.fftshift(np.abs(oracles.dft2(x)))
    assert np.abs(S.power_spectrum(x) - want).max() < 1e-6


def test_power_spectrum_point_symmetry(rng):
    m = S.power_spectrum(rng.random((3, 8, 8)))
    # centred even-size map: (H/2 + a, W/2 + b) mirrors (H/2 - a, W/2 - b)
    inner = m[1:, 1:]
    np.testing.assert_allclose(inner, inner[::-1, ::-1], rtol=1e-4)


def test_low_frequency_ratio():
    m = np.zeros((8, 8))
    m[4, 4] = 1.0
    assert S.low_frequency_ratio(m) == 1.0
    assert S.low_frequency_ratio(np.ones((8, 8))) == pytest.approx(0.25)
    assert S.low_frequency_ratio(np.zeros((8, 8))) == 0.0
