import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmlego import fft


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 12, 17, 31, 37, 60, 61, 64, 97, 126, 128, 210])
def test_native_fft_matches_naive(n):
    rng = np.random.default_rng(n)
    x = rng.normal(size=(3, n)) + 1j * rng.normal(size=(3, n))
    np.testing.assert_allclose(fft.fft(x), fft.naive_dft(x), atol=1e-9 * n)
    np.testing.assert_allclose(fft.ifft(x), fft.naive_dft(x, inverse=True) / n, atol=1e-9)


@given(st.integers(1, 300))
@settings(max_examples=40, deadline=None)
def test_roundtrip_any_length(n):
    x = np.random.default_rng(n).normal(size=n).astype(complex)
    np.testing.assert_allclose(fft.ifft(fft.fft(x)), x, atol=1e-11)


def test_fft_along_other_axis():
    x = np.random.default_rng(0).normal(size=(7, 4)).astype(complex)
    got = fft.fft(x, axis=0)
    want = fft.naive_dft(x.T).T
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_smallest_factor():
    assert fft.smallest_factor(126) == 2
    assert fft.smallest_factor(17) == 17
    assert fft.smallest_factor(49) == 7


@pytest.mark.parametrize("shape", [(2, 2), (4, 4), (8, 16), (17, 126)])
def test_backends_agree(shape):
    x = np.random.default_rng(1).normal(size=(2,) + shape)
    with fft.backend("native"):
        a = fft.dft2_array(x)
        back_a = fft.idft2_array(a)
    with fft.backend("numpy"):
        b = fft.dft2_array(x)
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(back_a.real, x, atol=1e-12)


def test_backend_context_restores():
    before = fft.get_backend()
    with fft.backend("native"):
        assert fft.get_backend() == "native"
    assert fft.get_backend() == before


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        fft.set_backend("fftw")


def test_dft2_is_unitary():
    x = np.random.default_rng(2).normal(size=(5, 9))
    z = fft.dft2_array(x)
    assert np.isclose(np.sum(np.abs(z) ** 2), np.sum(x ** 2), rtol=1e-12)
