"""Arbitrary-length complex FFT along the last axis.

Mixed-radix decimation in time: a length ``n`` transform is split on its
smallest prime factor ``p`` into ``p`` interleaved sub-transforms of length
``n / p``.  Prime lengths up to ``DIRECT_MAX_PRIME`` are done as a dense DFT
matrix product; larger primes go through Bluestein's chirp-z algorithm,
which re-expresses the transform as a power-of-two circular convolution.

All transforms are batched over leading axes and use no normalisation; the
unitary scaling lives in :mod:`mmlego.spectral`.
"""

from functools import lru_cache

import numpy as np

DIRECT_MAX_PRIME = 31
# composite lengths up to this size are cheaper as one dense matrix product
DIRECT_MAX_LENGTH = 64


def smallest_factor(n):
    if n % 2 == 0:
        return 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return f
        f += 2
    return n


@lru_cache(maxsize=None)
def _dft_matrix(n):
    k = np.arange(n)
    # reduce the exponent mod n before scaling so large k*j stay exact
    return np.exp(-2j * np.pi * ((k[:, None] * k[None, :]) % n) / n)


@lru_cache(maxsize=None)
def _twiddles(p, m):
    n = p * m
    r = np.arange(p)[:, None]
    k1 = np.arange(m)[None, :]
    return np.exp(-2j * np.pi * ((r * k1) % n) / n)


@lru_cache(maxsize=None)
def _bluestein_plan(n):
    k = np.arange(n)
    # n^2 mod 2n keeps the chirp phase accurate for large n
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1 << (2 * n - 1).bit_length()
    b = np.zeros(m, dtype=complex)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:][::-1])
    return chirp, m, _fft(b)


def _bluestein(x):
    n = x.shape[-1]
    chirp, m, b_hat = _bluestein_plan(n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=complex)
    a[..., :n] = x * chirp
    conv = _ifft_unscaled(_fft(a) * b_hat) / m
    return conv[..., :n] * chirp


def _fft(x):
    n = x.shape[-1]
    if n == 1:
        return x.copy()
    p = smallest_factor(n)
    if p == n:
        if n <= DIRECT_MAX_PRIME:
            return x @ _dft_matrix(n)
        return _bluestein(x)
    if n <= DIRECT_MAX_LENGTH:
        return x @ _dft_matrix(n)
    m = n // p
    lead = x.shape[:-1]
    # x[j*p + r] -> sub-sequence r at position j
    sub = x.reshape(lead + (m, p)).swapaxes(-1, -2)
    y = _fft(sub) * _twiddles(p, m)
    # p-point DFT across r; output index k = k2*m + k1
    out = (y.swapaxes(-1, -2) @ _dft_matrix(p)).swapaxes(-1, -2)
    return out.reshape(lead + (n,))


def _ifft_unscaled(x):
    return np.conj(_fft(np.conj(x)))


def fft(x, axis=-1):
    """Unnormalised forward DFT of ``x`` along ``axis``."""
    x = np.asarray(x, dtype=complex)
    if x.shape[axis] == 0:
        raise ValueError("cannot transform an empty axis")
    x = np.moveaxis(x, axis, -1)
    return np.moveaxis(_fft(x), -1, axis)


def ifft(x, axis=-1):
    """Inverse DFT along ``axis`` with the conventional 1/n scaling."""
    x = np.asarray(x, dtype=complex)
    n = x.shape[axis]
    x = np.moveaxis(x, axis, -1)
    return np.moveaxis(_ifft_unscaled(x) / n, -1, axis)


def naive_dft(x, inverse=False):
    """O(n^2) reference DFT along the last axis, one output bin at a time.

    Used only as a test oracle.  Unnormalised in both directions.
    """
    x = np.asarray(x, dtype=complex)
    n = x.shape[-1]
    sign = 1.0 if inverse else -1.0
    out = np.empty_like(x)
    j = np.arange(n)
    for k in range(n):
        phase = sign * 2.0 * np.pi * ((k * j) % n) / n
        out[..., k] = (x * (np.cos(phase) + 1j * np.sin(phase))).sum(axis=-1)
    return out


# --- unitary 2-D transforms over the last two axes -----------------------------

BACKENDS = ("native", "numpy")
_backend = "numpy"


def set_backend(name):
    """Select the engine behind :func:`dft2_array` / :func:`idft2_array`.

    ``native`` is the mixed-radix/Bluestein code above; ``numpy`` defers to
    ``numpy.fft`` (pocketfft), several times faster on the training path.
    Returns the previous backend.
    """
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown FFT backend {name!r}; expected one of {BACKENDS}")
    prev, _backend = _backend, name
    return prev


def get_backend():
    return _backend


class backend:
    """Context manager that temporarily switches the FFT backend."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        self._prev = set_backend(self.name)
        return self

    def __exit__(self, *exc):
        set_backend(self._prev)


def dft2_array(x):
    """Unitary 2-D DFT over the last two axes (scale 1/sqrt(c*d))."""
    x = np.asarray(x)
    c, d = x.shape[-2:]
    if _backend == "numpy":
        z = np.fft.fft2(x, norm="ortho")
    else:
        z = fft(fft(x, axis=-1), axis=-2) / np.sqrt(c * d)
    return z


def idft2_array(z):
    """Unitary inverse 2-D DFT over the last two axes (complex result)."""
    z = np.asarray(z, dtype=complex)
    c, d = z.shape[-2:]
    if _backend == "numpy":
        return np.fft.ifft2(z, norm="ortho")
    return ifft(ifft(z, axis=-1), axis=-2) * np.sqrt(c * d)
