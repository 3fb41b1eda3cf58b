"""Frequency-domain latent representations and their aggregation.

Transforms are unitary (1/sqrt(c*d) applied once in each direction), so
energies and Euclidean distances are identical in both domains.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import fft as _fft
from .errors import ConfigError, EmptyInput, ShapeMismatch

PHASE_MODES = ("literal", "circular")
ZERO_MAGNITUDE = 1e-15
IMAG_RESIDUAL_TOL = 1e-8


@dataclass
class ComplexLatent:
    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        self.real = np.asarray(self.real, dtype=np.float64)
        self.imag = np.asarray(self.imag, dtype=np.float64)
        if self.real.shape != self.imag.shape:
            raise ShapeMismatch(
                f"real {self.real.shape} and imag {self.imag.shape} components differ")

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z)
        return cls(z.real.copy(), z.imag.copy())

    @property
    def shape(self):
        return self.real.shape

    def to_complex(self):
        return self.real + 1j * self.imag

    def magnitude(self):
        return np.hypot(self.real, self.imag)

    def phase(self):
        return np.arctan2(self.imag, self.real)

    def energy(self):
        return float((self.real ** 2 + self.imag ** 2).sum())


class _ResidualCounter:
    """Counts inverse transforms that dropped a non-negligible imaginary part."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.count = 0
        self.max_residual = 0.0

    def record(self, residual):
        if residual > IMAG_RESIDUAL_TOL:
            self.count += 1
            self.max_residual = max(self.max_residual, residual)


imag_residuals = _ResidualCounter()


def dft2(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or min(x.shape[-2:]) < 1:
        raise ShapeMismatch(f"dft2 expects a (..., c, d) array, got {x.shape}")
    return ComplexLatent.from_complex(_fft.dft2_array(x))


def inverse_dft2(z):
    """Real part of the unitary inverse transform.

    The discarded imaginary residual is tallied in ``imag_residuals``.
    """
    y = _fft.idft2_array(z.to_complex())
    imag_residuals.record(float(np.abs(y.imag).max(initial=0.0)))
    return np.ascontiguousarray(y.real)


def dft_real_component(h):
    """Real part of the unitary 2-D spectrum of a ``tokens x features`` matrix."""
    return dft2(h).real


def merge_latents(latents, phase_mode="literal"):
    """Per-bin harmonic mean of magnitudes with averaged phase.

    For two inputs this is ``2|A||B| / (|A| + |B|) * exp(i (angle A + angle B) / 2)``;
    more inputs use the n-ary harmonic mean ``n / sum(1/|L_k|)``.  In
    ``circular`` mode the phase is the angle of the summed unit phasors
    instead of the arithmetic mean of the angles.  A bin in which any input
    has (numerically) zero magnitude merges to zero.  A single latent is
    returned unchanged.
    """
    latents = list(latents)
    if not latents:
        raise EmptyInput("merge_latents needs at least one latent")
    if phase_mode not in PHASE_MODES:
        raise ConfigError(f"phase_mode must be one of {PHASE_MODES}, got {phase_mode!r}")
    shape = latents[0].shape
    for lat in latents[1:]:
        if lat.shape != shape:
            raise ShapeMismatch(f"cannot merge latents of shapes {shape} and {lat.shape}")
    if len(latents) == 1:
        return ComplexLatent(latents[0].real.copy(), latents[0].imag.copy())

    mags = np.stack([lat.magnitude() for lat in latents])
    phases = np.stack([lat.phase() for lat in latents])
    n = len(latents)
    zero = (mags < ZERO_MAGNITUDE).any(axis=0)
    safe = np.where(mags < ZERO_MAGNITUDE, 1.0, mags)
    merged_mag = np.where(zero, 0.0, n / (1.0 / safe).sum(axis=0))
    if phase_mode == "literal":
        merged_phase = phases.mean(axis=0)
    else:
        merged_phase = np.arctan2(np.sin(phases).sum(axis=0), np.cos(phases).sum(axis=0))
    return ComplexLatent(merged_mag * np.cos(merged_phase), merged_mag * np.sin(merged_phase))


def parseval_check(x, y, tol=1e-9):
    """Compare ||x - y|| with ||dft2(x) - dft2(y)||; ``tol`` bounds the relative gap."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"parseval_check: shapes {x.shape} and {y.shape} differ")
    if x.ndim == 1:
        x, y = x[None, :], y[None, :]
    spatial = float(np.linalg.norm(x - y))
    fx, fy = dft2(x), dft2(y)
    spectral = float(np.sqrt(((fx.real - fy.real) ** 2 + (fx.imag - fy.imag) ** 2).sum()))
    diff = abs(spatial - spectral)
    rel = diff / max(spatial, spectral, np.finfo(float).tiny)
    return {"spatial_distance": spatial, "spectral_distance": spectral,
            "difference": diff, "relative": rel, "passed": rel < tol}


# -- signal interference ------------------------------------------------------------

INTERFERENCE_KINDS = ("inverse_noise", "squarewave_offset")
AGGREGATORS = ("spatial_mean", "spatial_abs_mean", "frequency_harmonic")


def ac_energy(x):
    """Energy of ``x`` about its mean, i.e. everything except the DC bin."""
    x = np.asarray(x)
    return float(((x - x.mean()) ** 2).sum())


def _spectral_ac_energy(z):
    e = z.real ** 2 + z.imag ** 2
    return float(e.sum() - e[..., 0, 0].sum())


def interference_signals(kind, seed, shape=(17, 126), noise=0.1, cycles=6.0,
                         freq_offset=0.1, phase_offset=0.5, amp_std=0.25):
    """The pair of modality signals for one interference scenario.

    ``inverse_noise``: a standard normal matrix and its additive inverse plus
    Gaussian noise of std ``noise``.

    ``squarewave_offset``: rows of +-1 square waves with ``cycles`` periods
    per row and a random per-row phase.  Modality B is detuned by
    ``freq_offset`` cycles and shifted by ``phase_offset`` of a period; each
    modality is scaled by an amplitude drawn from N(1, amp_std).
    """
    rng = np.random.default_rng(seed)
    c, d = shape
    if kind == "inverse_noise":
        a = rng.standard_normal(shape)
        b = -a + noise * rng.standard_normal(shape)
        return a, b
    if kind == "squarewave_offset":
        t = np.arange(d) / d
        phase = rng.uniform(0.0, 1.0, size=(c, 1))
        wave_a = np.sign(np.sin(2 * np.pi * (cycles * t + phase)))
        wave_b = np.sign(np.sin(2 * np.pi * ((cycles + freq_offset) * t + phase + phase_offset)))
        amp_a, amp_b = rng.normal(1.0, amp_std, size=2)
        return amp_a * wave_a, amp_b * wave_b
    raise ConfigError(f"unknown interference scenario {kind!r}")


def interference_experiment(kind, seed=0, phase_mode="literal", **signal_kwargs):
    """Retained-energy ratio of each aggregator for one seeded scenario.

    Ratios are aggregate AC energy over the mean AC energy of the two inputs
    (DC excluded, so a rectified signal that collapses to a constant
    counts as lost).  The frequency aggregator's energy is measured on the
    merged spectrum, which by Parseval equals that of its complex inverse.
    """
    a, b = interference_signals(kind, seed, **signal_kwargs)
    base = 0.5 * (ac_energy(a) + ac_energy(b))
    merged = merge_latents([dft2(a), dft2(b)], phase_mode=phase_mode)
    energies = {
        "spatial_mean": ac_energy(0.5 * (a + b)),
        "spatial_abs_mean": ac_energy(0.5 * (np.abs(a) + np.abs(b))),
        "frequency_harmonic": _spectral_ac_energy(merged),
    }
    return {
        "scenario": kind,
        "seed": seed,
        "input_energy": base,
        "ratios": {k: v / base for k, v in energies.items()},
    }


def interference_sweep(kind, seeds, **kwargs):
    return [interference_experiment(kind, seed, **kwargs) for seed in seeds]


def write_interference_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "seed", "aggregator", "retained_energy_ratio"])
        for rep in reports:
            for agg in AGGREGATORS:
                w.writerow([rep["scenario"], rep["seed"], agg, repr(rep["ratios"][agg])])
