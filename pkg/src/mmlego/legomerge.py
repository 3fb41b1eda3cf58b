"""Training-free merging of LegoBlocks.

Per sample, each available block produces its final frequency-domain
latent; the latents are combined with :func:`mmlego.spectral.merge_latents`
and fed to a head whose parameters are the SLERP of the blocks' heads.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (ConfigError, IncompatibleLatentShape, IncompatibleTask, LengthMismatch,
                     NoModalityAvailable, ZeroVector)
from .legoblock import apply_head
from .spectral import PHASE_MODES, ComplexLatent, merge_latents

HEAD_KEYS = ("w", "b", "ln_gain", "ln_bias")


@dataclass(frozen=True)
class SlerpSpec:
    alpha: float = 0.5
    eps: float = 1e-7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"slerp alpha must lie in [0, 1], got {self.alpha}")


def slerp(w1, w2, alpha=0.5, eps=1e-7):
    """Spherical interpolation; falls back to linear when sin(theta) < eps."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w1.shape != w2.shape:
        raise LengthMismatch(f"cannot slerp vectors of shapes {w1.shape} and {w2.shape}")
    n1, n2 = np.linalg.norm(w1), np.linalg.norm(w2)
    if n1 == 0.0 or n2 == 0.0:
        raise ZeroVector("slerp is undefined for an all-zero vector")
    if alpha == 0.0:
        return w1.copy()
    if alpha == 1.0:
        return w2.copy()
    cos = np.clip(np.dot(w1.ravel(), w2.ravel()) / (n1 * n2), -1.0, 1.0)
    theta = np.arccos(cos)
    s = np.sin(theta)
    if s < eps:
        return (1.0 - alpha) * w1 + alpha * w2
    return w1 * (np.sin(theta * (1.0 - alpha)) / s) + w2 * (np.sin(theta * alpha) / s)


def head_vector(head, keys=HEAD_KEYS):
    return np.concatenate([np.asarray(head[k]).ravel() for k in keys])


def split_head_vector(vec, like, keys=HEAD_KEYS):
    out, pos = {}, 0
    for k in keys:
        size = np.asarray(like[k]).size
        out[k] = vec[pos:pos + size].reshape(np.asarray(like[k]).shape)
        pos += size
    return out


def merge_heads(heads, spec=SlerpSpec(), include_norm=True):
    """Sequential pairwise SLERP of head parameter vectors, in the given order.

    With ``include_norm=False`` only the linear weights/bias are slerped and
    the layer-norm affine is averaged.
    """
    heads = [{k: np.asarray(h[k]) for k in HEAD_KEYS} for h in heads]
    keys = HEAD_KEYS if include_norm else ("w", "b")
    merged = head_vector(heads[0], keys)
    for h in heads[1:]:
        merged = slerp(merged, head_vector(h, keys), spec.alpha, spec.eps)
    out = split_head_vector(merged, heads[0], keys)
    if not include_norm:
        for k in ("ln_gain", "ln_bias"):
            out[k] = np.mean([h[k] for h in heads], axis=0)
    return out


def check_compatible(blocks):
    first = blocks[0]
    for b in blocks[1:]:
        if b.config.latent_shape != first.config.latent_shape:
            raise IncompatibleLatentShape(
                f"latent shapes differ: {first.modality} {first.config.latent_shape} vs "
                f"{b.modality} {b.config.latent_shape}")
        if b.task != first.task:
            raise IncompatibleTask(f"task specs differ: {first.task} vs {b.task}")
        if b.config.head_imag != first.config.head_imag:
            raise IncompatibleTask("blocks disagree on whether the head reads the imaginary part")


class MergedModel:
    kind = "merged"

    def __init__(self, blocks, head, phase_mode="literal", slerp_spec=SlerpSpec(),
                 include_norm=True):
        self.blocks = list(blocks)
        self.head = {k: T.Tensor(v) for k, v in head.items()}
        self.phase_mode = phase_mode
        self.slerp_spec = slerp_spec
        self.include_norm = include_norm

    @property
    def modalities(self):
        return [b.modality for b in self.blocks]

    @property
    def task(self):
        return self.blocks[0].task

    @property
    def config(self):
        return self.blocks[0].config

    def head_arrays(self):
        return {k: v.data for k, v in self.head.items()}

    def parameters(self):
        return {}

    def block_latents(self, batch):
        """``{modality: (positions, ComplexLatent)}`` for each block with any available sample."""
        out = {}
        with T.no_grad():
            for b in self.blocks:
                pos = batch.positions(b.modality)
                if pos.size == 0:
                    continue
                re, im = b.final_latent(batch.take(b.modality, pos))
                out[b.modality] = (pos, ComplexLatent(re.data, im.data))
        return out

    def merged_latent(self, batch):
        lats = self.block_latents(batch)
        c, d = self.config.latent_shape
        n = len(batch)
        re = np.zeros((n, c, d))
        im = np.zeros((n, c, d))
        avail = batch.availability(self.modalities)
        for pattern in np.unique(avail, axis=0):
            rows = np.flatnonzero((avail == pattern).all(axis=1))
            present = [m for m, on in zip(self.modalities, pattern) if on]
            if not present:
                raise NoModalityAvailable(f"samples {rows[:5].tolist()} have no modality")
            parts = []
            for m in present:
                pos, lat = lats[m]
                sel = np.searchsorted(pos, rows)
                parts.append(ComplexLatent(lat.real[sel], lat.imag[sel]))
            merged = merge_latents(parts, self.phase_mode)
            re[rows], im[rows] = merged.real, merged.imag
        return re, im

    def forward(self, batch, training=False, rng=None):
        re, im = self.merged_latent(batch)
        with T.no_grad():
            return apply_head(T.Tensor(re), T.Tensor(im), self.head, self.config)


def merge_blocks(blocks, slerp_spec=SlerpSpec(), phase_mode="literal", include_norm=True):
    """Build a :class:`MergedModel`; no gradients are computed and blocks are not modified."""
    blocks = list(blocks)
    if len(blocks) < 1:
        raise ConfigError("merge_blocks needs at least one block")
    if phase_mode not in PHASE_MODES:
        raise ConfigError(f"phase_mode must be one of {PHASE_MODES}")
    check_compatible(blocks)
    head = merge_heads([b.head_arrays() for b in blocks], slerp_spec, include_norm)
    return MergedModel(blocks, head, phase_mode, slerp_spec, include_norm)


class LogitEnsemble:
    """Average of the unimodal blocks' logits over the modalities each sample has."""

    kind = "ensemble"

    def __init__(self, blocks):
        check_compatible(list(blocks))
        self.blocks = list(blocks)

    @property
    def modalities(self):
        return [b.modality for b in self.blocks]

    def parameters(self):
        return {}

    def forward(self, batch, training=False, rng=None):
        n = len(batch)
        total = np.zeros((n, self.blocks[0].task.n_outputs))
        count = np.zeros((n, 1))
        with T.no_grad():
            for b in self.blocks:
                pos = batch.positions(b.modality)
                if pos.size == 0:
                    continue
                total[pos] += b.forward(batch.take(b.modality, pos)).data
                count[pos] += 1
        if (count == 0).any():
            raise NoModalityAvailable("some samples have no available modality")
        return T.Tensor(total / count)
