"""LegoFuse: thread one shared latent through the update layers of several blocks.

``stack`` runs every pass of block 1, then every pass of block 2, and so on;
``weave`` runs pass 1 of every block, then pass 2 of every block, ...
Blocks with fewer passes simply drop out of later weave rounds.
"""

import copy

import numpy as np

from . import tensor as T
from .errors import ConfigError, NoModalityAvailable
from .legoblock import Layer, apply_head, run_layers
from .legomerge import SlerpSpec, check_compatible, merge_heads
from .spectral import ComplexLatent, dft2, inverse_dft2, merge_latents
from .training import fit

FUSE_METHODS = ("stack", "weave")
LATENT_INIT_MODES = ("merge", "first-block")


def build_schedule(depths, method):
    """List of ``(block index, pass index)`` covering every pass exactly once."""
    if method == "stack":
        return [(b, p) for b, depth in enumerate(depths) for p in range(depth)]
    if method == "weave":
        return [(b, p) for p in range(max(depths)) for b, depth in enumerate(depths) if p < depth]
    raise ConfigError(f"fuse method must be one of {FUSE_METHODS}, got {method!r}")


class FusedModel:
    kind = "fused"

    def __init__(self, blocks, fuse_method="stack", latent_init=None, head=None,
                 latent_init_mode="merge", phase_mode="literal"):
        self.blocks = list(blocks)
        self.fuse_method = fuse_method
        self.latent_init_mode = latent_init_mode
        self.phase_mode = phase_mode
        self.schedule = build_schedule([b.config.depth for b in self.blocks], fuse_method)
        self.latent_init = T.Tensor(latent_init, requires_grad=True)
        self.latent_init.name = "latent_init"
        self.head = {k: T.Tensor(v, requires_grad=True) for k, v in head.items()}

    @property
    def modalities(self):
        return [b.modality for b in self.blocks]

    @property
    def task(self):
        return self.blocks[0].task

    @property
    def config(self):
        return self.blocks[0].config

    def parameters(self):
        params = {"fused.latent_init": self.latent_init}
        params.update({f"fused.head.{k}": v for k, v in self.head.items()})
        for i, b in enumerate(self.blocks):
            for k, v in b.parameters().items():
                if k == "latent_init" or k.startswith("head."):
                    continue
                params[f"block{i}.{k}"] = v
        return params

    def l1_parameters(self):
        return [self.head["w"]]

    def head_arrays(self):
        return {k: v.data for k, v in self.head.items()}

    def _forward_group(self, batch, rows, present, training, rng, trace=None):
        kv = {}
        for i, b in enumerate(self.blocks):
            if b.modality in present:
                kv[i] = b.encode(batch.take(b.modality, rows), training, rng)
        layers = [Layer(self.blocks[i], p, *kv[i]) for i, p in self.schedule if i in kv]
        latent = T.expand(self.latent_init, len(rows))
        re, im = run_layers(layers, latent, training, rng, trace)
        return apply_head(re, im, self.head, self.config, training, rng)

    def forward(self, batch, training=False, rng=None, trace=None):
        """Logits for a batch; layers of modalities a sample lacks are skipped."""
        avail = batch.availability(self.modalities)
        patterns = np.unique(avail, axis=0)
        if len(patterns) == 1:
            present = {m for m, on in zip(self.modalities, patterns[0]) if on}
            if not present:
                raise NoModalityAvailable("batch has no available modality")
            return self._forward_group(batch, np.arange(len(batch)), present, training, rng,
                                       trace)
        outs, order = [], []
        for pattern in patterns:
            rows = np.flatnonzero((avail == pattern).all(axis=1))
            present = {m for m, on in zip(self.modalities, pattern) if on}
            if not present:
                raise NoModalityAvailable(f"samples {rows[:5].tolist()} have no modality")
            outs.append(self._forward_group(batch, rows, present, training, rng))
            order.append(rows)
        inverse = np.argsort(np.concatenate(order))
        return T.concat(outs, axis=0)[inverse]


def build_fused(blocks, fuse_method="stack", slerp_spec=SlerpSpec(), latent_init_mode="merge",
                phase_mode="literal"):
    """Copy ``blocks`` into a trainable :class:`FusedModel` (no training yet).

    The shared latent starts from the merge of the blocks' initial latents
    (``merge``) or the first block's (``first-block``); the head starts from
    the SLERP-merged heads.
    """
    blocks = [copy.deepcopy(b) for b in blocks]
    if not blocks:
        raise ConfigError("build_fused needs at least one block")
    if fuse_method not in FUSE_METHODS:
        raise ConfigError(f"fuse method must be one of {FUSE_METHODS}, got {fuse_method!r}")
    if latent_init_mode not in LATENT_INIT_MODES:
        raise ConfigError(f"latent init mode must be one of {LATENT_INIT_MODES}")
    check_compatible(blocks)
    if latent_init_mode == "first-block" or len(blocks) == 1:
        latent = blocks[0].latent_init.data.copy()
    else:
        spectra = [dft2(b.latent_init.data) for b in blocks]
        latent = inverse_dft2(merge_latents(spectra, phase_mode))
    head = merge_heads([b.head_arrays() for b in blocks], slerp_spec)
    for b in blocks:
        for p in b.parameters().values():
            p.requires_grad = True
    return FusedModel(blocks, fuse_method, latent, head, latent_init_mode, phase_mode)


def fine_tune(model, train, train_labels, val, val_labels, *, epochs=2, lr=0.003,
              batch_size=128, l1=0.0, rng=None):
    """Optimise every parameter of ``model`` for exactly ``epochs`` passes.

    Returns ``(model, report)`` with the validation metric before and after.
    """
    from .training import evaluate

    task = model.task
    _, pre, _ = evaluate(model, val, val_labels, task)
    result = fit(model, train, train_labels, val, val_labels, task, epochs=epochs, lr=lr,
                 batch_size=batch_size, l1=l1, rng=rng, early_stopping=False)
    _, post, _ = evaluate(model, val, val_labels, task)
    return model, {"pre_metric": pre, "post_metric": post, "history": result.history,
                   "steps": result.steps}


__all__ = ["FUSE_METHODS", "FusedModel", "build_fused", "build_schedule", "fine_tune",
           "ComplexLatent"]
