"""LegoBlock: an encoder wrapped with a frequency-domain latent bottleneck.

One pass of :func:`block_update`:

1. ``re, im = dft2(L_t)``
2. queries from ``re``; keys/values from the real spectrum of the encoder tokens
3. ``re <- re + attention(...)`` (residual on by default)
4. ``im`` is carried through untouched (zeroed if ``track_imaginary`` is off)
5. ``L_{t+1} = Re(idft2(re + i*im))``

The last pass stops after step 4 and the task head reads the real
spectrum through layer norm and a linear layer.
"""

import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .encoders import Encoder, EncoderConfig
from .errors import ConfigError, DepthZero, NoModalityAvailable, ShapeMismatch
from .training import TaskSpec

KV_TRANSFORMS = ("2d", "rows")


@dataclass
class BlockConfig:
    latent_shape: tuple = (17, 126)
    depth: int = 4
    attn_dim: int = 64
    head_dim: int = 64
    attn_dropout: float = 0.45
    fcnn_dropout: float = 0.36
    residual: bool = True
    share_passes: bool = True
    head_imag: bool = False
    latent_init_std: float = 0.02
    kv_transform: str = "2d"
    ln_eps: float = 1e-5
    normalise: bool = True
    track_imaginary: bool = True

    def __post_init__(self):
        self.latent_shape = tuple(int(s) for s in self.latent_shape)
        if len(self.latent_shape) != 2 or min(self.latent_shape) < 1:
            raise ConfigError(f"latent_shape must be two positive ints, got {self.latent_shape}")
        if self.depth < 1:
            raise DepthZero("a LegoBlock needs depth >= 1")
        if self.kv_transform not in KV_TRANSFORMS:
            raise ConfigError(f"kv_transform must be one of {KV_TRANSFORMS}")
        if self.attn_dim < 1 or self.head_dim < 1:
            raise ConfigError("attention dimensions must be positive")

    @property
    def n_heads(self):
        return max(1, self.attn_dim // self.head_dim)

    @property
    def key_dim(self):
        return self.attn_dim if self.n_heads == 1 else self.head_dim

    @property
    def head_input_dim(self):
        c, d = self.latent_shape
        return c * d * (2 if self.head_imag else 1)

    def to_dict(self):
        d = asdict(self)
        d["latent_shape"] = list(self.latent_shape)
        return d


def _glorot(rng, a, b):
    lim = np.sqrt(6.0 / (a + b))
    return rng.uniform(-lim, lim, size=(a, b))


def _param(arr, name):
    t = T.Tensor(arr, requires_grad=True)
    t.name = name
    return t


class LegoBlock:
    """One modality's encoder, learnable latent, cross-attention passes and head.

    Parameters that every block shares in shape (latent, query projection,
    head) are drawn from ``init_seed`` alone, so blocks built with the same
    ``init_seed`` start from a common point in the mergeable weight space.
    """

    kind = "block"

    def __init__(self, modality, encoder_config, config=None, task=None, seed=0, init_seed=None):
        self.modality = modality
        self.encoder_config = encoder_config
        self.config = config or BlockConfig()
        self.task = task or TaskSpec()
        self.seed = seed
        self.init_seed = seed if init_seed is None else init_seed
        cfg = self.config
        c, d = cfg.latent_shape
        shared = np.random.default_rng([self.init_seed, 0])
        own = np.random.default_rng([self.init_seed, 1, zlib.crc32(modality.encode()), seed])

        self.encoder = Encoder(encoder_config, own)
        self.latent_init = _param(shared.normal(0.0, cfg.latent_init_std, size=(c, d)),
                                  "latent_init")
        n_sets = 1 if cfg.share_passes else cfg.depth
        dh = encoder_config.output_dim
        dv = d if cfg.n_heads == 1 else cfg.attn_dim
        self.attn = []
        for p in range(n_sets):
            a = {"wq": _param(_glorot(shared, d, cfg.attn_dim), f"attn.{p}.wq"),
                 "wk": _param(_glorot(own, dh, cfg.attn_dim), f"attn.{p}.wk"),
                 "wv": _param(_glorot(own, dh, dv), f"attn.{p}.wv")}
            if cfg.n_heads > 1:
                a["wo"] = _param(_glorot(shared, cfg.attn_dim, d), f"attn.{p}.wo")
            self.attn.append(a)
        n_in, n_out = cfg.head_input_dim, self.task.n_outputs
        self.head = {
            "ln_gain": _param(np.ones(n_in), "head.ln_gain"),
            "ln_bias": _param(np.zeros(n_in), "head.ln_bias"),
            "w": _param(shared.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)), "head.w"),
            "b": _param(np.zeros(n_out), "head.b"),
        }
        self.buffers = {"norm.mean": np.zeros(encoder_config.input_dim),
                        "norm.std": np.ones(encoder_config.input_dim)}

    # -- parameter access -------------------------------------------------------------

    def parameters(self):
        params = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        params["latent_init"] = self.latent_init
        for p, a in enumerate(self.attn):
            for k, v in a.items():
                params[f"attn.{p}.{k}"] = v
        for k, v in self.head.items():
            params[f"head.{k}"] = v
        return params

    def l1_parameters(self):
        return [self.head["w"]]

    def attn_params(self, pass_idx):
        return self.attn[0 if self.config.share_passes else pass_idx]

    def state_arrays(self):
        """All parameters and buffers as plain arrays (for checkpoints)."""
        out = {k: v.data for k, v in self.parameters().items()}
        out.update(self.buffers)
        return out

    def load_state_arrays(self, arrays):
        for k, v in self.parameters().items():
            if arrays[k].shape != v.data.shape:
                raise ShapeMismatch(f"{k}: stored shape {arrays[k].shape} != {v.data.shape}")
            v.data = np.array(arrays[k], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(arrays[k], dtype=np.float64)

    def head_arrays(self):
        return {k: v.data for k, v in self.head.items()}

    # -- inputs -----------------------------------------------------------------------

    def fit_normaliser(self, x):
        """Per-feature standardisation statistics from training rows (tabular only)."""
        if self.encoder_config.is_bag or not self.config.normalise:
            return
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        self.buffers["norm.mean"] = x.mean(axis=0)
        self.buffers["norm.std"] = np.where(std > 1e-12, std, 1.0)

    def prepare(self, inputs):
        if isinstance(inputs, tuple) or not self.config.normalise:
            return inputs
        return (np.asarray(inputs, dtype=np.float64) - self.buffers["norm.mean"]) / self.buffers["norm.std"]

    def encode(self, inputs, training=False, rng=None):
        """Encoder tokens mapped to their real spectrum: ``(kv, key_bias)``."""
        h, bias = self.encoder.forward(self.prepare(inputs), training, rng)
        return spectral_keys(h, bias, self.config), bias

    # -- forward ----------------------------------------------------------------------

    def layers(self, kv, bias):
        return [Layer(self, p, kv, bias) for p in range(self.config.depth)]

    def block_update(self, latent, kv, bias=None, pass_idx=0, training=False, rng=None):
        """One full pass returning the next spatial latent."""
        re, im, _ = frequency_update(latent, kv, bias, self.attn_params(pass_idx), self.config,
                                     training, rng)
        return T.idft2_real(re, im)

    def final_latent(self, inputs, training=False, rng=None, trace=None):
        kv, bias = self.encode(inputs, training, rng)
        batch = kv.shape[0]
        return run_layers(self.layers(kv, bias), T.expand(self.latent_init, batch),
                          training, rng, trace)

    def forward(self, inputs, training=False, rng=None, trace=None):
        re, im = self.final_latent(inputs, training, rng, trace)
        return apply_head(re, im, self.head, self.config, training, rng)

    def __call__(self, inputs):
        with T.no_grad():
            return self.forward(inputs).data


class Layer:
    """One scheduled pass: whose parameters, which keys/values."""

    __slots__ = ("block", "pass_idx", "kv", "bias")

    def __init__(self, block, pass_idx, kv, bias):
        self.block, self.pass_idx, self.kv, self.bias = block, pass_idx, kv, bias


def spectral_keys(h, bias, cfg):
    """Real part of the unitary DFT of the encoder tokens.

    ``2d`` transforms the whole ``tokens x features`` matrix; ``rows``
    transforms each token's feature vector separately.  Padded token sets
    are only allowed with ``rows``, where padding cannot leak into real
    tokens.
    """
    if cfg.kv_transform == "rows":
        b, t, f = h.shape
        re, _ = T.dft2(h.reshape(b, t, 1, f))
        return re.reshape(b, t, f)
    if bias is not None:
        raise ConfigError("padded token sets need kv_transform='rows'")
    re, _ = T.dft2(h)
    return re


def frequency_update(latent, kv, bias, attn, cfg, training=False, rng=None):
    """Steps 1-4 of a pass: returns ``(updated real spectrum, imag spectrum, attention)``."""
    if latent.shape[-2:] != cfg.latent_shape:
        raise ShapeMismatch(f"latent {latent.shape} does not match {cfg.latent_shape}")
    if kv.shape[-1] != attn["wk"].shape[0]:
        raise ShapeMismatch(f"keys have {kv.shape[-1]} features, W^k expects {attn['wk'].shape[0]}")
    re, im = T.dft2(latent)
    b, c, d = re.shape
    q = re @ attn["wq"]
    k = kv @ attn["wk"]
    v = kv @ attn["wv"]
    n_tok = kv.shape[1]
    bias_t = None
    if bias is not None:
        bias_t = T.Tensor(np.broadcast_to(np.asarray(bias)[:, None, :], (b, c, n_tok)))
    scale = 1.0 / np.sqrt(cfg.key_dim)
    if cfg.n_heads == 1:
        out, a = _attend(q, k, v, bias_t, scale, cfg, training, rng)
        attn_maps = a.data
    else:
        outs, maps = [], []
        for hd in range(cfg.n_heads):
            sl = (Ellipsis, slice(hd * cfg.head_dim, (hd + 1) * cfg.head_dim))
            o, a = _attend(q[sl], k[sl], v[sl], bias_t, scale, cfg, training, rng)
            outs.append(o)
            maps.append(a.data)
        out = T.concat(outs, axis=-1) @ attn["wo"]
        attn_maps = np.stack(maps, axis=1)
    re_new = re + out if cfg.residual else out
    if not cfg.track_imaginary:
        im = T.Tensor(np.zeros(im.shape))
    return re_new, im, attn_maps


def _attend(q, k, v, bias_t, scale, cfg, training, rng):
    scores = (q @ T.transpose(k)) * scale
    if bias_t is not None:
        scores = scores + bias_t
    a = T.softmax(scores, axis=-1)
    return T.dropout(a, cfg.attn_dropout, rng, training) @ v, a


def run_layers(layers, latent, training=False, rng=None, trace=None):
    """Thread one latent through ``layers``; the last one stays in frequency space."""
    if not layers:
        raise NoModalityAvailable("no update layers to run (all modalities missing)")
    for i, layer in enumerate(layers):
        blk = layer.block
        re, im, attn = frequency_update(latent, layer.kv, layer.bias,
                                        blk.attn_params(layer.pass_idx), blk.config,
                                        training, rng)
        last = i == len(layers) - 1
        if not last:
            latent = T.idft2_real(re, im)
        if trace is not None:
            trace.append({"block": blk.modality, "pass": layer.pass_idx, "real": re.data,
                          "imag": im.data, "spatial": None if last else latent.data,
                          "attention": attn})
    return re, im


def apply_head(re, im, head, cfg, training=False, rng=None):
    """Linear layer on the layer-normalised, flattened real spectrum."""
    b = re.shape[0]
    flat = re.reshape(b, -1)
    if cfg.head_imag:
        flat = T.concat([flat, im.reshape(b, -1)], axis=1)
    z = T.layer_norm(flat, head["ln_gain"], head["ln_bias"], cfg.ln_eps)
    z = T.dropout(z, cfg.fcnn_dropout, rng, training)
    return T.linear(z, head["w"], head["b"])


def block_from_dicts(modality, encoder, config, task, seed=0, init_seed=None):
    return LegoBlock(modality, EncoderConfig(**encoder), BlockConfig(**config), TaskSpec(**task),
                     seed=seed, init_seed=init_seed)
