"""Modality-specific encoders.

Each encoder maps a batch of raw inputs to a token matrix
``(batch, tokens, features)`` that a LegoBlock cross-attends to, plus an
optional additive key bias marking padded tokens.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyBag, ShapeMismatch

ENCODER_KINDS = ("snn", "abmil", "identity")
# finite stand-in for -inf on padded attention slots
PAD_BIAS = -1e30


@dataclass
class EncoderConfig:
    kind: str
    input_dim: int
    hidden_dims: tuple = (256, 256, 256, 256)
    dropout: float = 0.25
    gate_dim: int = 128
    attn_dropout: float = 0.25
    include_instances: bool = False

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"encoder kind must be one of {ENCODER_KINDS}, got {self.kind!r}")
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.kind != "identity" and not self.hidden_dims:
            raise ConfigError(f"{self.kind} encoder needs at least one hidden layer")

    @property
    def is_bag(self):
        return self.kind == "abmil"

    @property
    def output_dim(self):
        return self.input_dim if self.kind == "identity" else self.hidden_dims[-1]

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def _lecun_normal(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def _glorot_uniform(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Encoder:
    """Parameters plus forward pass for one encoder configuration."""

    def __init__(self, config, rng=None):
        self.config = config
        self.params = {}
        rng = np.random.default_rng(rng)
        dims = (config.input_dim,) + config.hidden_dims
        if config.kind == "snn":
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                self.params[f"fc{i}.w"] = T.Tensor(_lecun_normal(rng, a, b), requires_grad=True)
                self.params[f"fc{i}.b"] = T.Tensor(np.zeros(b), requires_grad=True)
        elif config.kind == "abmil":
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                self.params[f"fc{i}.w"] = T.Tensor(_glorot_uniform(rng, a, b), requires_grad=True)
                self.params[f"fc{i}.b"] = T.Tensor(np.zeros(b), requires_grad=True)
            h, g = dims[-1], config.gate_dim
            self.params["gate.v"] = T.Tensor(_glorot_uniform(rng, h, g), requires_grad=True)
            self.params["gate.bv"] = T.Tensor(np.zeros(g), requires_grad=True)
            self.params["gate.u"] = T.Tensor(_glorot_uniform(rng, h, g), requires_grad=True)
            self.params["gate.bu"] = T.Tensor(np.zeros(g), requires_grad=True)
            self.params["gate.w"] = T.Tensor(_glorot_uniform(rng, g, 1), requires_grad=True)
            self.params["gate.bw"] = T.Tensor(np.zeros(1), requires_grad=True)
        for name, p in self.params.items():
            p.name = name

    @property
    def n_layers(self):
        return len(self.config.hidden_dims)

    def forward(self, inputs, training=False, rng=None):
        """Returns ``(tokens, key_bias)``; ``key_bias`` is None when nothing is padded."""
        kind = self.config.kind
        if kind == "snn":
            return snn_forward(inputs, self, training, rng), None
        if kind == "abmil":
            bags, mask = inputs
            pooled, _, proj = abmil_forward(bags, mask, self, training, rng)
            if not self.config.include_instances:
                return pooled, None
            bias = np.concatenate([np.zeros((mask.shape[0], 1)), np.where(mask, 0.0, PAD_BIAS)],
                                  axis=1)
            return T.concat([pooled, proj], axis=1), (bias if not mask.all() else None)
        # identity
        if isinstance(inputs, tuple):
            bags, mask = inputs
            _check_dim(bags.shape[-1], self.config.input_dim)
            bias = None if mask.all() else np.where(mask, 0.0, PAD_BIAS)
            return T.Tensor(bags), bias
        x = np.asarray(inputs, dtype=np.float64)
        _check_dim(x.shape[-1], self.config.input_dim)
        return T.Tensor(x[:, None, :]), None


def _check_dim(got, want):
    if got != want:
        raise ShapeMismatch(f"encoder expects feature dim {want}, got {got}")


def snn_forward(x, enc, training=False, rng=None):
    """Self-normalising MLP: (linear, SELU, alpha-dropout) per layer; one output token."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"SNN expects a (batch, features) matrix, got {x.shape}")
    _check_dim(x.shape[1], enc.config.input_dim)
    h = T.Tensor(x)
    for i in range(enc.n_layers):
        h = T.selu(T.linear(h, enc.params[f"fc{i}.w"], enc.params[f"fc{i}.b"]))
        h = T.alpha_dropout(h, enc.config.dropout, rng, training)
    return h.reshape(x.shape[0], 1, h.shape[-1])


def abmil_forward(bags, mask, enc, training=False, rng=None):
    """Gated attention pooling over bag instances.

    ``bags`` is ``(batch, max_instances, feat)`` zero-padded, ``mask`` marks
    real instances.  Returns ``(pooled (B,1,H), attention (B,N), projected (B,N,H))``.
    """
    bags = np.asarray(bags, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if bags.ndim != 3:
        raise ShapeMismatch(f"ABMIL expects (batch, instances, features), got {bags.shape}")
    _check_dim(bags.shape[-1], enc.config.input_dim)
    if bags.shape[1] == 0 or not mask.any(axis=1).all():
        raise EmptyBag("every bag needs at least one instance")
    p = enc.params
    h = T.Tensor(bags)
    for i in range(enc.n_layers):
        h = T.relu(T.linear(h, p[f"fc{i}.w"], p[f"fc{i}.b"]))
        h = T.dropout(h, enc.config.dropout, rng, training)
    gate = T.tanh(T.linear(h, p["gate.v"], p["gate.bv"])) * T.sigmoid(
        T.linear(h, p["gate.u"], p["gate.bu"]))
    scores = T.linear(gate, p["gate.w"], p["gate.bw"]).reshape(bags.shape[0], bags.shape[1])
    if not mask.all():
        scores = scores + T.Tensor(np.where(mask, 0.0, PAD_BIAS))
    attn = T.softmax(scores, axis=-1)
    attn_d = T.dropout(attn, enc.config.attn_dropout, rng, training)
    pooled = attn_d.reshape(bags.shape[0], 1, bags.shape[1]) @ h
    return pooled, attn, h


def collate_bags(bags, feat_dim):
    """Zero-pad a list of ``(n_i, feat)`` arrays into ``(B, max n, feat)`` plus a mask.

    Instances inside each bag are put in lexicographic order first so that
    pooling is bit-for-bit independent of the order they arrived in.
    """
    n_max = max(len(b) for b in bags)
    out = np.zeros((len(bags), n_max, feat_dim))
    mask = np.zeros((len(bags), n_max), dtype=bool)
    for i, b in enumerate(bags):
        b = np.asarray(b, dtype=np.float64)
        if len(b) == 0:
            raise EmptyBag(f"bag {i} has no instances")
        order = np.lexsort(b.T[::-1])
        out[i, :len(b)] = b[order]
        mask[i, :len(b)] = True
    return out, mask
