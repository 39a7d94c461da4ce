"""Minimal pre-norm transformer encoder: config, frozen weight bundles, and the
reference single-head attention / encoder-layer operations.

The classification head pools the first real sequence position. All weights are
initialized from a counter-based generator so a (seed, config) pair fully
determines the backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .numerics import (
    DTYPE_DEFAULT,
    MASK_PENALTY,
    Tensor,
    activation,
    layer_norm,
    make_rng,
    normal_init,
    softmax_rows,
)

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden: int
    layers: int
    heads: int
    ffn_mult: int = 4
    max_seq: int = 512
    activation: str = "gelu"
    pad_id: int = 0

    def __post_init__(self) -> None:
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.hidden


@dataclass
class LayerWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor
    b_k: Tensor
    b_v: Tensor
    b_o: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    # bias-vector attribute names, the sites BitFit unfreezes
    BIAS_SITES = ("b_q", "b_k", "b_v", "b_o", "b_ff1", "b_ff2", "ln1_beta", "ln2_beta")


@dataclass
class Backbone:
    config: ModelConfig
    embed_weights: Tensor  # [V, d]
    layers: list[LayerWeights] = field(default_factory=list)
    head_w: Tensor = None  # [d, num_classes]
    head_b: Tensor = None  # [num_classes]

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[1]

    def named_params(self) -> dict[str, Tensor]:
        """Flat name -> array view of every backbone parameter."""
        out = {"embed": self.embed_weights}
        for i, lw in enumerate(self.layers):
            for name in (
                "w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o",
                "w_ff1", "b_ff1", "w_ff2", "b_ff2",
                "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
            ):
                out[f"layer.{i}.{name}"] = getattr(lw, name)
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out


def init_backbone(config: ModelConfig, num_classes: int, seed: int, dtype=DTYPE_DEFAULT) -> Backbone:
    """Random frozen backbone: 0.02-scaled normal weights, identity layer norms, zero biases."""
    d, f = config.hidden, config.ffn_dim
    rng = make_rng(seed, "backbone")
    layers = []
    for _ in range(config.layers):
        layers.append(
            LayerWeights(
                w_q=normal_init(rng, (d, d), dtype),
                w_k=normal_init(rng, (d, d), dtype),
                w_v=normal_init(rng, (d, d), dtype),
                w_o=normal_init(rng, (d, d), dtype),
                b_q=np.zeros(d, dtype=dtype),
                b_k=np.zeros(d, dtype=dtype),
                b_v=np.zeros(d, dtype=dtype),
                b_o=np.zeros(d, dtype=dtype),
                w_ff1=normal_init(rng, (d, f), dtype),
                b_ff1=np.zeros(f, dtype=dtype),
                w_ff2=normal_init(rng, (f, d), dtype),
                b_ff2=np.zeros(d, dtype=dtype),
                ln1_gamma=np.ones(d, dtype=dtype),
                ln1_beta=np.zeros(d, dtype=dtype),
                ln2_gamma=np.ones(d, dtype=dtype),
                ln2_beta=np.zeros(d, dtype=dtype),
            )
        )
    return Backbone(
        config=config,
        embed_weights=normal_init(rng, (config.vocab_size, d), dtype),
        layers=layers,
        head_w=normal_init(rng, (d, num_classes), dtype),
        head_b=np.zeros(num_classes, dtype=dtype),
    )


def embed(tokens, embed_weights: Tensor) -> Tensor:
    """Row lookup: output row j is embed_weights[tokens[j]]."""
    ids = np.asarray(tokens)
    if ids.size and (ids.min() < 0 or ids.max() >= embed_weights.shape[0]):
        raise InputError(
            f"token id out of range [0, {embed_weights.shape[0]}): {ids.min()}..{ids.max()}"
        )
    return embed_weights[ids]


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention for one head; mask[j] True excludes key j."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    return attention_weights(q, k, mask) @ v


def attention_weights(q: Tensor, k: Tensor, mask=None) -> Tensor:
    """The row-stochastic weight matrix of attention(q, k, .)."""
    d_h = q.shape[1]
    scores = q @ k.T / math.sqrt(d_h)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[0] != k.shape[0]:
            raise ShapeError(f"mask length {mask.shape[0]} != key count {k.shape[0]}")
        penalty = np.zeros(mask.shape[0], dtype=scores.dtype)
        penalty[mask] = MASK_PENALTY
        scores = scores + penalty
    return softmax_rows(scores)


def encoder_layer(h: Tensor, w: LayerWeights, mask=None, act_kind: str = "gelu", n_heads: int = 1) -> Tensor:
    """Pre-norm block: h + MHA(LN(h)), then + FFN(LN(.)); heads split on the hidden axis."""
    n, d = h.shape
    x1 = layer_norm(h, w.ln1_gamma, w.ln1_beta, LN_EPS)
    q = x1 @ w.w_q + w.b_q
    k = x1 @ w.w_k + w.b_k
    v = x1 @ w.w_v + w.b_v
    d_h = d // n_heads
    ctx = np.empty_like(q)
    for hd in range(n_heads):
        s = slice(hd * d_h, (hd + 1) * d_h)
        ctx[:, s] = attention(q[:, s], k[:, s], v[:, s], mask)
    h = h + ctx @ w.w_o + w.b_o
    x2 = layer_norm(h, w.ln2_gamma, w.ln2_beta, LN_EPS)
    ffn = activation(x2 @ w.w_ff1 + w.b_ff1, act_kind) @ w.w_ff2 + w.b_ff2
    return h + ffn
