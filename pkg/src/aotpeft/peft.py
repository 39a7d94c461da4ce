"""Pluggable fine-tuning methods for a frozen encoder.

Two reparametrized per-token bias tables (Kronecker-factorized and
embedding-driven FC), soft prompts at the input or at every layer's keys and
values, bias-only deltas, low-rank attention deltas, bottleneck adapters, and
full fine-tuning. Includes table fusion, row-wise evaluation, attention
decompositions used as identity oracles, and parameter/memory accounting.

Row evaluation (`kron_row` / `fc_row`) is the single arithmetic path shared by
on-the-fly training lookups and `materialize_table`, so a fused table is
bit-identical to the rows it was built from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Union

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .numerics import (
    DTYPE_DEFAULT,
    Tensor,
    activation,
    make_rng,
    normal_init,
    softmax_rows,
)

if TYPE_CHECKING:
    from .transformer import Backbone, LayerWeights, ModelConfig

DROPOUT_KEEP = 0.9  # training-time dropout on bias inputs, inverted scaling


# ---------------------------------------------------------------------------
# Method configurations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AotKron:
    """Per-layer bias table factorized as (W_L kron W_M) @ W_R over an a*b id grid."""

    a: int
    b: int
    r: int


@dataclass(frozen=True)
class AotFC:
    """Per-layer bias table computed from frozen embeddings through a rank-r FC net."""

    r: int
    activation: str = "gelu"


@dataclass(frozen=True)
class PTv1:
    """Trainable prompt rows prepended to the input embeddings."""

    p: int


@dataclass(frozen=True)
class PTv2:
    """Trainable prefix rows concatenated to every layer's keys and values."""

    p: int


@dataclass(frozen=True)
class BitFit:
    """Unfreeze every bias vector of the backbone via additive deltas."""


@dataclass(frozen=True)
class LoRA:
    """Low-rank deltas on all four attention projections; alpha defaults to r (scale 1)."""

    r: int
    alpha: float | None = None
    fused: bool = False

    @property
    def scale(self) -> float:
        return (self.r if self.alpha is None else self.alpha) / self.r


@dataclass(frozen=True)
class Adapter:
    """Bottleneck residual block after the attention and FFN sublayers."""

    r: int
    activation: str = "gelu"


@dataclass(frozen=True)
class Full:
    """Plain fine-tuning: every backbone parameter is trainable."""


PeftConfig = Union[AotKron, AotFC, PTv1, PTv2, BitFit, LoRA, Adapter, Full]

LORA_SITES = ("q", "k", "v", "o")
ADAPTER_SLOTS = ("attn", "ffn")


def validate_config(cfg: PeftConfig, model: "ModelConfig") -> None:
    if isinstance(cfg, AotKron):
        if cfg.a * cfg.b < model.vocab_size:
            raise ConfigError(
                f"factor grid {cfg.a}*{cfg.b} smaller than vocabulary {model.vocab_size}"
            )
        if cfg.r < 1:
            raise ConfigError("rank must be >= 1")
    elif isinstance(cfg, (AotFC, LoRA, Adapter)):
        if cfg.r < 1:
            raise ConfigError("rank must be >= 1")
    elif isinstance(cfg, (PTv1, PTv2)):
        if cfg.p < 0:
            raise ConfigError("prefix length must be >= 0")


# ---------------------------------------------------------------------------
# Trainable state per method
# ---------------------------------------------------------------------------


@dataclass
class BiasTable:
    """Fused per-layer [V, d] bias matrices; read-only once built."""

    tables: list[Tensor]
    dtype_bits: int = 32

    @property
    def vocab_size(self) -> int:
        return self.tables[0].shape[0]

    @property
    def hidden(self) -> int:
        return self.tables[0].shape[1]

    @property
    def layers(self) -> int:
        return len(self.tables)


@dataclass
class KronState:
    cfg: AotKron
    w_l: list[Tensor]  # [a, r] per layer
    w_m: list[Tensor]  # [b, r] per layer
    w_r: list[Tensor]  # [r*r, d] per layer


@dataclass
class FCState:
    cfg: AotFC
    w1: list[Tensor]  # [d, r]
    b1: list[Tensor]  # [r]
    w2: list[Tensor]  # [r, d]
    b2: list[Tensor]  # [d]


@dataclass
class FusedAotState:
    """Serving-time form of either reparametrization after fusion."""

    table: BiasTable


@dataclass
class PTv1State:
    cfg: PTv1
    prompt: Tensor  # [p, d]


@dataclass
class PTv2State:
    cfg: PTv2
    p_k: list[Tensor]  # [p, d] per layer
    p_v: list[Tensor]  # [p, d] per layer


@dataclass
class BitFitState:
    cfg: BitFit
    deltas: list[dict[str, Tensor]]  # per layer, keyed by LayerWeights.BIAS_SITES


@dataclass
class LoRAState:
    cfg: LoRA
    a: list[dict[str, Tensor]]  # per layer, per site, [d, r]
    b: list[dict[str, Tensor]]  # per layer, per site, [r, d]


@dataclass
class AdapterState:
    cfg: Adapter
    w_down: list[dict[str, Tensor]]  # [d, r] per layer per slot
    b_down: list[dict[str, Tensor]]  # [r]
    w_up: list[dict[str, Tensor]]  # [r, d]
    b_up: list[dict[str, Tensor]]  # [d]


@dataclass
class FullState:
    cfg: Full


PeftState = Union[
    KronState, FCState, FusedAotState, PTv1State, PTv2State,
    BitFitState, LoRAState, AdapterState, FullState, None,
]


def init_peft_state(cfg: PeftConfig, model: "ModelConfig", seed: int, dtype=DTYPE_DEFAULT) -> PeftState:
    """Fresh trainable state at the documented initialization (zero where neutrality demands)."""
    validate_config(cfg, model)
    d, l = model.hidden, model.layers
    rng = make_rng(seed, "peft")
    if isinstance(cfg, AotKron):
        return KronState(
            cfg,
            w_l=[normal_init(rng, (cfg.a, cfg.r), dtype) for _ in range(l)],
            w_m=[normal_init(rng, (cfg.b, cfg.r), dtype) for _ in range(l)],
            w_r=[np.zeros((cfg.r * cfg.r, d), dtype=dtype) for _ in range(l)],
        )
    if isinstance(cfg, AotFC):
        return FCState(
            cfg,
            w1=[normal_init(rng, (d, cfg.r), dtype) for _ in range(l)],
            b1=[np.zeros(cfg.r, dtype=dtype) for _ in range(l)],
            w2=[np.zeros((cfg.r, d), dtype=dtype) for _ in range(l)],
            b2=[np.zeros(d, dtype=dtype) for _ in range(l)],
        )
    if isinstance(cfg, PTv1):
        return PTv1State(cfg, prompt=normal_init(rng, (cfg.p, d), dtype))
    if isinstance(cfg, PTv2):
        return PTv2State(
            cfg,
            p_k=[normal_init(rng, (cfg.p, d), dtype) for _ in range(l)],
            p_v=[normal_init(rng, (cfg.p, d), dtype) for _ in range(l)],
        )
    if isinstance(cfg, BitFit):
        f = model.ffn_dim
        sizes = {"b_q": d, "b_k": d, "b_v": d, "b_o": d,
                 "b_ff1": f, "b_ff2": d, "ln1_beta": d, "ln2_beta": d}
        return BitFitState(
            cfg,
            deltas=[{k: np.zeros(n, dtype=dtype) for k, n in sizes.items()} for _ in range(l)],
        )
    if isinstance(cfg, LoRA):
        return LoRAState(
            cfg,
            a=[{s: normal_init(rng, (d, cfg.r), dtype) for s in LORA_SITES} for _ in range(l)],
            b=[{s: np.zeros((cfg.r, d), dtype=dtype) for s in LORA_SITES} for _ in range(l)],
        )
    if isinstance(cfg, Adapter):
        return AdapterState(
            cfg,
            w_down=[{s: normal_init(rng, (d, cfg.r), dtype) for s in ADAPTER_SLOTS} for _ in range(l)],
            b_down=[{s: np.zeros(cfg.r, dtype=dtype) for s in ADAPTER_SLOTS} for _ in range(l)],
            w_up=[{s: np.zeros((cfg.r, d), dtype=dtype) for s in ADAPTER_SLOTS} for _ in range(l)],
            b_up=[{s: np.zeros(d, dtype=dtype) for s in ADAPTER_SLOTS} for _ in range(l)],
        )
    if isinstance(cfg, Full):
        return FullState(cfg)
    raise ConfigError(f"unknown method config {cfg!r}")


def peft_named_params(state: PeftState) -> dict[str, Tensor]:
    """Flat name -> array view of the method-owned parameters (empty for Full/fused/None)."""
    out: dict[str, Tensor] = {}
    if isinstance(state, KronState):
        for i in range(len(state.w_l)):
            out[f"aot_kron.{i}.w_l"] = state.w_l[i]
            out[f"aot_kron.{i}.w_m"] = state.w_m[i]
            out[f"aot_kron.{i}.w_r"] = state.w_r[i]
    elif isinstance(state, FCState):
        for i in range(len(state.w1)):
            out[f"aot_fc.{i}.w1"] = state.w1[i]
            out[f"aot_fc.{i}.b1"] = state.b1[i]
            out[f"aot_fc.{i}.w2"] = state.w2[i]
            out[f"aot_fc.{i}.b2"] = state.b2[i]
    elif isinstance(state, PTv1State):
        out["ptv1.prompt"] = state.prompt
    elif isinstance(state, PTv2State):
        for i in range(len(state.p_k)):
            out[f"ptv2.{i}.p_k"] = state.p_k[i]
            out[f"ptv2.{i}.p_v"] = state.p_v[i]
    elif isinstance(state, BitFitState):
        for i, sites in enumerate(state.deltas):
            for site, arr in sites.items():
                out[f"bitfit.{i}.{site}"] = arr
    elif isinstance(state, LoRAState):
        for i in range(len(state.a)):
            for s in LORA_SITES:
                out[f"lora.{i}.{s}.a"] = state.a[i][s]
                out[f"lora.{i}.{s}.b"] = state.b[i][s]
    elif isinstance(state, AdapterState):
        for i in range(len(state.w_down)):
            for s in ADAPTER_SLOTS:
                out[f"adapter.{i}.{s}.w_down"] = state.w_down[i][s]
                out[f"adapter.{i}.{s}.b_down"] = state.b_down[i][s]
                out[f"adapter.{i}.{s}.w_up"] = state.w_up[i][s]
                out[f"adapter.{i}.{s}.b_up"] = state.b_up[i][s]
    return out


# ---------------------------------------------------------------------------
# Row evaluation and fusion
# ---------------------------------------------------------------------------


def kron_row(w_l: Tensor, w_m: Tensor, w_r: Tensor, v: int) -> Tensor:
    """Bias row for id v: flattened outer product of factor rows (v div b, v mod b) times w_r."""
    a, r = w_l.shape
    b = w_m.shape[0]
    if not 0 <= v < a * b:
        raise InputError(f"id {v} outside factor grid of size {a * b}")
    i, j = divmod(v, b)
    return np.outer(w_l[i], w_m[j]).reshape(-1) @ w_r


def fc_row(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, embed_weights: Tensor,
           v: int, act_kind: str = "gelu") -> Tensor:
    """Bias row for token v: its frozen embedding through the bottleneck FC net."""
    if not 0 <= v < embed_weights.shape[0]:
        raise InputError(f"token id {v} outside vocabulary {embed_weights.shape[0]}")
    return activation(embed_weights[v] @ w1 + b1, act_kind) @ w2 + b2


def aot_rows_for_layer(state, layer: int, ids, embed_weights: Tensor | None = None) -> Tensor:
    """Stack of bias rows for the given ids, one per id, via the per-id row path."""
    ids = np.asarray(ids).reshape(-1)
    if isinstance(state, KronState):
        rows = [kron_row(state.w_l[layer], state.w_m[layer], state.w_r[layer], int(v)) for v in ids]
    elif isinstance(state, FCState):
        rows = [
            fc_row(state.w1[layer], state.b1[layer], state.w2[layer], state.b2[layer],
                   embed_weights, int(v), state.cfg.activation)
            for v in ids
        ]
    elif isinstance(state, FusedAotState):
        return state.table.tables[layer][ids]
    else:
        raise ConfigError(f"state {type(state).__name__} has no bias rows")
    return np.stack(rows) if rows else np.zeros((0, 0))


def materialize_table(state, model: "ModelConfig", embed_weights: Tensor | None = None,
                      dtype_bits: int = 32) -> BiasTable:
    """Fuse a trained reparametrization into per-layer [V, d] matrices.

    Rows are produced by the same per-id path as on-the-fly lookups, so the
    table is bit-identical to them at equal precision. Factor-grid ids beyond
    the vocabulary are never materialized.
    """
    if isinstance(state, FusedAotState):
        return state.table
    n_layers = model.layers
    tables = []
    for layer in range(n_layers):
        rows = aot_rows_for_layer(state, layer, np.arange(model.vocab_size), embed_weights)
        if dtype_bits == 16:
            rows = rows.astype(np.float16)
        tables.append(rows)
    return BiasTable(tables=tables, dtype_bits=dtype_bits)


def apply_aot(h: Tensor, p_layer: Tensor, tokens) -> Tensor:
    """Shift each position's hidden state by its token's bias row: h + p_layer[tokens]."""
    ids = np.asarray(tokens)
    if ids.shape[0] != h.shape[0]:
        raise ShapeError(f"{ids.shape[0]} tokens for {h.shape[0]} positions")
    return h + p_layer[ids]


# ---------------------------------------------------------------------------
# Baseline method primitives
# ---------------------------------------------------------------------------


def ptv1_prepend(prompt: Tensor, h0: Tensor) -> Tensor:
    """Concatenate prompt rows ahead of the input embeddings; pooling shifts by p."""
    return np.concatenate([prompt, h0], axis=0)


def ptv2_attention(q: Tensor, k: Tensor, v: Tensor, p_k: Tensor, p_v: Tensor, mask=None) -> Tensor:
    """Attention with trainable prefix rows concatenated to keys and values.

    Output length equals the query length; prefixes only receive attention.
    """
    from .transformer import attention  # local import to keep module layering acyclic

    k_full = np.concatenate([p_k, k], axis=0)
    v_full = np.concatenate([p_v, v], axis=0)
    if mask is not None:
        mask = np.concatenate([np.zeros(p_k.shape[0], dtype=bool), np.asarray(mask, dtype=bool)])
    return attention(q, k_full, v_full, mask)


def bitfit_shift(h: Tensor, b: Tensor) -> Tensor:
    """Add the same bias vector to every sequence position."""
    return h + b


def lora_linear(x: Tensor, w: Tensor, a: Tensor, b: Tensor, alpha: float, r: int,
                fused: bool = False) -> Tensor:
    """x @ w plus a rank-r delta, evaluated factored or folded into the weight."""
    scale = alpha / r
    if fused:
        return x @ (w + scale * (a @ b))
    return x @ w + scale * ((x @ a) @ b)


def adapter_bottleneck(h: Tensor, w_down: Tensor, b_down: Tensor, w_up: Tensor, b_up: Tensor,
                       act_kind: str = "gelu") -> Tensor:
    """Residual bottleneck: h + act(h @ w_down + b_down) @ w_up + b_up."""
    return h + activation(h @ w_down + b_down, act_kind) @ w_up + b_up


# ---------------------------------------------------------------------------
# Attention decompositions (identity oracles)
# ---------------------------------------------------------------------------


def decompose_aot_attention(h: Tensor, p_rows: Tensor, lw: "LayerWeights", i: int) -> Tensor:
    """Attention output row i under per-position bias rows, split into its two terms.

    Queries and keys come from the shifted states h + p_rows; the result is the
    weighted sum of the bias contributions p_rows @ w_v plus the weighted sum of
    the unshifted values. Summing the terms reproduces direct attention on the
    shifted states (single head, d_h = d).
    """
    d = h.shape[1]
    h_shift = h + p_rows
    q = h_shift @ lw.w_q + lw.b_q
    k = h_shift @ lw.w_k + lw.b_k
    v = h @ lw.w_v + lw.b_v
    weights = softmax_rows((q[i : i + 1] @ k.T) / math.sqrt(d))[0]
    term_bias = weights @ (p_rows @ lw.w_v)
    term_content = weights @ v
    return term_bias + term_content


def decompose_aot_attention_terms(h: Tensor, p_rows: Tensor, lw: "LayerWeights", i: int):
    """The (bias term, content term) pair of decompose_aot_attention, for inspection."""
    d = h.shape[1]
    h_shift = h + p_rows
    q = h_shift @ lw.w_q + lw.b_q
    k = h_shift @ lw.w_k + lw.b_k
    v = h @ lw.w_v + lw.b_v
    weights = softmax_rows((q[i : i + 1] @ k.T) / math.sqrt(d))[0]
    return weights @ (p_rows @ lw.w_v), weights @ v


def decompose_ptv2_attention(q: Tensor, k: Tensor, v: Tensor, p_k: Tensor, p_v: Tensor, i: int) -> Tensor:
    """Prefix attention output row i as prefix-value and content-value sums."""
    k_full = np.concatenate([p_k, k], axis=0)
    d_h = q.shape[1]
    weights = softmax_rows((q[i : i + 1] @ k_full.T) / math.sqrt(d_h))[0]
    p = p_k.shape[0]
    return weights[:p] @ p_v + weights[p:] @ v


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


def count_trainable(cfg: PeftConfig, model: "ModelConfig", num_classes: int | None = None) -> int:
    """Exact trainable-parameter count for a method; add the head only when num_classes is given."""
    d, l, f = model.hidden, model.layers, model.ffn_dim
    if isinstance(cfg, AotKron):
        n = l * (cfg.a * cfg.r + cfg.b * cfg.r + cfg.r * cfg.r * d)
    elif isinstance(cfg, AotFC):
        n = l * (2 * d * cfg.r + cfg.r + d)
    elif isinstance(cfg, PTv1):
        n = cfg.p * d
    elif isinstance(cfg, PTv2):
        n = 2 * l * cfg.p * d
    elif isinstance(cfg, LoRA):
        n = 8 * l * d * cfg.r
    elif isinstance(cfg, BitFit):
        n = l * (7 * d + f)
    elif isinstance(cfg, Adapter):
        n = l * len(ADAPTER_SLOTS) * (2 * d * cfg.r + cfg.r + d)
    elif isinstance(cfg, Full):
        per_layer = 4 * d * d + 4 * d + d * f + f + f * d + d + 4 * d
        n = model.vocab_size * d + l * per_layer
    else:
        raise ConfigError(f"unknown method config {cfg!r}")
    if num_classes is not None:
        n += d * num_classes + num_classes
    return n


def fused_table_bytes(model: "ModelConfig", dtype_bits: int) -> int:
    """On-disk/in-RAM size of one task's fused bias table."""
    if dtype_bits not in (16, 32):
        raise ConfigError(f"dtype must be 16 or 32 bits, got {dtype_bits}")
    return model.vocab_size * model.hidden * model.layers * (dtype_bits // 8)
