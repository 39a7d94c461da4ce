"""Inference-latency benchmark and trained-table row-norm analysis.

Timing uses the monotonic clock, 10 warmup passes, and interleaved round-robin
scheduling of the methods inside each (batch, seqlen) cell so slow drift of the
host lands evenly on every method. Reported times are normalized by the vanilla
model's mean in the same cell.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import ConfigError, InputError
from .forward import run_forward
from .numerics import DTYPE_DEFAULT, Tensor, make_rng
from .peft import (
    Adapter,
    AotFC,
    AotKron,
    BiasTable,
    BitFit,
    FusedAotState,
    LoRA,
    PTv1,
    PTv2,
    init_peft_state,
)
from .transformer import Backbone, ModelConfig, init_backbone

REPS_SINGLE = 300  # batch size 1
REPS_BATCHED = 100  # any larger batch

PRESETS: dict[str, ModelConfig] = {
    "small": ModelConfig(vocab_size=256, hidden=64, layers=2, heads=2, max_seq=512),
    "base-shaped": ModelConfig(vocab_size=4096, hidden=128, layers=6, heads=2, max_seq=512),
    "large-shaped": ModelConfig(vocab_size=8192, hidden=256, layers=12, heads=4, max_seq=512),
    "base-raw": ModelConfig(vocab_size=50265, hidden=768, layers=12, heads=12, max_seq=512),
    "large-raw": ModelConfig(vocab_size=50265, hidden=1024, layers=24, heads=16, max_seq=512),
}


@dataclass(frozen=True)
class BenchConfig:
    batch_sizes: tuple[int, ...] = (1, 16, 64)
    seq_lens: tuple[int, ...] = (64, 128, 384)
    methods: tuple[str, ...] = ("vanilla", "aot-fc-fused", "ptv2-20")
    preset: str = "large-shaped"
    warmup: int = 10
    seed: int = 0
    model_overrides: dict = field(default_factory=dict)

    def reps_for(self, batch: int) -> int:
        return REPS_SINGLE if batch == 1 else REPS_BATCHED

    def model_config(self) -> ModelConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[self.preset]
        if self.model_overrides:
            from dataclasses import replace

            base = replace(base, **self.model_overrides)
        return base


@dataclass
class BenchReport:
    meta: dict
    cells: list[dict]

    def to_json_dict(self) -> dict:
        return {"meta": self.meta, "cells": self.cells}

    def csv_lines(self) -> list[str]:
        lines = ["method,batch,seqlen,mean_ms,std_ms,normalized"]
        for c in self.cells:
            lines.append(
                f"{c['method']},{c['batch']},{c['seqlen']},"
                f"{c['mean_ms']!r},{c['std_ms']!r},{c['normalized']!r}"
            )
        return lines

    def cell(self, method: str, batch: int, seqlen: int) -> dict:
        for c in self.cells:
            if c["method"] == method and c["batch"] == batch and c["seqlen"] == seqlen:
                return c
        raise InputError(f"no cell ({method}, {batch}, {seqlen}) in report")


@dataclass
class NormRanking:
    """Per-layer token rankings by bias-row L2 norm, top k per layer."""

    k: int
    layers: dict[int, list[tuple[int, float]]]


def parse_bench_method(spec: str):
    """Method spec string -> (label, factory(model_config, seed) -> state)."""
    parts = spec.split("-")

    def rand_table(model: ModelConfig, seed: int) -> FusedAotState:
        rng = make_rng(seed, "bench-table")
        tables = [
            (rng.standard_normal((model.vocab_size, model.hidden)) * 0.02).astype(DTYPE_DEFAULT)
            for _ in range(model.layers)
        ]
        return FusedAotState(BiasTable(tables=tables))

    if spec == "vanilla":
        return spec, lambda model, seed: None
    if spec in ("aot-fused", "aot-kron-fused", "aot-fc-fused"):
        return spec, rand_table
    if spec in ("aot-kron-unfused", "aot-unfused"):
        def kron_state(model, seed):
            a = 1 << ((model.vocab_size - 1).bit_length() + 1) // 2
            b = -(-model.vocab_size // a)
            st = init_peft_state(AotKron(a=a, b=b, r=20), model, seed, DTYPE_DEFAULT)
            for w in st.w_r:
                w[...] = (make_rng(seed, "wr").standard_normal(w.shape) * 0.02).astype(w.dtype)
            return st
        return spec, kron_state
    if spec == "aot-fc-unfused":
        def fc_state(model, seed):
            st = init_peft_state(AotFC(r=64), model, seed, DTYPE_DEFAULT)
            rng = make_rng(seed, "w2")
            for w in st.w2:
                w[...] = (rng.standard_normal(w.shape) * 0.02).astype(w.dtype)
            return st
        return spec, fc_state
    if parts[0] == "ptv1":
        p = int(parts[1]) if len(parts) > 1 else 20
        return spec, lambda model, seed: init_peft_state(PTv1(p=p), model, seed, DTYPE_DEFAULT)
    if parts[0] == "ptv2":
        p = int(parts[1]) if len(parts) > 1 else 20
        return spec, lambda model, seed: init_peft_state(PTv2(p=p), model, seed, DTYPE_DEFAULT)
    if spec == "bitfit":
        return spec, lambda model, seed: init_peft_state(BitFit(), model, seed, DTYPE_DEFAULT)
    if parts[0] == "lora":
        fused = len(parts) > 1 and parts[1] == "fused"
        r = int(parts[2]) if len(parts) > 2 else 64
        def lora_state(model, seed):
            st = init_peft_state(LoRA(r=r, fused=fused), model, seed, DTYPE_DEFAULT)
            rng = make_rng(seed, "lora-b")
            for layer in st.b:
                for s in layer:
                    layer[s][...] = (rng.standard_normal(layer[s].shape) * 0.02).astype(
                        layer[s].dtype)
            return st
        return spec, lora_state
    if parts[0] == "adapter":
        r = int(parts[1]) if len(parts) > 1 else 64
        return spec, lambda model, seed: init_peft_state(Adapter(r=r), model, seed, DTYPE_DEFAULT)
    raise ConfigError(f"unknown bench method {spec!r}")


def measure(cfg: BenchConfig) -> BenchReport:
    """Run the latency grid; vanilla is always measured as the normalization baseline."""
    model = cfg.model_config()
    backbone = init_backbone(model, num_classes=2, seed=cfg.seed, dtype=DTYPE_DEFAULT)

    methods = list(cfg.methods)
    if "vanilla" not in methods:
        methods.insert(0, "vanilla")
    states = {}
    for spec in methods:
        label, factory = parse_bench_method(spec)
        states[label] = factory(model, cfg.seed)

    cells = []
    for batch in cfg.batch_sizes:
        for seqlen in cfg.seq_lens:
            if seqlen > model.max_seq:
                raise ConfigError(f"seqlen {seqlen} exceeds preset max_seq {model.max_seq}")
            reps = cfg.reps_for(batch)
            tokens = make_rng(cfg.seed, "tokens", batch, seqlen).integers(
                0, model.vocab_size, size=(batch, seqlen)
            )
            samples = {m: np.empty(reps) for m in methods}
            for m in methods:  # warmup, also primes caches/allocators
                for _ in range(cfg.warmup):
                    run_forward(backbone, states[m], tokens)
            for rep in range(reps):  # interleaved round-robin
                for m in methods:
                    t0 = time.perf_counter()
                    run_forward(backbone, states[m], tokens)
                    samples[m][rep] = time.perf_counter() - t0
            vanilla_mean = float(samples["vanilla"].mean())
            for m in methods:
                mean_s = float(samples[m].mean())
                cells.append({
                    "method": m,
                    "batch": int(batch),
                    "seqlen": int(seqlen),
                    "mean_ms": mean_s * 1e3,
                    "std_ms": float(samples[m].std()) * 1e3,
                    "normalized": mean_s / vanilla_mean,
                    "reps": reps,
                })

    meta = {
        "precision": "float32",
        "preset": cfg.preset,
        "model": {"vocab_size": model.vocab_size, "hidden": model.hidden,
                  "layers": model.layers, "heads": model.heads},
        "warmup": cfg.warmup,
        "host": f"{platform.platform()} / {platform.processor() or 'unknown-cpu'}",
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    return BenchReport(meta=meta, cells=cells)


def top_tokens_by_norm(table: BiasTable, layer: int, k: int) -> list[tuple[int, float]]:
    """Tokens of one layer sorted by descending row L2 norm; ties break on token id."""
    if not 0 <= layer < table.layers:
        raise InputError(f"layer {layer} out of range [0, {table.layers})")
    rows = np.asarray(table.tables[layer], dtype=np.float64)
    norms = np.sqrt((rows * rows).sum(axis=1))
    k = min(k, norms.size)
    order = np.lexsort((np.arange(norms.size), -norms))
    return [(int(v), float(norms[v])) for v in order[:k]]


def rank_all_layers(table: BiasTable, k: int) -> NormRanking:
    return NormRanking(
        k=k,
        layers={layer: top_tokens_by_norm(table, layer, k) for layer in range(table.layers)},
    )
