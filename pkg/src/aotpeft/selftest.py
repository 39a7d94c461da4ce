"""Built-in verification suites: gradients, algebraic identities, accounting,
and multi-task equivalence. The CLI `selftest` subcommand runs all four and
exits nonzero on any failure; the test suite asserts on the same results.
"""

from __future__ import annotations

import math
import tempfile
import tracemalloc
from pathlib import Path

import numpy as np

from .forward import build_params, forward, run_backward, run_forward, trainable_items, zero_grads
from .numerics import finite_diff_grad_sampled, make_rng
from .peft import (
    Adapter,
    AotFC,
    AotKron,
    BiasTable,
    BitFit,
    Full,
    FusedAotState,
    LoRA,
    PTv1,
    PTv2,
    count_trainable,
    decompose_aot_attention,
    decompose_aot_attention_terms,
    decompose_ptv2_attention,
    fused_table_bytes,
    init_peft_state,
    lora_linear,
    materialize_table,
    ptv2_attention,
)
from .taskstore import (
    TaskBundle,
    TaskRegistry,
    multitask_forward,
    read_rows,
    write_table,
)
from .transformer import Backbone, LayerWeights, ModelConfig, attention, init_backbone
from .training import cross_entropy

F64 = np.float64

GRAD_MODEL = ModelConfig(vocab_size=97, hidden=32, layers=2, heads=2, max_seq=32)
GRAD_METHODS = [
    ("aot-kron", AotKron(a=10, b=10, r=3)),
    ("aot-fc", AotFC(r=8)),
    ("ptv1", PTv1(p=4)),
    ("ptv2", PTv2(p=4)),
    ("bitfit", BitFit()),
    ("lora", LoRA(r=4)),
    ("adapter", Adapter(r=4)),
    ("full", Full()),
]


def _perturb_trainables(params, seed: int) -> None:
    # move every trainable off its (possibly zero) init so no gradient is gated off
    rng = make_rng(seed, "perturb")
    for _name, pair in trainable_items(params):
        pair.value += (rng.standard_normal(pair.value.shape) * 0.02).astype(pair.value.dtype)


def gradient_suite(seeds: int = 20, coords_per_tensor: int = 12, tol: float = 1e-4):
    """Analytic vs central-difference gradients for every method; max rel err per method."""
    results = []
    n, bsz, classes = 8, 2, 3
    for label, cfg in GRAD_METHODS:
        worst = 0.0
        for seed in range(seeds):
            backbone = init_backbone(GRAD_MODEL, classes, seed=seed, dtype=F64)
            state = init_peft_state(cfg, GRAD_MODEL, seed + 1, dtype=F64)
            params = build_params(backbone, state)
            _perturb_trainables(params, seed + 2)
            data_rng = make_rng(seed, "data", label)
            tokens = data_rng.integers(0, GRAD_MODEL.vocab_size, size=(bsz, n))
            labels = data_rng.integers(0, classes, size=bsz)
            # alternate train/eval so both bias-row backward paths are exercised
            train_mode = isinstance(cfg, (AotKron, AotFC)) and seed % 2 == 0

            def loss_value(_x=None):
                rng = make_rng(seed, "drop")
                logits, _ = run_forward(backbone, state, tokens,
                                        train=train_mode, rng=rng)
                return cross_entropy(logits, labels)[0]

            rng = make_rng(seed, "drop")
            logits, cache = run_forward(backbone, state, tokens, train=train_mode,
                                        rng=rng, need_cache=True)
            loss, dlogits = cross_entropy(logits, labels)
            zero_grads(params)
            run_backward(backbone, state, cache, dlogits, params)

            pick_rng = make_rng(seed, "coords", label)
            for name, pair in trainable_items(params):
                size = pair.value.size
                if size <= coords_per_tensor:
                    idx = np.arange(size)
                else:
                    idx = pick_rng.choice(size, size=coords_per_tensor, replace=False)
                fd = finite_diff_grad_sampled(loss_value, pair.value, idx, eps=1e-5)
                an = pair.grad.reshape(-1)[idx]
                denom = np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-6)
                err = float(np.max(np.abs(an - fd) / denom)) if idx.size else 0.0
                worst = max(worst, err)
        results.append((f"gradients[{label}] max rel err {worst:.2e}", worst < tol))
    return results


def identity_suite(seeds: int = 100, tol: float = 1e-10):
    """Algebraic identities: attention decompositions, fusion, weight folding, neutrality."""
    checks = []

    # (a) bias-shift attention decomposition vs direct attention on shifted states
    worst = 0.0
    d = 16
    for seed in range(seeds):
        rng = make_rng(seed, "ident-a")
        n = [1, 2, 8][seed % 3]
        lw = _random_layer(rng, d)
        h = rng.standard_normal((n, d))
        p_rows = rng.standard_normal((n, d))
        hp = h + p_rows
        q = hp @ lw.w_q + lw.b_q
        k = hp @ lw.w_k + lw.b_k
        v = hp @ lw.w_v + lw.b_v
        direct = attention(q, k, v)
        for i in range(n):
            delta = np.abs(decompose_aot_attention(h, p_rows, lw, i) - direct[i]).max()
            worst = max(worst, float(delta))
    checks.append((f"bias decomposition == direct attention, max delta {worst:.2e}", worst < tol))

    # (b) constant shift: bias term equals b @ w_v for every query position
    worst = 0.0
    for seed in range(20):
        rng = make_rng(seed, "ident-b")
        lw = _random_layer(rng, d)
        h = rng.standard_normal((6, d))
        b = rng.standard_normal(d)
        p_rows = np.tile(b, (6, 1))
        expected = b @ lw.w_v
        for i in range(6):
            term_bias, _ = decompose_aot_attention_terms(h, p_rows, lw, i)
            worst = max(worst, float(np.abs(term_bias - expected).max()))
    checks.append((f"constant-shift bias term == b @ w_v at every position, "
                   f"max delta {worst:.2e}", worst < tol))

    # (c) prefix attention two-sum decomposition vs direct concat attention
    worst = 0.0
    for seed in range(seeds):
        rng = make_rng(seed, "ident-c")
        n, p = 5, 3
        q = rng.standard_normal((n, d))
        k = rng.standard_normal((n, d))
        v = rng.standard_normal((n, d))
        p_k = rng.standard_normal((p, d))
        p_v = rng.standard_normal((p, d))
        direct = ptv2_attention(q, k, v, p_k, p_v)
        for i in range(n):
            delta = np.abs(decompose_ptv2_attention(q, k, v, p_k, p_v, i) - direct[i]).max()
            worst = max(worst, float(delta))
    checks.append((f"prefix decomposition == direct attention, max delta {worst:.2e}",
                   worst < tol))

    # (d) low-rank delta: factored vs folded evaluation
    worst = 0.0
    for seed in range(100):
        rng = make_rng(seed, "ident-d")
        r = 1 + seed % 6
        x = rng.standard_normal((4, d))
        w = rng.standard_normal((d, d))
        a = rng.standard_normal((d, r))
        b = rng.standard_normal((r, d))
        alpha = float(1 + seed % 3)
        delta = np.abs(
            lora_linear(x, w, a, b, alpha, r, fused=False)
            - lora_linear(x, w, a, b, alpha, r, fused=True)
        ).max()
        worst = max(worst, float(delta))
    checks.append((f"low-rank delta factored == folded, max delta {worst:.2e}", worst < tol))

    # (e) fusion equivalence: table-backed forward is bit-equal to on-the-fly rows
    model = ModelConfig(vocab_size=60, hidden=16, layers=2, heads=2, max_seq=16)
    backbone = init_backbone(model, 3, seed=7, dtype=F64)
    exact = True
    for cfg in (AotKron(a=8, b=8, r=2), AotFC(r=4)):
        state = init_peft_state(cfg, model, seed=11, dtype=F64)
        rng = make_rng(13, "fill")
        for _name, arr in _reparam_arrays(state):
            arr[...] = rng.standard_normal(arr.shape) * 0.05
        fused = FusedAotState(materialize_table(state, model, backbone.embed_weights))
        tokens = make_rng(17, "tok").integers(0, model.vocab_size, size=(3, 10))
        on_the_fly, _ = run_forward(backbone, state, tokens)
        via_table, _ = run_forward(backbone, fused, tokens)
        exact = exact and bool(np.array_equal(on_the_fly, via_table))
    checks.append(("fused-table forward bit-equal to on-the-fly forward", exact))

    # (f) zero-init neutrality: fresh states leave logits identical to vanilla
    neutral = True
    tokens = make_rng(23, "tok").integers(0, model.vocab_size, size=(2, 9))
    vanilla, _ = run_forward(backbone, None, tokens)
    for cfg in (AotKron(a=8, b=8, r=2), AotFC(r=4), LoRA(r=3), LoRA(r=3, fused=True),
                Adapter(r=3), BitFit(), PTv1(p=0), PTv2(p=0)):
        state = init_peft_state(cfg, model, seed=29, dtype=F64)
        logits, _ = run_forward(backbone, state, tokens)
        neutral = neutral and bool(np.array_equal(logits, vanilla))
    checks.append(("zero-initialized methods leave logits bit-identical to vanilla", neutral))

    return checks


def accounting_suite():
    """Exact parameter and byte counts for the reference shapes."""
    big = ModelConfig(vocab_size=50265, hidden=1024, layers=24, heads=16, max_seq=512)
    checks = []
    n = count_trainable(AotKron(a=256, b=200, r=20), big)
    checks.append((f"factorized-table params for a=256,b=200,r=20,d=1024,l=24 -> {n}",
                   n == 10_049_280))
    nbytes = fused_table_bytes(big, 16)
    checks.append((f"fused-table bytes for |V|=50265,d=1024,l=24,fp16 -> {nbytes}",
                   nbytes == 2_470_625_280))
    n_ptv2 = count_trainable(PTv2(p=20), big)
    checks.append((f"prefix params p=20 -> {n_ptv2}", n_ptv2 == 983_040))
    return checks


def multitask_suite(registries: int = 50, tol: float = 1e-10):
    """Batched multi-task forward vs per-example sequential forwards; row-fetch memory."""
    checks = []
    model = ModelConfig(vocab_size=64, hidden=32, layers=2, heads=2, max_seq=16, pad_id=0)
    backbone = init_backbone(model, 2, seed=3, dtype=F64)
    kinds = ["aot", "ptv1", "ptv2", "bitfit", "lora", "adapter", "head"]
    worst = 0.0
    for it in range(registries):
        kind = kinds[it % len(kinds)]
        rng = make_rng(it, "mt")
        registry = TaskRegistry(backbone=backbone)
        n_tasks = 3 + it % 2
        for t in range(n_tasks):
            classes = 2 + (t % 2)
            bundle = _random_bundle(f"task{t}", kind, model, backbone, classes,
                                    seed=1000 * it + t)
            registry.register(bundle)
        batch = []
        for j in range(2 * n_tasks):
            length = int(rng.integers(4, model.max_seq))
            toks = rng.integers(0, model.vocab_size, size=length)
            batch.append((toks, f"task{j % n_tasks}"))
        got = multitask_forward(registry, batch)
        for (toks, task_id), logits in zip(batch, got):
            bundle = registry.get(task_id)
            single = _single_task_forward(backbone, bundle, toks)
            worst = max(worst, float(np.abs(logits - single).max()))
    checks.append((f"batched multi-task == sequential forwards, max delta {worst:.2e}",
                   worst < tol))

    small_peak, big_peak = _row_fetch_peaks()
    checks.append((
        f"row fetch peak memory independent of vocab ({small_peak}B vs {big_peak}B)",
        big_peak < max(2 * small_peak, small_peak + 32_768),
    ))
    return checks


def run_all(fast: bool = False):
    """All four suites; returns (lines, ok)."""
    suites = [
        ("gradients", lambda: gradient_suite(seeds=4 if fast else 20)),
        ("identities", lambda: identity_suite(seeds=20 if fast else 100)),
        ("accounting", accounting_suite),
        ("multitask", lambda: multitask_suite(registries=10 if fast else 50)),
    ]
    lines = []
    ok = True
    for name, fn in suites:
        for detail, passed in fn():
            lines.append(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
            ok = ok and passed
    return lines, ok


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _random_layer(rng, d: int) -> LayerWeights:
    z = lambda: np.zeros(d)
    return LayerWeights(
        w_q=rng.standard_normal((d, d)) * 0.2, w_k=rng.standard_normal((d, d)) * 0.2,
        w_v=rng.standard_normal((d, d)) * 0.2, w_o=rng.standard_normal((d, d)) * 0.2,
        b_q=rng.standard_normal(d) * 0.1, b_k=rng.standard_normal(d) * 0.1,
        b_v=rng.standard_normal(d) * 0.1, b_o=z(),
        w_ff1=np.zeros((d, 4 * d)), b_ff1=np.zeros(4 * d),
        w_ff2=np.zeros((4 * d, d)), b_ff2=z(),
        ln1_gamma=np.ones(d), ln1_beta=z(), ln2_gamma=np.ones(d), ln2_beta=z(),
    )


def _reparam_arrays(state):
    from .peft import peft_named_params

    return list(peft_named_params(state).items())


def _random_bundle(task_id: str, kind: str, model: ModelConfig, backbone: Backbone,
                   classes: int, seed: int) -> TaskBundle:
    rng = make_rng(seed, "bundle")
    head_w = rng.standard_normal((model.hidden, classes)) * 0.1
    head_b = rng.standard_normal(classes) * 0.1
    state = None
    if kind == "aot":
        tables = [rng.standard_normal((model.vocab_size, model.hidden)) * 0.05
                  for _ in range(model.layers)]
        state = FusedAotState(BiasTable(tables=tables))
    elif kind == "ptv1":
        state = init_peft_state(PTv1(p=4), model, seed, dtype=F64)
    elif kind == "ptv2":
        state = init_peft_state(PTv2(p=4), model, seed, dtype=F64)
    elif kind == "bitfit":
        state = init_peft_state(BitFit(), model, seed, dtype=F64)
        for sites in state.deltas:
            for s in sites:
                sites[s] += rng.standard_normal(sites[s].shape) * 0.05
    elif kind == "lora":
        state = init_peft_state(LoRA(r=3), model, seed, dtype=F64)
        for layer in state.b:
            for s in layer:
                layer[s] += rng.standard_normal(layer[s].shape) * 0.05
    elif kind == "adapter":
        state = init_peft_state(Adapter(r=3), model, seed, dtype=F64)
        for layer in state.w_up:
            for s in layer:
                layer[s] += rng.standard_normal(layer[s].shape) * 0.05
    method = kind
    return TaskBundle(task_id=task_id, method=method, head_w=head_w, head_b=head_b, state=state)


def _single_task_forward(backbone: Backbone, bundle: TaskBundle, tokens):
    base = Backbone(config=backbone.config, embed_weights=backbone.embed_weights,
                    layers=backbone.layers, head_w=bundle.head_w, head_b=bundle.head_b)
    return forward(tokens, base, bundle.state)


def _row_fetch_peaks() -> tuple[int, int]:
    """tracemalloc peaks of read_rows on a small-vocab vs huge-vocab table."""
    d, layers, n = 8, 2, 16
    peaks = []
    with tempfile.TemporaryDirectory() as tmp:
        for vocab in (256, 50265):
            rng = make_rng(vocab, "mem")
            tables = [rng.standard_normal((vocab, d)).astype(np.float32)
                      for _ in range(layers)]
            path = Path(tmp) / f"v{vocab}.aotp"
            write_table(BiasTable(tables=tables), path, dtype_bits=32)
            tokens = rng.integers(0, vocab, size=n)
            read_rows(path, 0, tokens)  # warm any lazy imports
            tracemalloc.start()
            read_rows(path, 0, tokens)
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            peaks.append(peak)
    return peaks[0], peaks[1]
