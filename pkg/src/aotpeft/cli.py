"""Command-line entry points: train, grid, fuse, bench, inspect,
eval-multitask, selftest.

Errors are reported as one JSON object per line on stderr with a stable `code`
field; exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .errors import AotPeftError, ConfigError, InputError
from .harness import PRESETS, BenchConfig, measure, rank_all_layers
from .peft import FCState, KronState, count_trainable, init_peft_state, materialize_table, peft_named_params
from .taskstore import (
    TaskRegistry,
    load_blob,
    load_backbone,
    load_bundle,
    load_table,
    multitask_forward,
    save_backbone,
    save_blob,
    write_table,
)
from .training import TrainConfig, GridSpace, config_for_method, grid_search, make_task, train_task
from .transformer import ModelConfig, init_backbone


def _diag(code: str, message: str) -> None:
    print(json.dumps({"code": code, "message": message}), file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _diag("usage", message)
        self.print_usage(sys.stderr)
        raise SystemExit(2)


def _build_parser() -> _Parser:
    parser = _Parser(prog="aotpeft", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one method on a synthetic task")
    p.add_argument("--method", required=True,
                   choices=["aot-kron", "aot-fc", "ptv1", "ptv2", "bitfit", "lora",
                            "adapter", "full"])
    p.add_argument("--task", required=True, choices=["token_identity", "constant_separable"])
    p.add_argument("--config", help="JSON file with learning_rate/batch_size/max_epochs/patience")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--rank", type=int, default=8, help="rank r or prefix length p")
    p.add_argument("--num-classes", type=int, default=2)
    p.add_argument("--model-preset", default="small", choices=sorted(PRESETS))
    p.add_argument("--out", required=True)

    p = sub.add_parser("grid", help="exhaustive hyperparameter sweep")
    p.add_argument("--space", required=True,
                   help="JSON file with learning_rates/batch_sizes/ranks lists")
    p.add_argument("--method", required=True)
    p.add_argument("--task", required=True, choices=["token_identity", "constant_separable"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=2)
    p.add_argument("--model-preset", default="small", choices=sorted(PRESETS))
    p.add_argument("--max-epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fuse", help="materialize a trained checkpoint into a bias-table file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", type=int, default=32, choices=[16, 32])

    p = sub.add_parser("bench", help="latency benchmark against the vanilla model")
    p.add_argument("--preset", default="large-shaped", choices=sorted(PRESETS))
    p.add_argument("--batch-sizes", type=int, nargs="+", default=[1, 16, 64])
    p.add_argument("--seq-lens", type=int, nargs="+", default=[64, 128, 384])
    p.add_argument("--methods", nargs="+", default=["vanilla", "aot-fc-fused", "ptv2-20"])
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-json", default="report.json")
    p.add_argument("--out-csv", default="report.csv")

    p = sub.add_parser("inspect", help="rank a table's tokens by bias-row norm")
    p.add_argument("--table", required=True)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--top-k", type=int, default=10)

    p = sub.add_parser("eval-multitask", help="batched inference over mixed task bundles")
    p.add_argument("--backbone", required=True)
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--input", required=True, help="JSON lines of {tokens, task_id}")
    p.add_argument("--out", default=None, help="write logits JSON here instead of stdout")

    p = sub.add_parser("selftest", help="run the gradient/identity/accounting/multitask suites")
    p.add_argument("--fast", action="store_true", help="reduced seed counts")
    return parser


def _load_train_config(args) -> TrainConfig:
    fields = {"learning_rate": 0.01, "batch_size": 32, "max_epochs": 20, "patience": 5}
    if args.config:
        with open(args.config) as f:
            fields.update(json.load(f))
    return TrainConfig(seed=args.seed, **fields)


def _task_for(args, model: ModelConfig):
    return make_task(args.task, seed=args.task_seed, num_classes=args.num_classes,
                     seq_len=min(16, model.max_seq), vocab_size=model.vocab_size)


def _cmd_train(args) -> int:
    model = PRESETS[args.model_preset]
    task = _task_for(args, model)
    backbone = init_backbone(model, task.num_classes, seed=args.seed)
    peft_cfg = config_for_method(args.method, args.rank, model)
    cfg = _load_train_config(args)

    t0 = time.perf_counter()
    state, best, log = train_task(backbone, peft_cfg, task, cfg)
    wall_ms = (time.perf_counter() - t0) * 1e3

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # wall time goes to diagnostics so the epoch log is byte-reproducible per seed
    with open(out / "epochs.jsonl", "w") as f:
        for entry in log:
            f.write(json.dumps({k: entry[k] for k in ("epoch", "train_loss", "dev_metric")}))
            f.write("\n")
    for entry in log:
        _diag("timing", f"epoch {entry['epoch']}: {entry['wall_ms']:.1f} ms")

    arrays = dict(peft_named_params(state))
    arrays["head.w"] = backbone.head_w
    arrays["head.b"] = backbone.head_b
    meta = {
        "method": args.method,
        "rank": args.rank,
        "seed": args.seed,
        "model": {
            "vocab_size": model.vocab_size, "hidden": model.hidden, "layers": model.layers,
            "heads": model.heads, "ffn_mult": model.ffn_mult, "max_seq": model.max_seq,
            "activation": model.activation, "pad_id": model.pad_id,
        },
        "num_classes": task.num_classes,
    }
    save_blob(out / "checkpoint.npz", arrays, meta)
    save_backbone(out / "backbone.npz", backbone)
    with open(out / "result.json", "w") as f:
        json.dump({
            "method": args.method,
            "task": task.name,
            "best_dev_metric": best,
            "epochs": len(log),
            "trainable_params": count_trainable(peft_cfg, model),
            "wall_ms": wall_ms,
        }, f, indent=2)
        f.write("\n")
    print(f"best dev metric {best:.4f} after {len(log)} epochs -> {out}")
    return 0


def _cmd_grid(args) -> int:
    model = PRESETS[args.model_preset]
    task = _task_for(args, model)
    backbone = init_backbone(model, task.num_classes, seed=args.seed)
    with open(args.space) as f:
        raw = json.load(f)
    space = GridSpace(
        learning_rates=tuple(raw["learning_rates"]),
        batch_sizes=tuple(raw["batch_sizes"]),
        ranks=tuple(raw.get("ranks", [0])),
    )
    ranked, best = grid_search(space, backbone, args.method, task,
                               max_epochs=args.max_epochs, patience=args.patience,
                               seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cells.jsonl", "w") as f:
        for r in ranked:
            f.write(json.dumps({k: r[k] for k in
                                ("lr", "batch_size", "rank", "dev_metric",
                                 "trainable_params", "status", "wall_ms")}))
            f.write("\n")
    with open(out / "best.json", "w") as f:
        json.dump({k: best[k] for k in ("lr", "batch_size", "rank", "dev_metric",
                                        "trainable_params")}, f, indent=2)
        f.write("\n")
    print(f"best cell: lr={best['lr']} batch={best['batch_size']} rank={best['rank']} "
          f"dev={best['dev_metric']:.4f}")
    return 0


def _rebuild_state(arrays: dict, meta: dict, model: ModelConfig):
    method, rank = meta["method"], meta["rank"]
    cfg = config_for_method(method, rank, model)
    state = init_peft_state(cfg, model, meta["seed"])
    if method == "aot-kron":
        for i in range(model.layers):
            state.w_l[i] = arrays[f"aot_kron.{i}.w_l"]
            state.w_m[i] = arrays[f"aot_kron.{i}.w_m"]
            state.w_r[i] = arrays[f"aot_kron.{i}.w_r"]
    elif method == "aot-fc":
        for i in range(model.layers):
            state.w1[i] = arrays[f"aot_fc.{i}.w1"]
            state.b1[i] = arrays[f"aot_fc.{i}.b1"]
            state.w2[i] = arrays[f"aot_fc.{i}.w2"]
            state.b2[i] = arrays[f"aot_fc.{i}.b2"]
    else:
        raise ConfigError(f"checkpoint method {method!r} has no table to fuse")
    return state


def _cmd_fuse(args) -> int:
    arrays, meta = load_blob(args.checkpoint)
    if meta is None:
        raise InputError(f"{args.checkpoint}: missing training metadata")
    model = ModelConfig(**meta["model"])
    state = _rebuild_state(arrays, meta, model)
    embed_w = None
    if isinstance(state, FCState):
        backbone = init_backbone(model, meta["num_classes"], seed=meta["seed"])
        embed_w = backbone.embed_weights
    table = materialize_table(state, model, embed_w, dtype_bits=args.dtype)
    write_table(table, args.out, dtype_bits=args.dtype)
    print(f"wrote {model.layers} x {model.vocab_size} x {model.hidden} table ({args.dtype}-bit) "
          f"-> {args.out}")
    return 0


def _cmd_bench(args) -> int:
    cfg = BenchConfig(
        batch_sizes=tuple(args.batch_sizes),
        seq_lens=tuple(args.seq_lens),
        methods=tuple(args.methods),
        preset=args.preset,
        warmup=args.warmup,
        seed=args.seed,
    )
    report = measure(cfg)
    with open(args.out_json, "w") as f:
        json.dump(report.to_json_dict(), f, indent=2)
        f.write("\n")
    with open(args.out_csv, "w") as f:
        f.write("\n".join(report.csv_lines()) + "\n")
    for c in report.cells:
        print(f"{c['method']:>18s} batch={c['batch']:<3d} seqlen={c['seqlen']:<4d} "
              f"mean={c['mean_ms']:.3f} ms normalized={c['normalized']:.3f}")
    return 0


def _cmd_inspect(args) -> int:
    table = load_table(args.table)
    if args.layer is not None:
        ranking = {args.layer: [[tok, norm] for tok, norm in
                                rank_all_layers(table, args.top_k).layers[args.layer]]}
    else:
        ranking = {layer: [[tok, norm] for tok, norm in entries]
                   for layer, entries in rank_all_layers(table, args.top_k).layers.items()}
    print(json.dumps({"top_k": args.top_k, "layers": ranking}, indent=2))
    return 0


def _cmd_eval_multitask(args) -> int:
    backbone = load_backbone(args.backbone)
    registry = TaskRegistry(backbone=backbone)
    for manifest in args.manifest:
        registry.register(load_bundle(manifest))
    batch = []
    with open(args.input) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            batch.append((np.asarray(obj["tokens"], dtype=np.int64), obj["task_id"]))
    logits = multitask_forward(registry, batch)
    payload = {"results": [
        {"task_id": task_id, "logits": [float(x) for x in l]}
        for (_tokens, task_id), l in zip(batch, logits)
    ]}
    text = json.dumps(payload, indent=2)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_all

    lines, ok = run_all(fast=args.fast)
    for line in lines:
        print(line)
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "train": _cmd_train,
        "grid": _cmd_grid,
        "fuse": _cmd_fuse,
        "bench": _cmd_bench,
        "inspect": _cmd_inspect,
        "eval-multitask": _cmd_eval_multitask,
        "selftest": _cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except AotPeftError as exc:
        _diag(exc.code, str(exc))
        return 1
    except OSError as exc:
        _diag("io", str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
