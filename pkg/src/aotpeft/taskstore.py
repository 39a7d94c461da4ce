"""Row-addressable fused-table files and the multi-task serving registry.

File layout (little-endian):
    bytes 0..3    magic "AOTP"
    bytes 4..7    version u32 = 1
    bytes 8..11   vocab u32
    bytes 12..15  hidden u32
    bytes 16..19  layers u32
    byte  20      dtype u8 (0 = float32, 1 = float16)
    bytes 21..31  reserved (zero)
    payload       layer-major, row-major values

Row (layer, token) starts at 32 + ((layer*vocab + token) * hidden) * itemsize,
so a fetch reads exactly the requested rows without loading the table.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BatchCompositionError, ConfigError, FormatError, InputError
from .numerics import Tensor
from .peft import (
    AdapterState,
    BiasTable,
    BitFitState,
    FusedAotState,
    LoRAState,
    PTv1State,
    PTv2State,
    PeftState,
)
from .transformer import Backbone

MAGIC = b"AOTP"
VERSION = 1
HEADER_SIZE = 32
_DTYPE_CODE = {32: 0, 16: 1}
_DTYPE_OF_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f2")}


def write_table(table: BiasTable, path, dtype_bits: int = 32) -> None:
    """Serialize a fused bias table; float16 uses round-to-nearest-even."""
    if dtype_bits not in _DTYPE_CODE:
        raise ConfigError(f"dtype must be 16 or 32 bits, got {dtype_bits}")
    np_dtype = _DTYPE_OF_CODE[_DTYPE_CODE[dtype_bits]]
    vocab, hidden = table.tables[0].shape
    header = MAGIC + struct.pack(
        "<IIIIB", VERSION, vocab, hidden, table.layers, _DTYPE_CODE[dtype_bits]
    )
    header = header.ljust(HEADER_SIZE, b"\x00")
    with open(path, "wb") as f:
        f.write(header)
        for layer_table in table.tables:
            f.write(np.ascontiguousarray(layer_table, dtype=np_dtype).tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as f:
        raw = f.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a fused-table file")
    version, vocab, hidden, layers, dtype_code = struct.unpack("<IIIIB", raw[4:21])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype_code not in _DTYPE_OF_CODE:
        raise FormatError(f"{path}: unknown dtype code {dtype_code}")
    dtype = _DTYPE_OF_CODE[dtype_code]
    expected = HEADER_SIZE + vocab * hidden * layers * dtype.itemsize
    actual = Path(path).stat().st_size
    if actual != expected:
        raise FormatError(f"{path}: size {actual} != expected {expected}")
    return {"vocab": vocab, "hidden": hidden, "layers": layers,
            "dtype": dtype, "dtype_bits": 32 if dtype_code == 0 else 16}


def read_rows(path, layer: int, tokens) -> Tensor:
    """Fetch the given tokens' rows of one layer; reads O(len(tokens) * hidden) bytes."""
    hdr = read_header(path)
    if not 0 <= layer < hdr["layers"]:
        raise InputError(f"layer {layer} out of range [0, {hdr['layers']})")
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= hdr["vocab"]):
        raise InputError("token id out of table range")
    d = hdr["hidden"]
    itemsize = hdr["dtype"].itemsize
    row_bytes = d * itemsize
    out = np.empty((ids.size, d), dtype=hdr["dtype"])
    with open(path, "rb") as f:
        for j, tok in enumerate(ids):
            f.seek(HEADER_SIZE + (layer * hdr["vocab"] + int(tok)) * row_bytes)
            buf = f.read(row_bytes)
            if len(buf) != row_bytes:
                raise FormatError(f"{path}: truncated at layer {layer}, token {tok}")
            out[j] = np.frombuffer(buf, dtype=hdr["dtype"])
    return out


def load_table(path) -> BiasTable:
    """Read an entire fused-table file into memory."""
    hdr = read_header(path)
    count = hdr["vocab"] * hdr["hidden"]
    tables = []
    with open(path, "rb") as f:
        f.seek(HEADER_SIZE)
        for _ in range(hdr["layers"]):
            buf = f.read(count * hdr["dtype"].itemsize)
            tables.append(np.frombuffer(buf, dtype=hdr["dtype"]).reshape(
                hdr["vocab"], hdr["hidden"]).copy())
    return BiasTable(tables=tables, dtype_bits=hdr["dtype_bits"])


# ---------------------------------------------------------------------------
# Task bundles and the serving registry
# ---------------------------------------------------------------------------


@dataclass
class TaskBundle:
    task_id: str
    method: str  # aot | ptv1 | ptv2 | bitfit | lora | adapter | head
    head_w: Tensor
    head_b: Tensor
    state: PeftState = None  # FusedAotState for aot; baseline states otherwise

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[1]

    def mode_key(self) -> tuple:
        """Structural compatibility key; batches may only mix bundles with equal keys."""
        if self.method == "aot":
            return ("aot",)
        if self.method == "ptv1":
            return ("ptv1", self.state.cfg.p)
        if self.method == "ptv2":
            return ("ptv2", self.state.cfg.p)
        if self.method == "bitfit":
            return ("bitfit",)
        if self.method == "lora":
            if self.state.cfg.fused:
                raise BatchCompositionError(
                    "fused low-rank deltas cannot be batched across tasks; register unfused"
                )
            return ("lora", self.state.cfg.r)
        if self.method == "adapter":
            return ("adapter", self.state.cfg.r)
        if self.method == "head":
            return ("head",)
        raise BatchCompositionError(f"method {self.method!r} cannot serve multi-task batches")


@dataclass
class TaskRegistry:
    backbone: Backbone
    bundles: dict[str, TaskBundle] = field(default_factory=dict)

    def register(self, bundle: TaskBundle) -> None:
        if bundle.task_id in self.bundles:
            raise InputError(f"task id {bundle.task_id!r} already registered")
        if bundle.head_w.shape[0] != self.backbone.config.hidden:
            raise ConfigError(
                f"bundle head expects hidden {bundle.head_w.shape[0]}, "
                f"backbone has {self.backbone.config.hidden}"
            )
        self.bundles[bundle.task_id] = bundle

    def get(self, task_id: str) -> TaskBundle:
        if task_id not in self.bundles:
            raise InputError(f"unknown task id {task_id!r}")
        return self.bundles[task_id]


def state_for_bundle(bundle: TaskBundle) -> PeftState:
    return bundle.state


def multitask_forward(registry: TaskRegistry, batch) -> list[Tensor]:
    """One batched backbone pass over (tokens, task_id) pairs from mixed tasks.

    Per-example biases, prefixes, deltas and heads are gathered by task id.
    Sequences are right-padded to the longest in the batch. Output order matches
    input order; each entry is that example's logits under its task's head.
    """
    if not batch:
        return []
    bundles = [registry.get(task_id) for _, task_id in batch]
    keys = {b.mode_key() for b in bundles}
    if len(keys) > 1:
        raise BatchCompositionError(f"incompatible bundles in one batch: {sorted(keys)}")
    mode = keys.pop()

    cfg = registry.backbone.config
    seqs = [np.asarray(tokens, dtype=np.int64) for tokens, _ in batch]
    n_max = max(s.size for s in seqs)
    bsz = len(seqs)
    tokens = np.full((bsz, n_max), cfg.pad_id, dtype=np.int64)
    pad = np.ones((bsz, n_max), dtype=bool)
    for j, s in enumerate(seqs):
        tokens[j, : s.size] = s
        pad[j, : s.size] = False

    state = _stack_states(mode, bundles, registry.backbone, tokens)
    logits_shared, _ = _run_forward_multi(registry.backbone, mode, state, tokens, pad)

    out = []
    for j, b in enumerate(bundles):
        out.append(logits_shared[j] @ b.head_w + b.head_b)
    return out


def _stack_states(mode: tuple, bundles: list[TaskBundle], backbone: Backbone, tokens: Tensor):
    """Per-example stacked parameter arrays for the batched pass."""
    kind = mode[0]
    if kind == "head":
        return None
    if kind == "aot":
        # gather only the batch's rows from each example's own table: [B, n, d] per layer
        dt = backbone.embed_weights.dtype
        return [
            np.stack([
                np.asarray(b.state.table.tables[i][tokens[j]], dtype=dt)
                for j, b in enumerate(bundles)
            ])
            for i in range(backbone.config.layers)
        ]
    if kind == "ptv1":
        return np.stack([b.state.prompt for b in bundles])  # [B, p, d]
    if kind == "ptv2":
        l = backbone.config.layers
        pk = [np.stack([b.state.p_k[i] for b in bundles]) for i in range(l)]
        pv = [np.stack([b.state.p_v[i] for b in bundles]) for i in range(l)]
        return pk, pv
    if kind == "bitfit":
        l = backbone.config.layers
        sites = bundles[0].state.deltas[0].keys()
        return [
            {s: np.stack([b.state.deltas[i][s] for b in bundles]) for s in sites}
            for i in range(l)
        ]
    if kind == "lora":
        l = backbone.config.layers
        return [
            {s: (np.stack([b.state.a[i][s] for b in bundles]),
                 np.stack([b.state.b[i][s] for b in bundles]))
             for s in ("q", "k", "v", "o")}
            for i in range(l)
        ], bundles[0].state.cfg.scale
    if kind == "adapter":
        l = backbone.config.layers
        return [
            {slot: tuple(np.stack([getattr(b.state, f)[i][slot] for b in bundles])
                         for f in ("w_down", "b_down", "w_up", "b_up"))
             for slot in ("attn", "ffn")}
            for i in range(l)
        ]
    raise BatchCompositionError(f"unsupported batch mode {mode!r}")


def _run_forward_multi(backbone: Backbone, mode: tuple, stacked, tokens: Tensor, pad: Tensor):
    """Batched encoder pass with per-example gathered parameters."""
    import math

    from .numerics import MASK_PENALTY, activation, layer_norm_forward
    from .transformer import LN_EPS

    cfg = backbone.config
    kind = mode[0]
    heads, d_h = cfg.heads, cfg.head_dim
    inv_sqrt_dh = 1.0 / math.sqrt(d_h)
    bsz, n = tokens.shape

    h = backbone.embed_weights[tokens]
    pool = 0
    seq_pad = pad
    if kind == "ptv1":
        p = stacked.shape[1]
        h = np.concatenate([stacked.astype(h.dtype), h], axis=1)
        pool = p
        seq_pad = np.concatenate([np.zeros((bsz, p), dtype=bool), pad], axis=1)

    prefix = mode[1] if kind == "ptv2" else 0
    pen = np.zeros(seq_pad.shape, dtype=h.dtype)
    pen[seq_pad] = MASK_PENALTY
    if prefix:
        pen = np.concatenate([np.zeros((bsz, prefix), dtype=h.dtype), pen], axis=1)
    key_penalty = pen[:, None, None, :]

    def split(x):
        b, s, d = x.shape
        return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)

    def merge(x):
        b, hh, s, dd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, s, hh * dd)

    for i, lw in enumerate(backbone.layers):
        if kind == "aot":
            h = h + stacked[i]

        def bias(site):
            base = getattr(lw, site)
            if kind == "bitfit":
                return base + stacked[i][site][:, None, :]
            return base

        x1, _ = layer_norm_forward(h, lw.ln1_gamma, bias("ln1_beta"), LN_EPS)

        def proj(x, w, site):
            y = x @ w + bias(f"b_{site}")
            if kind == "lora":
                per_layer, scale = stacked
                a_s, b_s = per_layer[i][site]
                y = y + scale * ((x @ a_s) @ b_s)  # [B,s,d]@[B,d,r]@[B,r,d], batched
            return y

        q = proj(x1, lw.w_q, "q")
        k = proj(x1, lw.w_k, "k")
        v = proj(x1, lw.w_v, "v")
        qh, kh, vh = split(q), split(k), split(v)
        if kind == "ptv2":
            pk, pv = stacked
            kh = np.concatenate([split(pk[i].astype(h.dtype)), kh], axis=2)
            vh = np.concatenate([split(pv[i].astype(h.dtype)), vh], axis=2)

        scores = (qh @ kh.transpose(0, 1, 3, 2)) * inv_sqrt_dh + key_penalty
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        probs = scores / scores.sum(axis=-1, keepdims=True)
        ctx = merge(probs @ vh)
        h = h + proj(ctx, lw.w_o, "o")

        def adapter(hh, slot):
            w_d, b_d, w_u, b_u = stacked[i][slot]
            z = (hh @ w_d) + b_d[:, None, :]
            a = activation(z, "gelu")
            return hh + (a @ w_u) + b_u[:, None, :]

        if kind == "adapter":
            h = adapter(h, "attn")

        x2, _ = layer_norm_forward(h, lw.ln2_gamma, bias("ln2_beta"), LN_EPS)
        z = x2 @ lw.w_ff1 + bias("b_ff1")
        h = h + activation(z, cfg.activation) @ lw.w_ff2 + bias("b_ff2")

        if kind == "adapter":
            h = adapter(h, "ffn")

    return h[:, pool, :], None


# ---------------------------------------------------------------------------
# Memory accounting
# ---------------------------------------------------------------------------


def memory_budget(registry: TaskRegistry, seq_len: int = 16, batch: int = 4,
                  dtype_bits: int = 16) -> dict:
    """Disk and per-request byte counts, plus the batched fused-delta comparison.

    per_request_resident_bytes is the row traffic of one request: seq_len rows
    per layer. fused_lora_batched_params is what stacking per-example fused
    attention weights would cost instead.
    """
    cfg = registry.backbone.config
    nbytes = dtype_bits // 8
    per_task = {}
    for task_id, bundle in registry.bundles.items():
        if bundle.method == "aot":
            per_task[task_id] = (
                bundle.state.table.vocab_size * bundle.state.table.hidden
                * bundle.state.table.layers * nbytes
            )
        else:
            from .peft import peft_named_params

            per_task[task_id] = sum(
                arr.size * nbytes for arr in peft_named_params(bundle.state).values()
            )
        per_task[task_id] += (bundle.head_w.size + bundle.head_b.size) * nbytes
    fused_lora_params = 4 * cfg.hidden * cfg.hidden * cfg.layers * batch
    return {
        "per_task_bytes": per_task,
        "per_request_resident_bytes": seq_len * cfg.hidden * cfg.layers * nbytes,
        "fused_lora_batched_params": fused_lora_params,
        "fused_lora_batched_bytes": fused_lora_params * nbytes,
    }


# ---------------------------------------------------------------------------
# Bundle manifests and weight blobs
# ---------------------------------------------------------------------------


def save_blob(path, arrays: dict[str, Tensor], meta: dict | None = None) -> None:
    """Named-array container used for checkpoints and bundle weights."""
    payload = dict(arrays)
    if meta is not None:
        payload["__meta__"] = np.array(json.dumps(meta))
    np.savez(path, **payload)


def load_blob(path) -> tuple[dict[str, Tensor], dict | None]:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
        meta = json.loads(str(z["__meta__"])) if "__meta__" in z.files else None
    return arrays, meta


def save_backbone(path, backbone: Backbone) -> None:
    cfg = backbone.config
    meta = {
        "model": {
            "vocab_size": cfg.vocab_size, "hidden": cfg.hidden, "layers": cfg.layers,
            "heads": cfg.heads, "ffn_mult": cfg.ffn_mult, "max_seq": cfg.max_seq,
            "activation": cfg.activation, "pad_id": cfg.pad_id,
        },
        "num_classes": backbone.num_classes,
    }
    save_blob(path, backbone.named_params(), meta)


def load_backbone(path) -> Backbone:
    from .transformer import LayerWeights, ModelConfig

    arrays, meta = load_blob(path)
    if meta is None or "model" not in meta:
        raise FormatError(f"{path}: missing backbone metadata")
    cfg = ModelConfig(**meta["model"])
    layers = []
    for i in range(cfg.layers):
        fields = {name: arrays[f"layer.{i}.{name}"] for name in (
            "w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o",
            "w_ff1", "b_ff1", "w_ff2", "b_ff2",
            "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
        )}
        layers.append(LayerWeights(**fields))
    return Backbone(config=cfg, embed_weights=arrays["embed"], layers=layers,
                    head_w=arrays["head.w"], head_b=arrays["head.b"])


def write_manifest(path, task_id: str, method: str, table_path: str | None,
                   head_path: str, num_classes: int, model_dims: dict) -> None:
    manifest = {
        "task_id": task_id,
        "method": method,
        "table_path": table_path,
        "head_path": head_path,
        "num_classes": num_classes,
        "model_dims": model_dims,
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_bundle(manifest_path, base_dir=None) -> TaskBundle:
    """Materialize a TaskBundle from a manifest and its referenced blobs."""
    from . import peft as m

    with open(manifest_path) as f:
        manifest = json.load(f)
    base = Path(base_dir) if base_dir else Path(manifest_path).parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    blob, _ = load_blob(resolve(manifest["head_path"]))
    head_w, head_b = blob["head.w"], blob["head.b"]
    method = manifest["method"]
    state: PeftState = None
    if method == "aot":
        state = FusedAotState(table=load_table(resolve(manifest["table_path"])))
    elif method == "ptv1":
        state = PTv1State(m.PTv1(p=blob["ptv1.prompt"].shape[0]), prompt=blob["ptv1.prompt"])
    elif method == "ptv2":
        layers = max(int(k.split(".")[1]) for k in blob if k.startswith("ptv2.")) + 1
        p_k = [blob[f"ptv2.{i}.p_k"] for i in range(layers)]
        p_v = [blob[f"ptv2.{i}.p_v"] for i in range(layers)]
        state = PTv2State(m.PTv2(p=p_k[0].shape[0]), p_k=p_k, p_v=p_v)
    elif method == "bitfit":
        layers = max(int(k.split(".")[1]) for k in blob if k.startswith("bitfit.")) + 1
        sites = sorted({k.split(".", 2)[2] for k in blob if k.startswith("bitfit.")})
        state = BitFitState(m.BitFit(), deltas=[
            {s: blob[f"bitfit.{i}.{s}"] for s in sites} for i in range(layers)
        ])
    elif method == "lora":
        layers = max(int(k.split(".")[1]) for k in blob if k.startswith("lora.")) + 1
        a = [{s: blob[f"lora.{i}.{s}.a"] for s in ("q", "k", "v", "o")} for i in range(layers)]
        b = [{s: blob[f"lora.{i}.{s}.b"] for s in ("q", "k", "v", "o")} for i in range(layers)]
        state = LoRAState(m.LoRA(r=a[0]["q"].shape[1]), a=a, b=b)
    elif method == "adapter":
        layers = max(int(k.split(".")[1]) for k in blob if k.startswith("adapter.")) + 1
        slots = ("attn", "ffn")
        state = AdapterState(
            m.Adapter(r=blob["adapter.0.attn.w_down"].shape[1]),
            w_down=[{s: blob[f"adapter.{i}.{s}.w_down"] for s in slots} for i in range(layers)],
            b_down=[{s: blob[f"adapter.{i}.{s}.b_down"] for s in slots} for i in range(layers)],
            w_up=[{s: blob[f"adapter.{i}.{s}.w_up"] for s in slots} for i in range(layers)],
            b_up=[{s: blob[f"adapter.{i}.{s}.b_up"] for s in slots} for i in range(layers)],
        )
    elif method != "head":
        raise ConfigError(f"manifest method {method!r} not servable")
    return TaskBundle(task_id=manifest["task_id"], method=method,
                      head_w=head_w, head_b=head_b, state=state)
