"""Batched forward and explicit backward through the encoder with any
fine-tuning state attached.

Gradients are accumulated into a flat name -> GradPair map; frozen parameters
carry no grad buffer and are skipped. The backward pass mirrors the forward
cache structure layer by layer (no tape).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, InputError
from .numerics import (
    GradPair,
    MASK_PENALTY,
    Tensor,
    activation,
    activation_backward,
    layer_norm_backward,
    layer_norm_forward,
)
from .peft import (
    ADAPTER_SLOTS,
    DROPOUT_KEEP,
    AdapterState,
    BitFitState,
    FCState,
    FullState,
    FusedAotState,
    KronState,
    LoRAState,
    PTv1State,
    PTv2State,
    PeftState,
    aot_rows_for_layer,
    peft_named_params,
)
from .transformer import LN_EPS, Backbone

LORA_SITES = ("q", "k", "v", "o")
_BIAS_OF_SITE = {"q": "b_q", "k": "b_k", "v": "b_v", "o": "b_o"}
_WEIGHT_OF_SITE = {"q": "w_q", "k": "w_k", "v": "w_v", "o": "w_o"}


def build_params(backbone: Backbone, state: PeftState) -> dict[str, GradPair]:
    """Name -> GradPair over backbone and method parameters.

    The head is always trainable; backbone weights only under full fine-tuning;
    method-owned parameters always.
    """
    full = isinstance(state, FullState)
    params: dict[str, GradPair] = {}
    for name, arr in backbone.named_params().items():
        trainable = full or name in ("head.w", "head.b")
        params[name] = GradPair(arr, np.zeros_like(arr) if trainable else None)
    for name, arr in peft_named_params(state).items():
        params[name] = GradPair(arr, np.zeros_like(arr))
    return params


def zero_grads(params: dict[str, GradPair]) -> None:
    for pair in params.values():
        if pair.grad is not None:
            pair.grad.fill(0.0)


def trainable_items(params: dict[str, GradPair]):
    return [(name, pair) for name, pair in params.items() if pair.grad is not None]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _acc(params, name: str, grad: Tensor) -> None:
    pair = params.get(name)
    if pair is not None and pair.grad is not None:
        pair.grad += grad


def _mm_acc(x: Tensor, g: Tensor) -> Tensor:
    """sum over leading axes of x[..., i] * g[..., j] -> [i, j], via one gemm."""
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def _bias_eff(lw, state: PeftState, layer: int, site: str) -> Tensor:
    if isinstance(state, BitFitState):
        return getattr(lw, site) + state.deltas[layer][site]
    return getattr(lw, site)


def _acc_bias(params, state: PeftState, layer: int, site: str, grad: Tensor) -> None:
    _acc(params, f"layer.{layer}.{site}", grad)
    if isinstance(state, BitFitState):
        _acc(params, f"bitfit.{layer}.{site}", grad)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def run_forward(
    backbone: Backbone,
    state: PeftState,
    tokens,
    pad_mask=None,
    train: bool = False,
    rng: np.random.Generator | None = None,
    need_cache: bool = False,
):
    """Forward pass over a [batch, seq] token matrix; returns (logits, cache).

    pad_mask marks padding positions with True; they are excluded as attention
    keys. In train mode the bias-table methods apply dropout drawn from rng.
    """
    cfg = backbone.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InputError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise InputError("token id out of vocabulary range")
    if train and rng is None and isinstance(state, (KronState, FCState)):
        raise ConfigError("train mode with a bias-table method requires an rng for dropout")

    bsz, n = tokens.shape
    heads, d_h = cfg.heads, cfg.head_dim
    inv_sqrt_dh = 1.0 / math.sqrt(d_h)
    embed_w = backbone.embed_weights

    h = embed_w[tokens]
    pool = 0
    seq_pad = None if pad_mask is None else np.asarray(pad_mask, dtype=bool)

    if isinstance(state, PTv1State) and state.cfg.p > 0:
        p = state.cfg.p
        prompt = np.broadcast_to(state.prompt, (bsz, p, h.shape[2]))
        h = np.concatenate([prompt, h], axis=1)
        pool = p
        if seq_pad is not None:
            seq_pad = np.concatenate([np.zeros((bsz, p), dtype=bool), seq_pad], axis=1)

    cache = {
        "tokens": tokens,
        "pool": pool,
        "layers": [],
        "train": train,
    } if need_cache else None

    aot_like = isinstance(state, (KronState, FCState, FusedAotState))
    ptv2_p = state.cfg.p if isinstance(state, PTv2State) else 0
    key_penalty = None
    if seq_pad is not None:
        pen = np.zeros(seq_pad.shape, dtype=h.dtype)
        pen[seq_pad] = MASK_PENALTY
        if ptv2_p:
            pen = np.concatenate([np.zeros((bsz, ptv2_p), dtype=h.dtype), pen], axis=1)
        key_penalty = pen[:, None, None, :]

    for i, lw in enumerate(backbone.layers):
        lc = {} if need_cache else None

        if aot_like:
            rows, aot_cache = _aot_forward(state, i, tokens, embed_w, train, rng, h.dtype)
            h = h + rows
            if need_cache:
                lc["aot"] = aot_cache

        b_q = _bias_eff(lw, state, i, "b_q")
        b_k = _bias_eff(lw, state, i, "b_k")
        b_v = _bias_eff(lw, state, i, "b_v")
        b_o = _bias_eff(lw, state, i, "b_o")
        ln1_beta = _bias_eff(lw, state, i, "ln1_beta")
        ln2_beta = _bias_eff(lw, state, i, "ln2_beta")

        x1, ln1c = layer_norm_forward(h, lw.ln1_gamma, ln1_beta, LN_EPS)
        q, qc = _proj_forward(x1, lw.w_q, b_q, state, i, "q")
        k, kc = _proj_forward(x1, lw.w_k, b_k, state, i, "k")
        v, vc = _proj_forward(x1, lw.w_v, b_v, state, i, "v")

        qh = _split_heads(q, heads)
        kh = _split_heads(k, heads)
        vh = _split_heads(v, heads)
        if ptv2_p:
            pk = _split_heads(state.p_k[i][None], heads)  # [1, h, p, dh]
            pv = _split_heads(state.p_v[i][None], heads)
            kh = np.concatenate([np.broadcast_to(pk, (bsz,) + pk.shape[1:]), kh], axis=2)
            vh = np.concatenate([np.broadcast_to(pv, (bsz,) + pv.shape[1:]), vh], axis=2)

        scores = (qh @ kh.transpose(0, 1, 3, 2)) * inv_sqrt_dh
        if key_penalty is not None:
            scores = scores + key_penalty
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        probs = scores / scores.sum(axis=-1, keepdims=True)
        ctx = probs @ vh
        ctx_m = _merge_heads(ctx)
        attn_out, oc = _proj_forward(ctx_m, lw.w_o, b_o, state, i, "o")

        if need_cache:
            lc.update(ln1=ln1c, x1=x1, qh=qh, kh=kh, vh=vh, probs=probs, ctx_m=ctx_m,
                      proj={"q": qc, "k": kc, "v": vc, "o": oc})

        h = h + attn_out

        if isinstance(state, AdapterState):
            h, adc = _adapter_forward(h, state, i, "attn")
            if need_cache:
                lc["adapter_attn"] = adc

        x2, ln2c = layer_norm_forward(h, lw.ln2_gamma, ln2_beta, LN_EPS)
        z = x2 @ lw.w_ff1 + _bias_eff(lw, state, i, "b_ff1")
        af = activation(z, cfg.activation)
        ffn = af @ lw.w_ff2 + _bias_eff(lw, state, i, "b_ff2")
        if need_cache:
            lc.update(ln2=ln2c, x2=x2, z=z, af=af)
        h = h + ffn

        if isinstance(state, AdapterState):
            h, adc = _adapter_forward(h, state, i, "ffn")
            if need_cache:
                lc["adapter_ffn"] = adc

        if need_cache:
            cache["layers"].append(lc)

    pooled = h[:, pool, :]
    logits = pooled @ backbone.head_w + backbone.head_b
    if need_cache:
        cache["pooled"] = pooled
    return logits, cache


def _proj_forward(x: Tensor, w: Tensor, b: Tensor, state: PeftState, layer: int, site: str):
    """One attention projection, with the low-rank delta when LoRA is active."""
    if isinstance(state, LoRAState):
        a_m, b_m = state.a[layer][site], state.b[layer][site]
        scale = state.cfg.scale
        if state.cfg.fused:
            w_eff = w + scale * (a_m @ b_m)
            return x @ w_eff + b, {"w_eff": w_eff}
        xa = x @ a_m
        return x @ w + b + scale * (xa @ b_m), {"xa": xa}
    return x @ w + b, None


def _adapter_forward(h: Tensor, state: AdapterState, layer: int, slot: str):
    z = h @ state.w_down[layer][slot] + state.b_down[layer][slot]
    a = activation(z, state.cfg.activation)
    out = h + a @ state.w_up[layer][slot] + state.b_up[layer][slot]
    return out, {"h_in": h, "z": z, "a": a}


def _aot_forward(state, layer: int, tokens: Tensor, embed_w: Tensor, train: bool,
                 rng, dtype):
    """Per-position bias rows for one layer plus the cache backward needs."""
    bsz, n = tokens.shape
    if isinstance(state, FusedAotState):
        rows = state.table.tables[layer][tokens]
        if rows.dtype != dtype:
            rows = rows.astype(dtype)
        return rows, {"kind": "fused"}

    if isinstance(state, FCState) and train:
        # dropout acts on the embeddings feeding the FC net, per occurrence
        keep = DROPOUT_KEEP
        e = embed_w[tokens]
        mask = (rng.random(e.shape) < keep).astype(dtype)
        e_drop = e * mask / keep
        z = e_drop @ state.w1[layer] + state.b1[layer]
        a = activation(z, state.cfg.activation)
        rows = a @ state.w2[layer] + state.b2[layer]
        return rows, {"kind": "fc_train", "e_drop": e_drop, "z": z, "a": a}

    uniq, inv = np.unique(tokens.reshape(-1), return_inverse=True)
    rows_u = aot_rows_for_layer(state, layer, uniq, embed_w)
    rows = rows_u[inv].reshape(bsz, n, -1)
    ac = {"kind": "kron" if isinstance(state, KronState) else "fc",
          "uniq": uniq, "inv": inv}
    if isinstance(state, KronState) and train:
        # dropout acts on the looked-up bias rows, per occurrence
        keep = DROPOUT_KEEP
        mask = (rng.random(rows.shape) < keep).astype(dtype)
        rows = rows * mask / keep
        ac["mask"] = mask
    return rows, ac


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def run_backward(backbone: Backbone, state: PeftState, cache: dict, dlogits: Tensor,
                 params: dict[str, GradPair]) -> None:
    """Accumulate gradients of a scalar loss (given dlogits) into params."""
    cfg = backbone.config
    tokens = cache["tokens"]
    pool = cache["pool"]
    heads, d_h = cfg.heads, cfg.head_dim
    inv_sqrt_dh = 1.0 / math.sqrt(d_h)
    bsz = tokens.shape[0]

    pooled = cache["pooled"]
    _acc(params, "head.w", pooled.T @ dlogits)
    _acc(params, "head.b", dlogits.sum(axis=0))
    dpooled = dlogits @ backbone.head_w.T

    seq = cache["layers"][0]["x1"].shape[1] if cache["layers"] else tokens.shape[1]
    dh = np.zeros((bsz, seq, cfg.hidden), dtype=dpooled.dtype)
    dh[:, pool, :] = dpooled

    for i in reversed(range(cfg.layers)):
        lw = backbone.layers[i]
        lc = cache["layers"][i]

        if isinstance(state, AdapterState):
            dh = _adapter_backward(dh, state, i, "ffn", lc["adapter_ffn"], params)

        # FFN sublayer: h = h3 + act(LN(h3) @ w_ff1 + b) @ w_ff2 + b
        df = dh
        _acc(params, f"layer.{i}.w_ff2", _mm_acc(lc["af"], df))
        _acc_bias(params, state, i, "b_ff2", df.sum(axis=(0, 1)))
        daf = df @ lw.w_ff2.T
        dz = activation_backward(daf, lc["z"], cfg.activation)
        _acc(params, f"layer.{i}.w_ff1", _mm_acc(lc["x2"], dz))
        _acc_bias(params, state, i, "b_ff1", dz.sum(axis=(0, 1)))
        dx2 = dz @ lw.w_ff1.T
        dh_ln2, dg2, db2 = layer_norm_backward(dx2, lc["ln2"])
        _acc(params, f"layer.{i}.ln2_gamma", dg2)
        _acc_bias(params, state, i, "ln2_beta", db2)
        dh = dh + dh_ln2

        if isinstance(state, AdapterState):
            dh = _adapter_backward(dh, state, i, "attn", lc["adapter_attn"], params)

        # attention sublayer: h = h_in + (ctx @ w_o + b_o)
        dattn = dh
        dctx_m = _proj_backward(dattn, lc["ctx_m"], lw.w_o, state, i, "o",
                                lc["proj"]["o"], params)
        dctx = _split_heads(dctx_m, heads)

        probs, kh, vh, qh = lc["probs"], lc["kh"], lc["vh"], lc["qh"]
        dprobs = dctx @ vh.transpose(0, 1, 3, 2)
        dv_full = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dq_h = (dscores @ kh) * inv_sqrt_dh
        dk_full = (dscores.transpose(0, 1, 3, 2) @ qh) * inv_sqrt_dh

        if isinstance(state, PTv2State) and state.cfg.p > 0:
            p = state.cfg.p
            _acc(params, f"ptv2.{i}.p_k", _merge_heads(dk_full[:, :, :p].sum(axis=0)[None])[0])
            _acc(params, f"ptv2.{i}.p_v", _merge_heads(dv_full[:, :, :p].sum(axis=0)[None])[0])
            dk_h, dv_h = dk_full[:, :, p:], dv_full[:, :, p:]
        else:
            dk_h, dv_h = dk_full, dv_full

        dq, dk, dv = _merge_heads(dq_h), _merge_heads(dk_h), _merge_heads(dv_h)
        x1 = lc["x1"]
        dx1 = _proj_backward(dq, x1, lw.w_q, state, i, "q", lc["proj"]["q"], params)
        dx1 += _proj_backward(dk, x1, lw.w_k, state, i, "k", lc["proj"]["k"], params)
        dx1 += _proj_backward(dv, x1, lw.w_v, state, i, "v", lc["proj"]["v"], params)

        dh_ln1, dg1, db1 = layer_norm_backward(dx1, lc["ln1"])
        _acc(params, f"layer.{i}.ln1_gamma", dg1)
        _acc_bias(params, state, i, "ln1_beta", db1)
        dh = dh + dh_ln1

        if isinstance(state, (KronState, FCState)):
            _aot_backward(state, i, dh, lc["aot"], backbone.embed_weights, params)

    if isinstance(state, PTv1State) and state.cfg.p > 0:
        p = state.cfg.p
        _acc(params, "ptv1.prompt", dh[:, :p, :].sum(axis=0))
        dh = dh[:, p:, :]

    if params.get("embed") is not None and params["embed"].grad is not None:
        np.add.at(params["embed"].grad, tokens.reshape(-1), dh.reshape(-1, cfg.hidden))


def _proj_backward(dy: Tensor, x: Tensor, w: Tensor, state: PeftState, layer: int,
                   site: str, pc, params) -> Tensor:
    """Backward of one attention projection; returns grad wrt x."""
    _acc_bias(params, state, layer, _BIAS_OF_SITE[site], dy.sum(axis=(0, 1)))
    if isinstance(state, LoRAState):
        a_m, b_m = state.a[layer][site], state.b[layer][site]
        scale = state.cfg.scale
        if state.cfg.fused:
            dw_eff = _mm_acc(x, dy)
            _acc(params, f"lora.{layer}.{site}.a", scale * (dw_eff @ b_m.T))
            _acc(params, f"lora.{layer}.{site}.b", scale * (a_m.T @ dw_eff))
            _acc(params, f"layer.{layer}.{_WEIGHT_OF_SITE[site]}", dw_eff)
            return dy @ pc["w_eff"].T
        dy_b = dy @ b_m.T
        _acc(params, f"lora.{layer}.{site}.a", scale * _mm_acc(x, dy_b))
        _acc(params, f"lora.{layer}.{site}.b", scale * _mm_acc(pc["xa"], dy))
        _acc(params, f"layer.{layer}.{_WEIGHT_OF_SITE[site]}", _mm_acc(x, dy))
        return dy @ w.T + scale * (dy_b @ a_m.T)
    _acc(params, f"layer.{layer}.{_WEIGHT_OF_SITE[site]}", _mm_acc(x, dy))
    return dy @ w.T


def _adapter_backward(dh_out: Tensor, state: AdapterState, layer: int, slot: str,
                      ac, params) -> Tensor:
    h_in, z, a = ac["h_in"], ac["z"], ac["a"]
    _acc(params, f"adapter.{layer}.{slot}.w_up", _mm_acc(a, dh_out))
    _acc(params, f"adapter.{layer}.{slot}.b_up", dh_out.sum(axis=(0, 1)))
    da = dh_out @ state.w_up[layer][slot].T
    dz = activation_backward(da, z, state.cfg.activation)
    _acc(params, f"adapter.{layer}.{slot}.w_down", _mm_acc(h_in, dz))
    _acc(params, f"adapter.{layer}.{slot}.b_down", dz.sum(axis=(0, 1)))
    return dh_out + dz @ state.w_down[layer][slot].T


def _aot_backward(state, layer: int, dh: Tensor, ac, embed_w: Tensor, params) -> None:
    """Gradients of the bias-row addition wrt the reparametrization factors."""
    d = dh.shape[2]
    drows = dh
    kind = ac["kind"]

    if kind == "fc_train":
        e_drop, z, a = ac["e_drop"], ac["z"], ac["a"]
        _acc(params, f"aot_fc.{layer}.w2", _mm_acc(a, drows))
        _acc(params, f"aot_fc.{layer}.b2", drows.sum(axis=(0, 1)))
        da = drows @ state.w2[layer].T
        dz = activation_backward(da, z, state.cfg.activation)
        _acc(params, f"aot_fc.{layer}.w1", _mm_acc(e_drop, dz))
        _acc(params, f"aot_fc.{layer}.b1", dz.sum(axis=(0, 1)))
        return

    if kind == "kron" and "mask" in ac:
        drows = drows * ac["mask"] / DROPOUT_KEEP

    uniq, inv = ac["uniq"], ac["inv"]
    g_u = np.zeros((uniq.size, d), dtype=drows.dtype)
    np.add.at(g_u, inv, drows.reshape(-1, d))

    if kind == "kron":
        r = state.cfg.r
        iu, ju = np.divmod(uniq, state.cfg.b)
        wl_u = state.w_l[layer][iu]
        wm_u = state.w_m[layer][ju]
        outer_u = np.einsum("uk,um->ukm", wl_u, wm_u).reshape(uniq.size, r * r)
        _acc(params, f"aot_kron.{layer}.w_r", outer_u.T @ g_u)
        douter = (g_u @ state.w_r[layer].T).reshape(uniq.size, r, r)
        dwl_u = np.einsum("ukm,um->uk", douter, wm_u)
        dwm_u = np.einsum("ukm,uk->um", douter, wl_u)
        pair = params.get(f"aot_kron.{layer}.w_l")
        if pair is not None and pair.grad is not None:
            np.add.at(pair.grad, iu, dwl_u)
        pair = params.get(f"aot_kron.{layer}.w_m")
        if pair is not None and pair.grad is not None:
            np.add.at(pair.grad, ju, dwm_u)
        return

    # fc, eval path: recompute the bottleneck intermediates for the unique ids
    e_u = embed_w[uniq]
    z_u = e_u @ state.w1[layer] + state.b1[layer]
    a_u = activation(z_u, state.cfg.activation)
    _acc(params, f"aot_fc.{layer}.w2", a_u.T @ g_u)
    _acc(params, f"aot_fc.{layer}.b2", g_u.sum(axis=0))
    da = g_u @ state.w2[layer].T
    dz = activation_backward(da, z_u, state.cfg.activation)
    _acc(params, f"aot_fc.{layer}.w1", e_u.T @ dz)
    _acc(params, f"aot_fc.{layer}.b1", dz.sum(axis=0))


# ---------------------------------------------------------------------------
# Spec-level single-example entry point
# ---------------------------------------------------------------------------


def forward(tokens, backbone: Backbone, peft: PeftState = None, mask=None) -> Tensor:
    """Logits for one token sequence under the given fine-tuning state."""
    tokens = np.asarray(tokens)
    pad = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
    logits, _ = run_forward(backbone, peft, tokens[None, :], pad_mask=pad)
    return logits[0]
