import math

import numpy as np
import pytest

from aotpeft.errors import ConfigError, InputError
from aotpeft.forward import forward, run_forward
from aotpeft.numerics import make_rng
from aotpeft.transformer import (
    LayerWeights,
    ModelConfig,
    attention,
    attention_weights,
    embed,
    encoder_layer,
    init_backbone,
)

F64 = np.float64


def zero_layer(d: int, ffn_mult: int = 4) -> LayerWeights:
    f = ffn_mult * d
    return LayerWeights(
        w_q=np.zeros((d, d)), w_k=np.zeros((d, d)), w_v=np.zeros((d, d)), w_o=np.zeros((d, d)),
        b_q=np.zeros(d), b_k=np.zeros(d), b_v=np.zeros(d), b_o=np.zeros(d),
        w_ff1=np.zeros((d, f)), b_ff1=np.zeros(f), w_ff2=np.zeros((f, d)), b_ff2=np.zeros(d),
        ln1_gamma=np.zeros(d), ln1_beta=np.zeros(d),
        ln2_gamma=np.zeros(d), ln2_beta=np.zeros(d),
    )


class TestModelConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=10, hidden=10, layers=1, heads=3)

    def test_tiny_vocab_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=1, hidden=8, layers=1, heads=1)


class TestEmbed:
    def test_single_lookup(self):
        e = np.arange(12.0).reshape(4, 3)
        assert np.array_equal(embed([0], e), e[0:1])

    def test_repeated_token_identical_rows(self):
        e = make_rng(0, "e").standard_normal((6, 4))
        out = embed([2, 2, 2], e)
        assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])

    def test_matches_concatenated_single_lookups(self):
        e = make_rng(1, "e").standard_normal((8, 4))
        combined = embed([2, 5], e)
        separate = np.concatenate([embed([2], e), embed([5], e)], axis=0)
        assert np.array_equal(combined, separate)

    def test_out_of_range(self):
        with pytest.raises(InputError):
            embed([9], np.zeros((4, 2)))


class TestAttention:
    def test_single_key_returns_its_value(self):
        q = make_rng(0, "q").standard_normal((3, 4))
        k = np.ones((1, 4))
        v = make_rng(0, "v").standard_normal((1, 4))
        out = attention(q, k, v)
        for row in out:
            assert np.allclose(row, v[0], atol=1e-14)

    def test_zero_query_gives_value_mean(self):
        rng = make_rng(1, "kv")
        k = rng.standard_normal((5, 4))
        v = rng.standard_normal((5, 4))
        out = attention(np.zeros((2, 4)), k, v)
        assert np.allclose(out, np.tile(v.mean(axis=0), (2, 1)), atol=1e-12)

    def test_two_key_closed_form(self):
        # d_h = 1, scale 1: logits [ln 3, 0] -> weights [0.75, 0.25]
        q = np.array([[1.0]])
        k = np.array([[math.log(3.0)], [0.0]])
        v = np.array([[10.0], [2.0]])
        out = attention(q, k, v)
        assert np.allclose(out, [[0.75 * 10.0 + 0.25 * 2.0]], atol=1e-12)

    def test_weight_rows_sum_to_one(self):
        rng = make_rng(2, "w")
        w = attention_weights(rng.standard_normal((4, 8)), rng.standard_normal((6, 8)))
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-12

    def test_masked_keys_get_no_weight(self):
        rng = make_rng(3, "m")
        q = rng.standard_normal((2, 4))
        k = rng.standard_normal((5, 4))
        mask = np.array([False, True, False, True, False])
        w = attention_weights(q, k, mask)
        assert np.abs(w[:, mask]).max() < 1e-30
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-12


class TestEncoderLayer:
    def test_zero_weights_zero_gamma_is_identity(self):
        h = make_rng(0, "h").standard_normal((5, 8))
        out = encoder_layer(h, zero_layer(8))
        assert np.array_equal(out, h)

    def test_output_shape_preserved(self):
        rng = make_rng(1, "shape")
        model = ModelConfig(vocab_size=11, hidden=8, layers=1, heads=2)
        bb = init_backbone(model, 2, seed=0, dtype=F64)
        for n in (1, 3, 9):
            h = rng.standard_normal((n, 8))
            assert encoder_layer(h, bb.layers[0], n_heads=2).shape == (n, 8)

    def test_multi_head_equals_per_slice_single_head(self):
        # the h-head path must agree with running attention independently on
        # each head's slice of the projected space and concatenating
        rng = make_rng(2, "heads")
        d, heads = 12, 3
        d_h = d // heads
        model = ModelConfig(vocab_size=7, hidden=d, layers=1, heads=heads)
        bb = init_backbone(model, 2, seed=5, dtype=F64)
        lw = bb.layers[0]
        h = rng.standard_normal((6, d))

        from aotpeft.numerics import layer_norm
        from aotpeft.transformer import LN_EPS

        x1 = layer_norm(h, lw.ln1_gamma, lw.ln1_beta, LN_EPS)
        q = x1 @ lw.w_q + lw.b_q
        k = x1 @ lw.w_k + lw.b_k
        v = x1 @ lw.w_v + lw.b_v
        manual = np.empty_like(q)
        for hd in range(heads):
            s = slice(hd * d_h, (hd + 1) * d_h)
            manual[:, s] = attention(q[:, s], k[:, s], v[:, s])
        expected = h + manual @ lw.w_o + lw.b_o

        got = encoder_layer(h, lw, n_heads=heads)
        # compare the attention sublayer only: strip the FFN residual by
        # replaying it on the expected intermediate
        from aotpeft.numerics import activation

        x2 = layer_norm(expected, lw.ln2_gamma, lw.ln2_beta, LN_EPS)
        expected_full = expected + activation(
            x2 @ lw.w_ff1 + lw.b_ff1, model.activation) @ lw.w_ff2 + lw.b_ff2
        assert np.abs(got - expected_full).max() < 1e-10


class TestForward:
    def test_deterministic_bit_identical(self):
        model = ModelConfig(vocab_size=31, hidden=16, layers=2, heads=2)
        bb = init_backbone(model, 3, seed=9, dtype=F64)
        tokens = make_rng(0, "t").integers(0, 31, size=12)
        a = forward(tokens, bb)
        b = forward(tokens, bb)
        assert np.array_equal(a, b)

    def test_batched_matches_single(self):
        model = ModelConfig(vocab_size=31, hidden=16, layers=2, heads=2)
        bb = init_backbone(model, 3, seed=9, dtype=F64)
        rng = make_rng(1, "t")
        batch = rng.integers(0, 31, size=(4, 10))
        logits, _ = run_forward(bb, None, batch)
        for j in range(4):
            single = forward(batch[j], bb)
            assert np.abs(logits[j] - single).max() < 1e-12

    def test_pad_mask_matches_short_sequence(self):
        model = ModelConfig(vocab_size=31, hidden=16, layers=2, heads=2, pad_id=0)
        bb = init_backbone(model, 3, seed=9, dtype=F64)
        rng = make_rng(2, "t")
        short = rng.integers(0, 31, size=7)
        padded = np.concatenate([short, np.zeros(5, dtype=short.dtype)])
        mask = np.array([False] * 7 + [True] * 5)
        assert np.abs(forward(short, bb) - forward(padded, bb, mask=mask)).max() < 1e-10

    def test_out_of_range_token(self):
        model = ModelConfig(vocab_size=8, hidden=8, layers=1, heads=1)
        bb = init_backbone(model, 2, seed=0)
        with pytest.raises(InputError):
            forward([8], bb)
