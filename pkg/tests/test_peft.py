import numpy as np
import pytest

from aotpeft.errors import ConfigError, InputError
from aotpeft.forward import build_params, forward, run_forward, trainable_items
from aotpeft.numerics import make_rng
from aotpeft.peft import (
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
    adapter_bottleneck,
    aot_rows_for_layer,
    apply_aot,
    bitfit_shift,
    count_trainable,
    decompose_aot_attention,
    decompose_aot_attention_terms,
    fc_row,
    fused_table_bytes,
    init_peft_state,
    kron_row,
    lora_linear,
    materialize_table,
    peft_named_params,
    ptv1_prepend,
    ptv2_attention,
    validate_config,
)
from aotpeft.transformer import ModelConfig, attention, attention_weights, init_backbone

F64 = np.float64


class TestKronRow:
    def test_zero_mixing_matrix_gives_zero_rows(self):
        rng = make_rng(0, "k")
        w_l = rng.standard_normal((4, 2))
        w_m = rng.standard_normal((3, 2))
        w_r = np.zeros((4, 5))
        for v in range(12):
            assert np.array_equal(kron_row(w_l, w_m, w_r, v), np.zeros(5))

    def test_scalar_rank_one_expansion(self):
        # a=b=2, r=1: factor rows are scalars, id 3 -> (1,1) -> 3*7=21
        w_l = np.array([[2.0], [3.0]])
        w_m = np.array([[5.0], [7.0]])
        w_r = make_rng(1, "w").standard_normal((1, 6))
        assert np.allclose(kron_row(w_l, w_m, w_r, 3), 21.0 * w_r[0], atol=0)

    def test_matches_dense_kronecker_oracle(self):
        rng = make_rng(2, "k")
        a, b, r, d = 5, 4, 3, 7
        w_l = rng.standard_normal((a, r))
        w_m = rng.standard_normal((b, r))
        w_r = rng.standard_normal((r * r, d))
        dense = np.kron(w_l, w_m) @ w_r  # [a*b, r*r] @ [r*r, d]
        for v in range(a * b):
            assert np.abs(kron_row(w_l, w_m, w_r, v) - dense[v]).max() < 1e-12

    def test_out_of_grid(self):
        with pytest.raises(InputError):
            kron_row(np.ones((2, 1)), np.ones((2, 1)), np.ones((1, 3)), 4)


class TestFcRow:
    def test_zero_init_gives_zero_rows(self):
        rng = make_rng(0, "f")
        e = rng.standard_normal((6, 4))
        w1 = rng.standard_normal((4, 3))
        out = fc_row(w1, np.zeros(3), np.zeros((3, 4)), np.zeros(4), e, 2)
        assert np.array_equal(out, np.zeros(4))

    def test_identical_embeddings_identical_rows(self):
        rng = make_rng(1, "f")
        e = rng.standard_normal((5, 4))
        e[3] = e[1]
        w1 = rng.standard_normal((4, 3))
        b1 = rng.standard_normal(3)
        w2 = rng.standard_normal((3, 4))
        b2 = rng.standard_normal(4)
        assert np.array_equal(fc_row(w1, b1, w2, b2, e, 1), fc_row(w1, b1, w2, b2, e, 3))

    def test_out_of_vocab(self):
        with pytest.raises(InputError):
            fc_row(np.ones((2, 1)), np.zeros(1), np.zeros((1, 2)), np.zeros(2),
                   np.zeros((3, 2)), 3)


class TestMaterializeTable:
    def _random_states(self, model):
        kron = init_peft_state(AotKron(a=8, b=8, r=2), model, 0, F64)
        fc = init_peft_state(AotFC(r=3), model, 1, F64)
        rng = make_rng(2, "fill")
        for st in (kron, fc):
            for _name, arr in peft_named_params(st).items():
                arr[...] = rng.standard_normal(arr.shape) * 0.1
        return kron, fc

    def test_zero_init_gives_zero_table(self):
        model = ModelConfig(vocab_size=50, hidden=6, layers=2, heads=1)
        bb = init_backbone(model, 2, seed=0, dtype=F64)
        for cfg in (AotKron(a=8, b=8, r=2), AotFC(r=3)):
            state = init_peft_state(cfg, model, 0, F64)
            table = materialize_table(state, model, bb.embed_weights)
            for layer_table in table.tables:
                assert np.array_equal(layer_table, np.zeros_like(layer_table))

    def test_table_rows_equal_on_the_fly_rows_exactly(self):
        model = ModelConfig(vocab_size=50, hidden=6, layers=2, heads=1)
        bb = init_backbone(model, 2, seed=0, dtype=F64)
        kron, fc = self._random_states(model)
        for state in (kron, fc):
            table = materialize_table(state, model, bb.embed_weights)
            ids = make_rng(3, "ids").integers(0, 50, size=20)
            for layer in range(2):
                live = aot_rows_for_layer(state, layer, ids, bb.embed_weights)
                assert np.array_equal(live, table.tables[layer][ids])

    def test_factor_grid_larger_than_vocab(self):
        # 256*200 covers 50265 ids; only the vocabulary's rows materialize
        model = ModelConfig(vocab_size=50265, hidden=4, layers=1, heads=1)
        state = init_peft_state(AotKron(a=256, b=200, r=2), model, 0, F64)
        assert 256 * 200 - model.vocab_size == 935  # unused factor rows
        table = materialize_table(state, model)
        assert table.tables[0].shape == (50265, 4)

    def test_cross_precision_conversion_error_is_tiny(self):
        # small-magnitude rows: float32 storage rounds at ~1e-11 absolute
        model = ModelConfig(vocab_size=40, hidden=6, layers=1, heads=1)
        state = init_peft_state(AotKron(a=8, b=5, r=2), model, 0, F64)
        rng = make_rng(4, "fill")
        for _name, arr in peft_named_params(state).items():
            arr[...] = rng.standard_normal(arr.shape) * 0.02
        table64 = materialize_table(state, model)
        rows32 = table64.tables[0].astype(np.float32).astype(np.float64)
        assert np.abs(rows32 - table64.tables[0]).max() < 1e-10


class TestApplyAot:
    def test_zero_table_is_identity(self):
        h = make_rng(0, "h").standard_normal((4, 6))
        out = apply_aot(h, np.zeros((9, 6)), [1, 2, 3, 4])
        assert np.array_equal(out, h)

    def test_zero_states_expose_rows(self):
        p = make_rng(1, "p").standard_normal((9, 6))
        tokens = [3, 3, 7]
        out = apply_aot(np.zeros((3, 6)), p, tokens)
        assert np.array_equal(out, p[tokens])

    def test_duplicate_tokens_get_the_same_row(self):
        p = make_rng(2, "p").standard_normal((9, 6))
        h = make_rng(2, "h").standard_normal((3, 6))
        out = apply_aot(h, p, [3, 3, 7])
        delta = out - h
        assert np.abs(delta[0] - delta[1]).max() < 1e-12  # same token, same shift
        assert np.abs(delta[0] - p[3]).max() < 1e-12
        assert np.abs(delta[2] - p[7]).max() < 1e-12


class TestPtv1Prepend:
    def test_empty_prompt_unchanged(self):
        h0 = make_rng(0, "h").standard_normal((5, 4))
        assert np.array_equal(ptv1_prepend(np.zeros((0, 4)), h0), h0)

    def test_length_and_content(self):
        rng = make_rng(1, "p")
        prompt = rng.standard_normal((3, 4))
        h0 = rng.standard_normal((5, 4))
        out = ptv1_prepend(prompt, h0)
        assert out.shape == (8, 4)
        assert np.array_equal(out[:3], prompt)
        assert np.array_equal(out[3:], h0)


class TestPtv2Attention:
    def test_empty_prefix_is_plain_attention(self):
        rng = make_rng(0, "a")
        q, k, v = (rng.standard_normal((4, 6)) for _ in range(3))
        empty = np.zeros((0, 6))
        assert np.array_equal(ptv2_attention(q, k, v, empty, empty), attention(q, k, v))

    def test_matches_two_sum_decomposition(self):
        from aotpeft.peft import decompose_ptv2_attention

        rng = make_rng(1, "a")
        q, k, v = (rng.standard_normal((5, 6)) for _ in range(3))
        p_k, p_v = rng.standard_normal((3, 6)), rng.standard_normal((3, 6))
        direct = ptv2_attention(q, k, v, p_k, p_v)
        for i in range(5):
            two_sum = decompose_ptv2_attention(q, k, v, p_k, p_v, i)
            assert np.abs(two_sum - direct[i]).max() < 1e-10

    def test_extended_weight_rows_sum_to_one(self):
        rng = make_rng(2, "a")
        q, k = rng.standard_normal((4, 6)), rng.standard_normal((5, 6))
        p_k = rng.standard_normal((3, 6))
        w = attention_weights(q, np.concatenate([p_k, k], axis=0))
        assert w.shape == (4, 8)
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-12

    def test_output_length_unchanged(self):
        rng = make_rng(3, "a")
        q, k, v = (rng.standard_normal((4, 6)) for _ in range(3))
        p = rng.standard_normal((7, 6))
        assert ptv2_attention(q, k, v, p, p).shape == (4, 6)


class TestBitfitShift:
    def test_zero_shift_identity(self):
        h = make_rng(0, "h").standard_normal((3, 5))
        assert np.array_equal(bitfit_shift(h, np.zeros(5)), h)

    def test_every_row_shifts_by_same_vector(self):
        rng = make_rng(1, "h")
        h = rng.standard_normal((4, 5))
        b = rng.standard_normal(5)
        delta = bitfit_shift(h, b) - h
        for row in delta:
            assert np.allclose(row, b, atol=1e-15)

    def test_constant_shift_bias_term_is_b_wv(self):
        from aotpeft.selftest import _random_layer

        rng = make_rng(2, "l")
        lw = _random_layer(rng, 8)
        h = rng.standard_normal((5, 8))
        b = rng.standard_normal(8)
        rows = np.tile(b, (5, 1))
        expected = b @ lw.w_v
        for i in range(5):
            term_bias, _ = decompose_aot_attention_terms(h, rows, lw, i)
            assert np.abs(term_bias - expected).max() < 1e-10


class TestLoraLinear:
    def test_zero_up_matrix_is_exact_base(self):
        rng = make_rng(0, "l")
        x = rng.standard_normal((4, 6))
        w = rng.standard_normal((6, 6))
        a = rng.standard_normal((6, 2))
        out = lora_linear(x, w, a, np.zeros((2, 6)), alpha=2.0, r=2)
        assert np.array_equal(out, x @ w)

    def test_fused_matches_unfused_100_cases(self):
        worst = 0.0
        for seed in range(100):
            rng = make_rng(seed, "l")
            r = 1 + seed % 5
            x = rng.standard_normal((3, 8))
            w = rng.standard_normal((8, 8))
            a = rng.standard_normal((8, r))
            b = rng.standard_normal((r, 8))
            alpha = float(1 + seed % 4)
            delta = np.abs(
                lora_linear(x, w, a, b, alpha, r, fused=False)
                - lora_linear(x, w, a, b, alpha, r, fused=True)
            ).max()
            worst = max(worst, delta)
        assert worst < 1e-10

    def test_full_rank_degenerate_case(self):
        rng = make_rng(1, "l")
        d = 5
        x = rng.standard_normal((3, d))
        w = rng.standard_normal((d, d))
        dw = rng.standard_normal((d, d))
        out = lora_linear(x, w, np.eye(d), dw, alpha=d, r=d)
        assert np.abs(out - x @ (w + dw)).max() < 1e-10


class TestAdapterBottleneck:
    def test_zero_up_path_is_identity(self):
        rng = make_rng(0, "a")
        h = rng.standard_normal((4, 6))
        w_d = rng.standard_normal((6, 2))
        out = adapter_bottleneck(h, w_d, np.zeros(2), np.zeros((2, 6)), np.zeros(6))
        assert np.array_equal(out, h)

    def test_shape_preserved(self):
        rng = make_rng(1, "a")
        h = rng.standard_normal((7, 6))
        out = adapter_bottleneck(h, rng.standard_normal((6, 3)), rng.standard_normal(3),
                                 rng.standard_normal((3, 6)), rng.standard_normal(6))
        assert out.shape == h.shape

    def test_rank_one_scalar_expansion(self):
        from aotpeft.numerics import activation

        rng = make_rng(2, "a")
        h = rng.standard_normal((3, 4))
        w_d = rng.standard_normal((4, 1))
        b_d = rng.standard_normal(1)
        w_u = rng.standard_normal((1, 4))
        b_u = rng.standard_normal(4)
        out = adapter_bottleneck(h, w_d, b_d, w_u, b_u)
        for i in range(3):
            s = float(h[i] @ w_d[:, 0] + b_d[0])  # scalar bottleneck per row
            expected = h[i] + float(activation(np.array([s]), "gelu")[0]) * w_u[0] + b_u
            assert np.abs(out[i] - expected).max() < 1e-12


class TestAotDecomposition:
    def test_zero_rows_reduce_to_plain_attention(self):
        from aotpeft.selftest import _random_layer

        rng = make_rng(0, "d")
        lw = _random_layer(rng, 8)
        h = rng.standard_normal((4, 8))
        q = h @ lw.w_q + lw.b_q
        k = h @ lw.w_k + lw.b_k
        v = h @ lw.w_v + lw.b_v
        plain = attention(q, k, v)
        for i in range(4):
            got = decompose_aot_attention(h, np.zeros_like(h), lw, i)
            assert np.abs(got - plain[i]).max() < 1e-12

    def test_equals_direct_attention_on_shifted_states(self):
        from aotpeft.selftest import _random_layer

        for seed in range(100):
            rng = make_rng(seed, "d")
            n = [1, 2, 8][seed % 3]
            lw = _random_layer(rng, 8)
            h = rng.standard_normal((n, 8))
            rows = rng.standard_normal((n, 8))
            hp = h + rows
            direct = attention(hp @ lw.w_q + lw.b_q, hp @ lw.w_k + lw.b_k,
                               hp @ lw.w_v + lw.b_v)
            i = seed % n
            got = decompose_aot_attention(h, rows, lw, i)
            assert np.abs(got - direct[i]).max() < 1e-10

    def test_input_dependent_rows_change_attention_map(self):
        # constant rows shift every key equally; varying rows must disturb the
        # weight matrix relative to vanilla on some random case
        from aotpeft.selftest import _random_layer

        rng = make_rng(7, "d")
        lw = _random_layer(rng, 8)
        h = rng.standard_normal((5, 8))
        rows = rng.standard_normal((5, 8))

        def weights_for(p_rows):
            hp = h + p_rows
            return attention_weights(hp @ lw.w_q + lw.b_q, hp @ lw.w_k + lw.b_k)

        vanilla = weights_for(np.zeros_like(h))
        shifted = weights_for(rows)
        assert np.abs(shifted - vanilla).max() > 1e-3


class TestCountTrainable:
    BIG = ModelConfig(vocab_size=50265, hidden=1024, layers=24, heads=16, max_seq=512)

    def test_reference_kron_count(self):
        assert count_trainable(AotKron(a=256, b=200, r=20), self.BIG) == 10_049_280

    def test_empty_prompt_counts_zero(self):
        assert count_trainable(PTv1(p=0), self.BIG) == 0

    def test_reference_prefix_count(self):
        assert count_trainable(PTv2(p=20), self.BIG) == 983_040

    def test_head_included_when_requested(self):
        base = count_trainable(PTv1(p=4), self.BIG)
        with_head = count_trainable(PTv1(p=4), self.BIG, num_classes=3)
        assert with_head - base == 1024 * 3 + 3

    @pytest.mark.parametrize("cfg", [
        AotKron(a=12, b=9, r=3), AotFC(r=5), PTv1(p=6), PTv2(p=6),
        BitFit(), LoRA(r=4), Adapter(r=4), Full(),
    ])
    def test_matches_grad_bearing_enumeration(self, cfg):
        model = ModelConfig(vocab_size=97, hidden=16, layers=3, heads=2)
        bb = init_backbone(model, 4, seed=0, dtype=F64)
        state = init_peft_state(cfg, model, 1, F64)
        params = build_params(bb, state)
        head_size = bb.head_w.size + bb.head_b.size
        enumerated = sum(p.value.size for _n, p in trainable_items(params)) - head_size
        assert count_trainable(cfg, model) == enumerated
        assert count_trainable(cfg, model, num_classes=4) == enumerated + head_size


class TestFusedTableBytes:
    BIG = ModelConfig(vocab_size=50265, hidden=1024, layers=24, heads=16, max_seq=512)

    def test_reference_half_precision_size(self):
        assert fused_table_bytes(self.BIG, 16) == 2_470_625_280

    def test_tiny_case(self):
        tiny = ModelConfig(vocab_size=2, hidden=1, layers=1, heads=1)
        assert fused_table_bytes(tiny, 32) == 8

    def test_full_precision_doubles_half(self):
        assert fused_table_bytes(self.BIG, 32) == 2 * fused_table_bytes(self.BIG, 16)

    def test_rejects_other_widths(self):
        with pytest.raises(ConfigError):
            fused_table_bytes(self.BIG, 64)


class TestConfigValidation:
    def test_kron_grid_must_cover_vocab(self):
        model = ModelConfig(vocab_size=100, hidden=8, layers=1, heads=1)
        with pytest.raises(ConfigError):
            validate_config(AotKron(a=9, b=9, r=2), model)

    def test_covering_grid_accepted(self):
        model = ModelConfig(vocab_size=100, hidden=8, layers=1, heads=1)
        validate_config(AotKron(a=10, b=10, r=2), model)


class TestZeroInitNeutrality:
    MODEL = ModelConfig(vocab_size=61, hidden=16, layers=2, heads=2)

    @pytest.mark.parametrize("cfg", [
        AotKron(a=8, b=8, r=2), AotFC(r=4), LoRA(r=3), LoRA(r=3, fused=True),
        Adapter(r=3), BitFit(), PTv1(p=0), PTv2(p=0),
    ])
    def test_fresh_state_changes_nothing(self, cfg):
        bb = init_backbone(self.MODEL, 3, seed=11, dtype=F64)
        tokens = make_rng(0, "t").integers(0, 61, size=(3, 9))
        vanilla, _ = run_forward(bb, None, tokens)
        state = init_peft_state(cfg, self.MODEL, seed=5, dtype=F64)
        logits, _ = run_forward(bb, state, tokens)
        assert np.array_equal(logits, vanilla)

    def test_nonzero_prefix_changes_logits(self):
        bb = init_backbone(self.MODEL, 3, seed=11, dtype=F64)
        tokens = make_rng(0, "t").integers(0, 61, size=(3, 9))
        vanilla, _ = run_forward(bb, None, tokens)
        state = init_peft_state(PTv2(p=4), self.MODEL, seed=5, dtype=F64)
        logits, _ = run_forward(bb, state, tokens)
        assert np.abs(logits - vanilla).max() > 1e-8


class TestFusionEquivalence:
    def test_forward_via_table_is_bit_equal(self):
        model = ModelConfig(vocab_size=60, hidden=16, layers=2, heads=2)
        bb = init_backbone(model, 3, seed=7, dtype=F64)
        tokens = make_rng(1, "t").integers(0, 60, size=(4, 11))
        for cfg in (AotKron(a=8, b=8, r=2), AotFC(r=4)):
            state = init_peft_state(cfg, model, seed=3, dtype=F64)
            rng = make_rng(5, "fill")
            for _name, arr in peft_named_params(state).items():
                arr[...] = rng.standard_normal(arr.shape) * 0.05
            fused = FusedAotState(materialize_table(state, model, bb.embed_weights))
            live, _ = run_forward(bb, state, tokens)
            via_table, _ = run_forward(bb, fused, tokens)
            assert np.array_equal(live, via_table)
