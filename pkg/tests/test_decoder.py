"""Decoder stack, pointer-generator mixing, greedy decoding."""

import numpy as np
import pytest

from masque import tensor as T
from masque.data import EOS_ID, encode_example
from masque.decoder import combined_passage_attention, final_distribution, greedy_decode
from masque.params import EVAL_CTX
from masque.tensor import ShapeError, Tensor

from test_reader import tiny_model


def _norm_cols(rng, shape):
    m = rng.random(shape) + 1e-3
    return m / m.sum(axis=0, keepdims=True)


class TestCombinedPassageAttention:
    def test_equal_relevance_is_identity(self):
        rng = np.random.default_rng(0)
        alpha = _norm_cols(rng, (8, 5))
        k_of_l = np.repeat(np.arange(2), 4)
        out = combined_passage_attention(Tensor(alpha), Tensor(np.full(2, 0.37)), k_of_l)
        assert np.allclose(out.data, alpha, atol=1e-12)

    def test_relevance_reweights_passage_mass(self):
        # both passages hold half the copy mass; relevance 0.9 / 0.1 must
        # move the split to exactly those proportions
        alpha = np.full((8, 3), 0.125)
        k_of_l = np.repeat(np.arange(2), 4)
        out = combined_passage_attention(Tensor(alpha), Tensor(np.array([0.9, 0.1])), k_of_l)
        mass0 = out.data[:4].sum(axis=0)
        mass1 = out.data[4:].sum(axis=0)
        assert np.allclose(mass0, 0.9, atol=1e-12)
        assert np.allclose(mass1, 0.1, atol=1e-12)

    def test_columns_stay_normalized(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            k = int(rng.integers(1, 4))
            width = int(rng.integers(1, 5))
            t = int(rng.integers(1, 4))
            alpha = _norm_cols(rng, (k * width, t))
            beta = rng.random(k) + 1e-3
            out = combined_passage_attention(
                Tensor(alpha), Tensor(beta), np.repeat(np.arange(k), width))
            assert np.allclose(out.data.sum(axis=0), 1.0, atol=1e-9)
            assert np.all(out.data >= 0.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            k = int(rng.integers(1, 4))
            width = int(rng.integers(1, 5))
            t = int(rng.integers(1, 4))
            alpha = _norm_cols(rng, (k * width, t))
            beta = rng.random(k)
            k_of_l = np.repeat(np.arange(k), width)
            got = combined_passage_attention(Tensor(alpha), Tensor(beta), k_of_l).data
            want = np.zeros_like(alpha)
            for col in range(t):
                weighted = np.array([alpha[l, col] * beta[k_of_l[l]]
                                     for l in range(k * width)])
                want[:, col] = weighted / max(weighted.sum(), 1e-12)
            assert np.allclose(got, want, atol=1e-12)

    def test_all_zero_relevance_yields_zero_mass_not_nan(self):
        alpha = _norm_cols(np.random.default_rng(3), (6, 2))
        out = combined_passage_attention(
            Tensor(alpha), Tensor(np.zeros(2)), np.repeat(np.arange(2), 3))
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, 0.0)


class TestFinalDistribution:
    def test_pure_copy_accumulates_repeated_tokens(self):
        # source tokens [a, b, a] with copy weights [0.2, 0.3, 0.5] and all
        # mass on the passage-copy branch: P(a)=0.7, P(b)=0.3
        p_vocab = Tensor(np.array([[0.5], [0.5]]))
        lam = Tensor(np.array([[0.0], [0.0], [1.0]]))
        alpha_q = Tensor(np.array([[1.0]]))
        alpha_p = Tensor(np.array([[0.2], [0.3], [0.5]]))
        mix, _, _, _ = final_distribution(p_vocab, lam, alpha_q, np.array([0]),
                                          alpha_p, np.array([0, 1, 0]), 2)
        assert np.allclose(mix.data[:, 0], [0.7, 0.3], atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            v = int(rng.integers(2, 9))
            ext_size = v + int(rng.integers(0, 41 - v))
            j = int(rng.integers(1, 6))
            l = int(rng.integers(1, 8))
            t = int(rng.integers(1, 4))
            p_vocab = _norm_cols(rng, (v, t))
            lam = _norm_cols(rng, (3, t))
            alpha_q = _norm_cols(rng, (j, t))
            alpha_p = _norm_cols(rng, (l, t))
            q_ext = rng.integers(0, ext_size, size=j)
            p_ext = rng.integers(0, ext_size, size=l)
            mix, _, _, _ = final_distribution(
                Tensor(p_vocab), Tensor(lam), Tensor(alpha_q), q_ext,
                Tensor(alpha_p), p_ext, ext_size)
            want = np.zeros((ext_size, t))
            for col in range(t):
                for idx in range(ext_size):
                    gen = p_vocab[idx, col] if idx < v else 0.0
                    from_q = sum(alpha_q[jj, col] for jj in range(j) if q_ext[jj] == idx)
                    from_p = sum(alpha_p[ll, col] for ll in range(l) if p_ext[ll] == idx)
                    want[idx, col] = (lam[0, col] * gen + lam[1, col] * from_q
                                      + lam[2, col] * from_p)
            assert np.allclose(mix.data, want, atol=1e-12)

    def test_columns_sum_to_one(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            v = int(rng.integers(2, 6))
            ext_size = v + int(rng.integers(0, 5))
            mix, _, _, _ = final_distribution(
                Tensor(_norm_cols(rng, (v, 2))), Tensor(_norm_cols(rng, (3, 2))),
                Tensor(_norm_cols(rng, (3, 2))), rng.integers(0, ext_size, size=3),
                Tensor(_norm_cols(rng, (4, 2))), rng.integers(0, ext_size, size=4),
                ext_size)
            assert np.allclose(mix.data.sum(axis=0), 1.0, atol=1e-9)
            assert np.all(mix.data >= 0.0)

    def test_extended_size_below_vocab_rejected(self):
        with pytest.raises(ShapeError):
            final_distribution(Tensor(np.ones((4, 1))), Tensor(np.ones((3, 1))),
                               Tensor(np.ones((1, 1))), np.array([0]),
                               Tensor(np.ones((1, 1))), np.array([0]), 3)


class TestDecoderStack:
    def test_teacher_forcing_shapes(self):
        cfg, examples, vocab, model = tiny_model()
        enc = encode_example(examples[0], vocab, "nlg", cfg.limits())
        ro = model.reader.forward(enc, EVAL_CTX)
        beta = Tensor(np.full(cfg.k_passages, 0.5))
        po = model.decoder.decode_teacher(enc, ro, beta, EVAL_CTX)
        steps = len(enc.target) - 1
        assert po.dist.shape == (enc.ext_size, steps)
        assert po.lam.shape == (3, steps)
        assert po.alpha_q.shape == (len(enc.q_ids), steps)
        assert po.alpha_p.shape == (enc.p_ids.size, steps)

    def test_distribution_columns_sum_to_one(self):
        cfg, examples, vocab, model = tiny_model()
        enc = encode_example(examples[0], vocab, "qa", cfg.limits())
        ro = model.reader.forward(enc, EVAL_CTX)
        po = model.decoder.decode_teacher(enc, ro, Tensor(np.array([0.3, 0.8])), EVAL_CTX)
        assert np.allclose(po.dist.data.sum(axis=0), 1.0, atol=1e-9)
        assert np.all(po.dist.data >= 0.0)

    def test_future_tokens_cannot_change_earlier_steps(self):
        cfg, examples, vocab, model = tiny_model()
        enc = encode_example(examples[0], vocab, "nlg", cfg.limits())
        ro = model.reader.forward(enc, EVAL_CTX)
        beta = Tensor(np.array([0.6, 0.2]))
        full_in = enc.target[:-1]
        s_full = model.decoder.states(full_in, ro, EVAL_CTX)
        po_full = model.decoder.pointer_generator(s_full, ro, beta, enc)
        for t in range(1, len(full_in) + 1):
            s_part = model.decoder.states(full_in[:t], ro, EVAL_CTX)
            po_part = model.decoder.pointer_generator(s_part, ro, beta, enc)
            assert np.array_equal(s_part.data[:, -1], s_full.data[:, t - 1])
            assert np.array_equal(po_part.dist.data[:, -1], po_full.dist.data[:, t - 1])

    def test_style_token_reaches_decoder_input(self):
        cfg, examples, vocab, model = tiny_model()
        enc_a = encode_example(examples[0], vocab, "qa", cfg.limits())
        enc_b = encode_example(examples[0], vocab, "nlg", cfg.limits())
        ro = model.reader.forward(enc_a, EVAL_CTX)
        s_a = model.decoder.states(enc_a.target[:1], ro, EVAL_CTX)
        s_b = model.decoder.states(enc_b.target[:1], ro, EVAL_CTX)
        assert not np.array_equal(s_a.data, s_b.data)

    def test_gradients_flow_through_pointer_path(self):
        cfg, examples, vocab, model = tiny_model(d=8, d_word=8, heads=2,
                                                 ffn_inner=16, decoder_blocks=1)
        enc = encode_example(examples[0], vocab, "qa", cfg.limits())
        ro = model.reader.forward(enc, EVAL_CTX)
        beta = Tensor(np.array([0.4, 0.7]), requires_grad=True)
        tgt = enc.target[1:]

        def f():
            po = model.decoder.decode_teacher(enc, ro, beta, EVAL_CTX)
            picks = T.gather_col_entries(po.dist, tgt)
            return T.neg(T.tsum(T.log(T.clamp(picks, lo=1e-12))))

        store = model.store
        params = {"beta": beta,
                  "mix_w": store["decoder/mix/W"],
                  "copy_p_w": store["decoder/copy_p/w"],
                  "gen_w1": store["decoder/gen/W1"],
                  "table": store["embed/table"]}
        assert T.gradient_check(f, params, seed=3, samples_per_param=6) < 1e-4


class TestGreedyDecode:
    def test_rigged_weights_emit_eos_immediately(self):
        cfg, examples, vocab, model = tiny_model()
        enc = encode_example(examples[0], vocab, "qa", cfg.limits())
        ro = model.reader.forward(enc, EVAL_CTX)
        # push all mixture mass to generation and all generation mass to EOS
        model.decoder.mix_w.data[:] = 0.0
        model.decoder.mix_b.data[:] = [[50.0], [0.0], [0.0]]
        model.decoder.gen_w1.data[:] = 0.0
        model.decoder.gen_b1.data[:] = 1.0
        model.emb_table.data[:] = 0.0
        model.emb_table.data[EOS_ID] = 1.0
        ids, trace = greedy_decode(model.decoder, enc, ro,
                                   Tensor(np.full(2, 0.5)), EVAL_CTX,
                                   cfg.t_max, collect_trace=True)
        assert ids == []
        assert len(trace) == 1
        assert trace[0]["token"] == "<eos>"
        assert trace[0]["source"] == "gen"

    def test_budget_bounds_emitted_length(self):
        cfg, examples, vocab, model = tiny_model()
        enc = encode_example(examples[0], vocab, "nlg", cfg.limits())
        ro = model.reader.forward(enc, EVAL_CTX)
        ids, trace = greedy_decode(model.decoder, enc, ro,
                                   Tensor(np.full(2, 0.5)), EVAL_CTX, 5)
        assert len(ids) <= 5

    def test_trace_schema(self):
        cfg, examples, vocab, model = tiny_model()
        enc = encode_example(examples[0], vocab, "qa", cfg.limits())
        ro = model.reader.forward(enc, EVAL_CTX)
        ids, trace = greedy_decode(model.decoder, enc, ro,
                                   Tensor(np.array([0.9, 0.2])), EVAL_CTX,
                                   4, collect_trace=True)
        width = enc.p_ids.shape[1]
        assert len(trace) >= 1
        for i, entry in enumerate(trace):
            assert set(entry) == {"t", "token", "lambda", "top_q", "top_p", "source"}
            assert entry["t"] == i + 1
            assert len(entry["lambda"]) == 3
            assert abs(sum(entry["lambda"]) - 1.0) < 1e-9
            assert entry["source"] in ("gen", "copy_q", "copy_p")
            assert 1 <= len(entry["top_q"]) <= 3
            weights_q = [w for _, w in entry["top_q"]]
            assert weights_q == sorted(weights_q, reverse=True)
            for pos, w in entry["top_q"]:
                assert 0 <= pos < len(enc.q_ids) and w > 0
            for k, pos, w in entry["top_p"]:
                assert 0 <= k < cfg.k_passages and 0 <= pos < width and w > 0

    def test_decoding_is_deterministic(self):
        cfg, examples, vocab, model = tiny_model()
        enc = encode_example(examples[1], vocab, "nlg", cfg.limits())
        ro = model.reader.forward(enc, EVAL_CTX)
        beta = Tensor(np.array([0.5, 0.6]))
        a = greedy_decode(model.decoder, enc, ro, beta, EVAL_CTX, cfg.t_max)
        b = greedy_decode(model.decoder, enc, ro, beta, EVAL_CTX, cfg.t_max)
        assert a == b
