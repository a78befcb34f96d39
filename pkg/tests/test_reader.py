"""Reader stack: embeddings, encoder blocks, dual attention, modeling."""

import math

import numpy as np
import pytest

from masque import tensor as T
from masque.config import RunConfig
from masque.data import (SynthSpec, UNK_ID, build_vocabulary, encode_example,
                         pad_encoded, synth_corpus)
from masque.model import Masque
from masque.params import EVAL_CTX, ParamStore
from masque.reader import Embedder, EncoderBlock, dual_attention, sinusoidal_positions


def tiny_config(**kw):
    base = dict(d=16, d_word=16, heads=4, ffn_inner=32, shared_blocks=2,
                model_q_blocks=1, model_p_blocks=1, decoder_blocks=1,
                dropout=0.0, k_passages=2, j_max=6, l_max=3, t_max=10,
                common_size=64, seed=7)
    base.update(kw)
    return RunConfig(**base)


def tiny_model(**kw):
    cfg = tiny_config(**kw)
    examples = synth_corpus(SynthSpec(n=30, seed=5, k_passages=cfg.k_passages,
                                      unanswerable_frac=0.2))
    vocab = build_vocabulary(examples, cfg.common_size, cfg.styles)
    return cfg, examples, vocab, Masque(cfg, vocab)


class TestPositions:
    def test_values_match_direct_formula(self):
        pe = sinusoidal_positions(6, 8)
        assert pe.shape == (6, 8)
        for pos in range(6):
            for i in range(8):
                angle = pos / 10000 ** (2 * (i // 2) / 8)
                want = np.sin(angle) if i % 2 == 0 else np.cos(angle)
                assert abs(pe[pos, i] - want) < 1e-12

    def test_first_row_alternates_zero_one(self):
        pe = sinusoidal_positions(4, 6)
        assert np.allclose(pe[0], [0, 1, 0, 1, 0, 1])

    def test_rows_are_distinct(self):
        pe = sinusoidal_positions(50, 16)
        assert len({tuple(np.round(row, 9)) for row in pe}) == 50

    def test_cached_array_is_immutable(self):
        pe = sinusoidal_positions(5, 8)
        assert pe is sinusoidal_positions(5, 8)
        with pytest.raises(ValueError):
            pe[0, 0] = 1.0


class TestEmbedder:
    def _embedder(self, rows=10, d_word=8, d=6, drop=0.0):
        store = ParamStore(3)
        table = store.normal("table", (rows, d_word))
        return store, table, Embedder(store, "emb", table, d_word, d, drop)

    def test_output_is_feature_major(self):
        _, _, emb = self._embedder()
        out = emb(np.array([2, 3, 9]), EVAL_CTX)
        assert out.shape == (6, 3)

    def test_out_of_table_ids_fall_back_to_unk(self):
        _, _, emb = self._embedder()
        big = emb(np.array([47]), EVAL_CTX)
        unk = emb(np.array([UNK_ID]), EVAL_CTX)
        assert np.array_equal(big.data, unk.data)

    def test_gate_forced_closed_leaves_projection_of_input(self):
        store, table, emb = self._embedder()
        for layer in emb.hw:
            layer["wt"].data[:] = 0.0
            layer["bt"].data[:] = -50.0
        ids = np.array([1, 4, 7])
        out = emb(ids, EVAL_CTX)
        x0 = table.data[ids] * math.sqrt(8) + sinusoidal_positions(3, 8)
        want = (x0 @ emb.proj_w.data + emb.proj_b.data).T
        assert np.allclose(out.data, want, atol=1e-9)

    def test_position_signal_distinguishes_repeated_token(self):
        _, _, emb = self._embedder()
        out = emb(np.array([5, 5]), EVAL_CTX)
        assert not np.allclose(out.data[:, 0], out.data[:, 1])


class TestEncoderBlock:
    def test_masked_columns_do_not_leak_into_valid_ones(self):
        store = ParamStore(11)
        block = EncoderBlock(store, "blk", 8, 2, 16, 0.0)
        rng = np.random.default_rng(0)
        x1 = rng.normal(size=(8, 5))
        x2 = x1.copy()
        x2[:, 3:] = rng.normal(size=(8, 2))
        valid = np.array([True, True, True, False, False])
        y1 = block(T.Tensor(x1), valid, EVAL_CTX)
        y2 = block(T.Tensor(x2), valid, EVAL_CTX)
        assert np.array_equal(y1.data[:, :3], y2.data[:, :3])

    def test_gradients_flow_end_to_end(self):
        store = ParamStore(4)
        block = EncoderBlock(store, "blk", 4, 2, 8, 0.0)
        x = T.Tensor(np.random.default_rng(1).normal(size=(4, 3)), requires_grad=True)
        valid = np.ones(3, bool)
        probe = np.random.default_rng(2).normal(size=(4, 3))

        def f():
            return T.tsum(T.mul(block(x, valid, EVAL_CTX), probe))

        params = {"x": x, **dict(store.items())}
        worst = T.gradient_check(f, params, seed=0, samples_per_param=4)
        assert worst < 1e-4


def _masked_softmax_cols(m, row_mask):
    out = np.zeros_like(m)
    idx = np.where(row_mask)[0]
    for j in range(m.shape[1]):
        e = np.exp(m[idx, j] - m[idx, j].max())
        out[idx, j] = e / e.sum()
    return out


def _dual_oracle(w, eq, eps_, qm, pms):
    """Straight-line transcription with explicit loops, for comparison."""
    d, j_len = eq.shape
    w1, w2, w3 = w[:d], w[d:2 * d], w[2 * d:]
    g_qp, b_bars, bb_bars = [], [], []
    for ep, pm in zip(eps_, pms):
        length = ep.shape[1]
        u = np.zeros((length, j_len))
        for l in range(length):
            for j in range(j_len):
                u[l, j] = w1 @ ep[:, l] + w2 @ eq[:, j] + w3 @ (ep[:, l] * eq[:, j])
        a = _masked_softmax_cols(u.T, qm)
        b = _masked_softmax_cols(u, pm)
        a_bar = eq @ a
        b_bar = ep @ b
        aa_bar = b_bar @ a
        bb_bar = a_bar @ b
        g_qp.append(np.concatenate([ep, a_bar, aa_bar, ep * a_bar, ep * aa_bar]))
        b_bars.append(b_bar)
        bb_bars.append(bb_bar)
    b_max = np.maximum.reduce(b_bars)
    bb_max = np.maximum.reduce(bb_bars)
    g_pq = np.concatenate([eq, b_max, bb_max, eq * b_max, eq * bb_max])
    return g_qp, g_pq


class TestDualAttention:
    def test_matches_loop_oracle_on_random_cases(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            d = int(rng.integers(2, 9))
            j_len = int(rng.integers(1, 6))
            k = int(rng.integers(1, 4))
            widths = [int(rng.integers(1, 7)) for _ in range(k)]
            w = rng.normal(size=3 * d)
            eq = rng.normal(size=(d, j_len))
            eps_ = [rng.normal(size=(d, L)) for L in widths]
            qm = np.ones(j_len, bool)
            if j_len > 1:
                qm[rng.integers(1, j_len):] = False
            pms = []
            for L in widths:
                m = np.ones(L, bool)
                if L > 1:
                    m[rng.integers(1, L):] = False
                pms.append(m)
            got_qp, got_pq = dual_attention(
                T.Tensor(w), T.Tensor(eq), [T.Tensor(e) for e in eps_], qm, pms)
            want_qp, want_pq = _dual_oracle(w, eq, eps_, qm, pms)
            for g, wv in zip(got_qp, want_qp):
                assert np.allclose(g.data, wv, atol=1e-12)
            assert np.allclose(got_pq.data, want_pq, atol=1e-12)

    def test_fused_shapes(self):
        rng = np.random.default_rng(3)
        d, j_len, length, k = 8, 3, 4, 2
        g_qp, g_pq = dual_attention(
            T.Tensor(rng.normal(size=3 * d)), T.Tensor(rng.normal(size=(d, j_len))),
            [T.Tensor(rng.normal(size=(d, length))) for _ in range(k)],
            np.ones(j_len, bool), [np.ones(length, bool)] * k)
        assert [g.shape for g in g_qp] == [(40, 4), (40, 4)]
        assert g_pq.shape == (40, 3)

    def test_gradients_flow_end_to_end(self):
        rng = np.random.default_rng(7)
        d = 3
        w = T.Tensor(rng.normal(size=3 * d), requires_grad=True)
        eq = T.Tensor(rng.normal(size=(d, 2)), requires_grad=True)
        eps_ = [T.Tensor(rng.normal(size=(d, 3)), requires_grad=True) for _ in range(2)]
        probe_qp = [rng.normal(size=(5 * d, 3)) for _ in range(2)]
        probe_pq = rng.normal(size=(5 * d, 2))
        qm = np.ones(2, bool)
        pms = [np.ones(3, bool)] * 2

        def f():
            g_qp, g_pq = dual_attention(w, eq, eps_, qm, pms)
            acc = T.tsum(T.mul(g_pq, probe_pq))
            for g, p in zip(g_qp, probe_qp):
                acc = T.add(acc, T.tsum(T.mul(g, p)))
            return acc

        params = {"w": w, "eq": eq, "ep0": eps_[0], "ep1": eps_[1]}
        worst = T.gradient_check(f, params, seed=1, samples_per_param=6)
        assert worst < 1e-4


class TestReader:
    def test_output_contract(self):
        cfg, examples, vocab, model = tiny_model()
        enc = encode_example(examples[0], vocab, "qa", cfg.limits())
        ro = model.reader.forward(enc, EVAL_CTX)
        j_len = len(enc.q_ids)
        width = enc.p_ids.shape[1]
        assert ro.m_q.shape == (cfg.d, j_len)
        assert all(m.shape == (cfg.d, width) for m in ro.m_ps)
        assert ro.m_p_all.shape == (cfg.d, cfg.k_passages * width)
        assert width == 4  # BOS plus l_max tokens
        assert list(ro.k_of_l) == [0, 0, 0, 0, 1, 1, 1, 1]
        assert ro.p_mask_flat.shape == (cfg.k_passages * width,)

    def test_ignores_answer_style(self):
        cfg, examples, vocab, model = tiny_model()
        ex = examples[0]
        ro_a = model.reader.forward(encode_example(ex, vocab, "qa", cfg.limits()), EVAL_CTX)
        ro_b = model.reader.forward(encode_example(ex, vocab, "nlg", cfg.limits()), EVAL_CTX)
        assert np.array_equal(ro_a.m_q.data, ro_b.m_q.data)
        assert np.array_equal(ro_a.m_p_all.data, ro_b.m_p_all.data)

    def test_padding_does_not_change_real_columns(self):
        cfg, examples, vocab, model = tiny_model()
        enc = encode_example(examples[0], vocab, "qa", cfg.limits())
        j_len = len(enc.q_ids)
        width = enc.p_ids.shape[1]
        padded = pad_encoded(enc, j_len + 3, width + 2, len(enc.target))
        ro = model.reader.forward(enc, EVAL_CTX)
        rp = model.reader.forward(padded, EVAL_CTX)
        assert np.allclose(ro.m_q.data, rp.m_q.data[:, :j_len], atol=1e-9)
        for m, mp in zip(ro.m_ps, rp.m_ps):
            assert np.allclose(m.data, mp.data[:, :width], atol=1e-9)

    def test_same_input_same_output(self):
        cfg, examples, vocab, model = tiny_model()
        enc = encode_example(examples[1], vocab, "nlg", cfg.limits())
        a = model.reader.forward(enc, EVAL_CTX)
        b = model.reader.forward(enc, EVAL_CTX)
        assert np.array_equal(a.m_p_all.data, b.m_p_all.data)
