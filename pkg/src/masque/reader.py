"""Reader: shared source encoding, dual attention, modeling encoders.

Activations are feature-major, shape (d, n) for a length-n sequence.
Transformer blocks carry no positional information of their own; fixed
sinusoidal encodings are added once at the embedding layer. Every residual
sub-layer computes LN(dropout(f(x)) + x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .data import UNK_ID, EncodedExample
from .params import ParamStore, RunCtx
from .tensor import Tensor


@lru_cache(maxsize=128)
def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed position signal, shape (n, d): sin on even dims, cos on odd."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    dim = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(dim / 2.0) / d)
    out = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    out.setflags(write=False)
    return out


class ColLinear:
    """y = W x + b on feature-major activations."""

    def __init__(self, store: ParamStore, name: str, d_out: int, d_in: int):
        self.w = store.normal(f"{name}/W", (d_out, d_in))
        self.b = store.zeros(f"{name}/b", (d_out, 1))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(self.w, x), self.b)


class MultiHeadAttention:
    def __init__(self, store: ParamStore, name: str, d: int, heads: int, drop: float):
        self.heads = heads
        self.scale = 1.0 / math.sqrt(d // heads)
        self.drop = drop
        self.wq = ColLinear(store, f"{name}/q", d, d)
        self.wk = ColLinear(store, f"{name}/k", d, d)
        self.wv = ColLinear(store, f"{name}/v", d, d)
        self.wo = ColLinear(store, f"{name}/o", d, d)

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray, ctx: RunCtx) -> Tensor:
        q = self.wq(x_q)
        k = self.wk(x_kv)
        v = self.wv(x_kv)
        scores = T.mha_scores(q, k, self.heads, self.scale)
        attn = T.softmax_axis(scores, axis=2, mask=mask[None, :, :])
        attn = T.dropout(attn, self.drop, ctx.training, ctx.drop_seed())
        return self.wo(T.mha_context(attn, v))


class FeedForward:
    def __init__(self, store: ParamStore, name: str, d: int, inner: int):
        self.lin1 = ColLinear(store, f"{name}/1", inner, d)
        self.lin2 = ColLinear(store, f"{name}/2", d, inner)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.gelu(self.lin1(x)))


class SubLayer:
    """Residual wrapper: LN(dropout(branch) + x), norm over features."""

    def __init__(self, store: ParamStore, name: str, d: int, drop: float):
        self.gain = store.ones(f"{name}/gain", (d,))
        self.bias = store.zeros(f"{name}/bias", (d,))
        self.drop = drop

    def __call__(self, x: Tensor, branch: Tensor, ctx: RunCtx) -> Tensor:
        mixed = T.add(T.dropout(branch, self.drop, ctx.training, ctx.drop_seed()), x)
        return T.transpose(T.layer_norm(T.transpose(mixed), self.gain, self.bias))


class EncoderBlock:
    def __init__(self, store: ParamStore, name: str, d: int, heads: int,
                 ffn_inner: int, drop: float):
        self.attn = MultiHeadAttention(store, f"{name}/attn", d, heads, drop)
        self.ln1 = SubLayer(store, f"{name}/ln1", d, drop)
        self.ffn = FeedForward(store, f"{name}/ffn", d, ffn_inner)
        self.ln2 = SubLayer(store, f"{name}/ln2", d, drop)

    def __call__(self, x: Tensor, valid: np.ndarray, ctx: RunCtx) -> Tensor:
        n = x.shape[1]
        mask = np.broadcast_to(np.asarray(valid, bool)[None, :], (n, n))
        x = self.ln1(x, self.attn(x, x, mask, ctx), ctx)
        x = self.ln2(x, self.ffn(x), ctx)
        return x


class Embedder:
    """Token embedding + positions + two highway layers + projection to d.

    The embedding table is owned by the caller so the decoder can share it.
    Extended-vocabulary ids have no embedding row and fall back to UNK.
    """

    def __init__(self, store: ParamStore, name: str, table: Tensor,
                 d_word: int, d: int, drop: float):
        self.table = table
        self.drop = drop
        self.hw = []
        for i in range(2):
            self.hw.append({
                "wt": store.normal(f"{name}/hw{i}/Wt", (d_word, d_word)),
                "bt": store.zeros(f"{name}/hw{i}/bt", (d_word,)),
                "wh": store.normal(f"{name}/hw{i}/Wh", (d_word, d_word)),
                "bh": store.zeros(f"{name}/hw{i}/bh", (d_word,)),
            })
        self.proj_w = store.normal(f"{name}/proj/W", (d_word, d))
        self.proj_b = store.zeros(f"{name}/proj/b", (d,))

    def __call__(self, ids: np.ndarray, ctx: RunCtx) -> Tensor:
        vocab_rows = self.table.shape[0]
        ids = np.asarray(ids, dtype=np.int64)
        ids = np.where(ids >= vocab_rows, UNK_ID, ids)
        x = T.gather_rows(self.table, ids)                       # (n, d_word)
        # scale up before adding positions, else the O(1) sinusoids drown
        # the N(0, 0.02) rows and token identity never reaches the blocks
        x = T.mul(x, math.sqrt(self.table.shape[1]))
        x = T.add(x, sinusoidal_positions(len(ids), self.table.shape[1]))
        for layer in self.hw:
            gate = T.sigmoid(T.add(T.matmul(x, layer["wt"]), layer["bt"]))
            carry = T.gelu(T.add(T.matmul(x, layer["wh"]), layer["bh"]))
            x = T.add(T.mul(gate, carry), T.mul(T.sub(1.0, gate), x))
        x = T.dropout(x, self.drop, ctx.training, ctx.drop_seed())
        x = T.add(T.matmul(x, self.proj_w), self.proj_b)         # (n, d)
        return T.transpose(x)


def dual_attention(w_a: Tensor, e_q: Tensor, e_ps: list[Tensor],
                   q_mask: np.ndarray, p_masks: list[np.ndarray]
                   ) -> tuple[list[Tensor], Tensor]:
    """Fuse question and passages both ways.

    For passage k with similarity U (L, J): A = softmax over the question
    axis of U^T, B = softmax over the passage axis of U. Passage-side
    representations stay per passage; the question side takes an elementwise
    max over passages before concatenation.

    Returns ([G_q_to_p per passage] each (5d, L), G_p_to_q (5d, J)).
    """
    d = e_q.shape[0]
    j = e_q.shape[1]
    w1 = T.slice_axis(w_a, 0, 0, d)
    w2 = T.slice_axis(w_a, 0, d, 2 * d)
    w3 = T.slice_axis(w_a, 0, 2 * d, 3 * d)
    term_q = T.reshape(T.contract_first(w2, e_q), (1, j))
    q_mask2 = np.asarray(q_mask, bool)[:, None]

    g_qp: list[Tensor] = []
    a_mats: list[Tensor] = []
    b_bars: list[Tensor] = []
    bb_bars: list[Tensor] = []
    for e_p, p_mask in zip(e_ps, p_masks):
        length = e_p.shape[1]
        term_p = T.reshape(T.contract_first(w1, e_p), (length, 1))
        cross = T.matmul(T.transpose(T.mul(e_p, T.reshape(w3, (d, 1)))), e_q)
        u = T.add(T.add(cross, term_p), term_q)                  # (L, J)
        a = T.softmax_axis(T.transpose(u), axis=0, mask=np.broadcast_to(q_mask2, (j, length)))
        b = T.softmax_axis(u, axis=0,
                           mask=np.broadcast_to(np.asarray(p_mask, bool)[:, None], (length, j)))
        a_bar = T.matmul(e_q, a)                                 # (d, L)
        b_bar = T.matmul(e_p, b)                                 # (d, J)
        aa_bar = T.matmul(b_bar, a)                              # (d, L)
        bb_bar = T.matmul(a_bar, b)                              # (d, J)
        g_qp.append(T.concat([e_p, a_bar, aa_bar, T.mul(e_p, a_bar),
                              T.mul(e_p, aa_bar)], axis=0))
        a_mats.append(a)
        b_bars.append(b_bar)
        bb_bars.append(bb_bar)

    b_max = b_bars[0]
    bb_max = bb_bars[0]
    for k in range(1, len(e_ps)):
        b_max = T.maximum(b_max, b_bars[k])
        bb_max = T.maximum(bb_max, bb_bars[k])
    g_pq = T.concat([e_q, b_max, bb_max, T.mul(e_q, b_max), T.mul(e_q, bb_max)], axis=0)
    return g_qp, g_pq


@dataclass
class ReaderOutput:
    m_q: Tensor                 # (d, J)
    m_ps: list                  # K tensors, each (d, L)
    m_p_all: Tensor             # (d, K*L)
    k_of_l: np.ndarray          # (K*L,) passage index per concatenated column
    q_mask: np.ndarray          # (J,) bool
    p_masks: np.ndarray         # (K, L) bool
    p_mask_flat: np.ndarray     # (K*L,) bool


class Reader:
    def __init__(self, store: ParamStore, cfg, table: Tensor):
        self.cfg = cfg
        self.embed = Embedder(store, "reader/embed", table, cfg.d_word, cfg.d,
                              cfg.dropout)
        self.shared = [EncoderBlock(store, f"reader/shared/{i}", cfg.d, cfg.heads,
                                    cfg.ffn_inner, cfg.dropout)
                       for i in range(cfg.shared_blocks)]
        self.w_a = store.normal("reader/dual/w_a", (3 * cfg.d,))
        self.proj_q = ColLinear(store, "reader/model_q/proj", cfg.d, 5 * cfg.d)
        self.proj_p = ColLinear(store, "reader/model_p/proj", cfg.d, 5 * cfg.d)
        self.blocks_q = [EncoderBlock(store, f"reader/model_q/{i}", cfg.d, cfg.heads,
                                      cfg.ffn_inner, cfg.dropout)
                         for i in range(cfg.model_q_blocks)]
        self.blocks_p = [EncoderBlock(store, f"reader/model_p/{i}", cfg.d, cfg.heads,
                                      cfg.ffn_inner, cfg.dropout)
                         for i in range(cfg.model_p_blocks)]

    def shared_encode(self, ids: np.ndarray, valid: np.ndarray, ctx: RunCtx) -> Tensor:
        x = self.embed(ids, ctx)
        for block in self.shared:
            x = block(x, valid, ctx)
        return x

    def forward(self, enc: EncodedExample, ctx: RunCtx) -> ReaderOutput:
        e_q = self.shared_encode(enc.q_ids, enc.q_mask, ctx)
        e_ps = [self.shared_encode(enc.p_ids[k], enc.p_mask[k], ctx)
                for k in range(enc.p_ids.shape[0])]
        g_qps, g_pq = dual_attention(self.w_a, e_q, e_ps, enc.q_mask,
                                     [enc.p_mask[k] for k in range(enc.p_mask.shape[0])])
        m_q = self.proj_q(g_pq)
        for block in self.blocks_q:
            m_q = block(m_q, enc.q_mask, ctx)
        m_ps = []
        for k, g in enumerate(g_qps):
            m = self.proj_p(g)
            for block in self.blocks_p:
                m = block(m, enc.p_mask[k], ctx)
            m_ps.append(m)
        k_count, width = enc.p_mask.shape
        return ReaderOutput(
            m_q=m_q, m_ps=m_ps, m_p_all=T.concat(m_ps, axis=1),
            k_of_l=np.repeat(np.arange(k_count), width),
            q_mask=np.asarray(enc.q_mask, bool),
            p_masks=np.asarray(enc.p_mask, bool),
            p_mask_flat=np.asarray(enc.p_mask, bool).reshape(-1))
