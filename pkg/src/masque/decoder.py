"""Style-conditioned decoder with a multi-source pointer-generator.

The transformer stack attends over the question and over the concatenation
of all passages; the output layer mixes a generation distribution over the
fixed vocabulary with copy distributions over question and passage tokens,
all expressed in the example's extended vocabulary. Passage copy weights
are modulated by the ranker's relevance probabilities and renormalized so
they stay a distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import EOS_ID, EncodedExample
from .params import ParamStore, RunCtx
from .reader import ColLinear, Embedder, FeedForward, MultiHeadAttention, ReaderOutput, SubLayer
from .tensor import Tensor

COMBINE_EPS = 1e-12


class DecoderBlock:
    """Masked self-attention, question attention, passage attention, FFN."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int,
                 ffn_inner: int, drop: float):
        self.self_attn = MultiHeadAttention(store, f"{name}/self", d, heads, drop)
        self.ln1 = SubLayer(store, f"{name}/ln1", d, drop)
        self.attn_q = MultiHeadAttention(store, f"{name}/src_q", d, heads, drop)
        self.ln2 = SubLayer(store, f"{name}/ln2", d, drop)
        self.attn_p = MultiHeadAttention(store, f"{name}/src_p", d, heads, drop)
        self.ln3 = SubLayer(store, f"{name}/ln3", d, drop)
        self.ffn = FeedForward(store, f"{name}/ffn", d, ffn_inner)
        self.ln4 = SubLayer(store, f"{name}/ln4", d, drop)

    def __call__(self, x: Tensor, reader_out: ReaderOutput, causal: np.ndarray,
                 ctx: RunCtx) -> Tensor:
        t = x.shape[1]
        x = self.ln1(x, self.self_attn(x, x, causal, ctx), ctx)
        mask_q = np.broadcast_to(reader_out.q_mask[None, :], (t, reader_out.q_mask.shape[0]))
        x = self.ln2(x, self.attn_q(x, reader_out.m_q, mask_q, ctx), ctx)
        mask_p = np.broadcast_to(reader_out.p_mask_flat[None, :],
                                 (t, reader_out.p_mask_flat.shape[0]))
        x = self.ln3(x, self.attn_p(x, reader_out.m_p_all, mask_p, ctx), ctx)
        x = self.ln4(x, self.ffn(x), ctx)
        return x


def combined_passage_attention(alpha: Tensor, beta: Tensor, k_of_l: np.ndarray) -> Tensor:
    """Scale copy weights by their passage's relevance and renormalize.

    alpha is (K*L, T) column-normalized; beta is (K,). The denominator is
    floored at a tiny epsilon so an all-irrelevant ranking cannot divide by
    zero; when every beta is equal the result equals alpha.
    """
    slots = T.reshape(T.take(beta, k_of_l), (alpha.shape[0], 1))
    weighted = T.mul(alpha, slots)
    denom = T.clamp(T.tsum(weighted, axis=0, keepdims=True), lo=COMBINE_EPS)
    return T.div(weighted, denom)


def final_distribution(p_vocab: Tensor, lam: Tensor, alpha_q: Tensor,
                       q_ext: np.ndarray, alpha_p: Tensor, p_ext: np.ndarray,
                       ext_size: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Mix generation and copy mass in the extended vocabulary.

    Returns (mixture, padded generation, question copy, passage copy), each
    (ext_size, T); the last three are the unweighted components.
    """
    v, t = p_vocab.shape
    n_ext = ext_size - v
    if n_ext < 0:
        raise T.ShapeError(f"ext_size {ext_size} smaller than vocabulary {v}")
    if n_ext:
        p_vx = T.concat([p_vocab, T.Tensor(np.zeros((n_ext, t)))], axis=0)
    else:
        p_vx = p_vocab
    zeros = np.zeros((ext_size, t))
    p_q = T.scatter_add_cols(T.Tensor(zeros), q_ext, alpha_q)
    p_p = T.scatter_add_cols(T.Tensor(zeros), p_ext, alpha_p)
    lam_v = T.slice_axis(lam, 0, 0, 1)
    lam_q = T.slice_axis(lam, 0, 1, 2)
    lam_p = T.slice_axis(lam, 0, 2, 3)
    mix = T.add(T.add(T.mul(p_vx, lam_v), T.mul(p_q, lam_q)), T.mul(p_p, lam_p))
    return mix, p_vx, p_q, p_p


@dataclass
class PointerOutput:
    dist: Tensor       # (ext_size, T) final distribution per step
    lam: Tensor        # (3, T) mixture weights: generate, copy-q, copy-p
    alpha_q: Tensor    # (J, T)
    alpha_p: Tensor    # (K*L, T) after relevance combination
    p_vx: Tensor       # (ext_size, T) generation component
    p_q: Tensor        # (ext_size, T) question copy component
    p_p: Tensor        # (ext_size, T) passage copy component


class Decoder:
    def __init__(self, store: ParamStore, cfg, table: Tensor):
        self.cfg = cfg
        self.table = table
        self.embed = Embedder(store, "decoder/embed", table, cfg.d_word, cfg.d,
                              cfg.dropout)
        self.blocks = [DecoderBlock(store, f"decoder/block/{i}", cfg.d, cfg.heads,
                                    cfg.ffn_inner, cfg.dropout)
                       for i in range(cfg.decoder_blocks)]
        self.gen_w1 = store.normal("decoder/gen/W1", (cfg.d_word, cfg.d))
        self.gen_b1 = store.zeros("decoder/gen/b1", (cfg.d_word, 1))
        self.copy_q = self._copy_params(store, "decoder/copy_q", cfg.d)
        self.copy_p = self._copy_params(store, "decoder/copy_p", cfg.d)
        self.mix_w = store.normal("decoder/mix/W", (3, 3 * cfg.d))
        self.mix_b = store.zeros("decoder/mix/b", (3, 1))

    @staticmethod
    def _copy_params(store: ParamStore, name: str, d: int) -> dict:
        return {
            "wm": store.normal(f"{name}/Wm", (d, d)),
            "ws": store.normal(f"{name}/Ws", (d, d)),
            "b": store.zeros(f"{name}/b", (d, 1)),
            "w": store.normal(f"{name}/w", (d,)),
        }

    def states(self, input_ids: np.ndarray, reader_out: ReaderOutput,
               ctx: RunCtx) -> Tensor:
        """Run the stack over a (possibly partial) target prefix -> (d, T)."""
        t = len(input_ids)
        x = self.embed(input_ids, ctx)
        causal = np.tril(np.ones((t, t), dtype=bool))
        for block in self.blocks:
            x = block(x, reader_out, causal, ctx)
        return x

    def _copy_attention(self, params: dict, s: Tensor, memory: Tensor,
                        key_valid: np.ndarray) -> Tensor:
        """Additive attention scores for every (slot, step) pair -> (L, T)."""
        length = memory.shape[1]
        t = s.shape[1]
        d = memory.shape[0]
        pm = T.matmul(params["wm"], memory)                     # (d, L)
        ps = T.add(T.matmul(params["ws"], s), params["b"])      # (d, T)
        scores3 = T.tanh(T.add(T.reshape(pm, (d, length, 1)), T.reshape(ps, (d, 1, t))))
        e = T.contract_first(params["w"], scores3)              # (L, T)
        mask = np.broadcast_to(np.asarray(key_valid, bool)[:, None], (length, t))
        return T.softmax_axis(e, axis=0, mask=mask)

    def pointer_generator(self, s: Tensor, reader_out: ReaderOutput,
                          beta: Tensor, enc: EncodedExample) -> PointerOutput:
        alpha_q = self._copy_attention(self.copy_q, s, reader_out.m_q,
                                       reader_out.q_mask)
        alpha_p_raw = self._copy_attention(self.copy_p, s, reader_out.m_p_all,
                                           reader_out.p_mask_flat)
        alpha_p = combined_passage_attention(alpha_p_raw, beta, reader_out.k_of_l)
        c_q = T.matmul(reader_out.m_q, alpha_q)                 # (d, T)
        c_p = T.matmul(reader_out.m_p_all, alpha_p)             # (d, T)
        feats = T.concat([s, c_q, c_p], axis=0)
        lam = T.softmax_axis(T.add(T.matmul(self.mix_w, feats), self.mix_b), axis=0)
        hidden = T.add(T.matmul(self.gen_w1, s), self.gen_b1)   # (d_word, T)
        p_vocab = T.softmax_axis(T.matmul(self.table, hidden), axis=0)
        dist, p_vx, p_q, p_p = final_distribution(
            p_vocab, lam, alpha_q, enc.q_ext, alpha_p,
            enc.p_ext.reshape(-1), enc.ext_size)
        return PointerOutput(dist=dist, lam=lam, alpha_q=alpha_q, alpha_p=alpha_p,
                             p_vx=p_vx, p_q=p_q, p_p=p_p)

    def decode_teacher(self, enc: EncodedExample, reader_out: ReaderOutput,
                       beta: Tensor, ctx: RunCtx) -> PointerOutput:
        """Teacher-forced pass over the stored target; step t predicts target[t+1]."""
        s = self.states(enc.target[:-1], reader_out, ctx)
        return self.pointer_generator(s, reader_out, beta, enc)


_SOURCES = ("gen", "copy_q", "copy_p")


def greedy_decode(decoder: Decoder, enc: EncodedExample, reader_out: ReaderOutput,
                  beta: Tensor, ctx: RunCtx, t_max: int,
                  collect_trace: bool = False, top_k: int = 3
                  ) -> tuple[list[int], list[dict]]:
    """Argmax decoding from the style token until EOS or the step budget.

    Ties take the lowest id. The style token is input only: emitted ids
    start with the first answer token. The trace records one entry per
    step, EOS included, with mixture weights and top copy positions.
    """
    prefix = [enc.target[0]]
    emitted: list[int] = []
    trace: list[dict] = []
    width = enc.p_mask.shape[1]
    for step in range(1, t_max + 1):
        s = decoder.states(np.asarray(prefix, dtype=np.int64), reader_out, ctx)
        po = decoder.pointer_generator(s, reader_out, beta, enc)
        dist = po.dist.data[:, -1]
        chosen = int(np.argmax(dist))
        if collect_trace:
            lam = po.lam.data[:, -1]
            contrib = np.array([lam[0] * po.p_vx.data[chosen, -1],
                                lam[1] * po.p_q.data[chosen, -1],
                                lam[2] * po.p_p.data[chosen, -1]])
            aq = po.alpha_q.data[:, -1]
            ap = po.alpha_p.data[:, -1]
            top_q = [[int(j), float(aq[j])]
                     for j in np.argsort(-aq)[:top_k] if aq[j] > 0.0]
            top_p = [[int(l // width), int(l % width), float(ap[l])]
                     for l in np.argsort(-ap)[:top_k] if ap[l] > 0.0]
            trace.append({
                "t": step,
                "token": enc.ext.token_of(chosen),
                "lambda": [float(x) for x in lam],
                "top_q": top_q,
                "top_p": top_p,
                "source": _SOURCES[int(np.argmax(contrib))],
            })
        if chosen == EOS_ID:
            break
        emitted.append(chosen)
        prefix.append(chosen)
    return emitted, trace
