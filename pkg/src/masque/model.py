"""Full model: reader, ranker, answerability classifier, decoder.

One parameter store holds every weight; the embedding table is registered
first and shared by the reader, the decoder input, and the decoder's
generation head. Construction order fixes initialization, so two models
built from the same config, vocabulary, and seed are identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import RunConfig
from .data import EncodedExample, Vocabulary
from .decoder import Decoder, PointerOutput, greedy_decode
from .heads import classify_answerability, rank_passages
from .params import EVAL_CTX, ParamStore, RunCtx
from .reader import Reader, ReaderOutput
from .tensor import Tensor


@dataclass
class ExampleOutput:
    enc: EncodedExample
    reader_out: ReaderOutput
    beta: Tensor                      # (K,) passage relevance
    p_answerable: Tensor              # scalar
    pointer: Optional[PointerOutput]  # teacher-forced steps; None when skipped


@dataclass
class DecodedAnswer:
    query_id: str
    style: str
    tokens: list[str]
    p_answerable: float
    beta: list[float]
    trace: list[dict]


class Masque:
    def __init__(self, cfg: RunConfig, vocab: Vocabulary):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        self.store = ParamStore(cfg.seed)
        self.emb_table = self.store.normal("embed/table", (vocab.size, cfg.d_word))
        self.reader = Reader(self.store, cfg, self.emb_table)
        self.decoder = Decoder(self.store, cfg, self.emb_table)
        self.w_r = self.store.normal("heads/w_r", (cfg.d,))
        self.w_c = self.store.normal("heads/w_c", (cfg.k_passages * cfg.d,))

    def forward_example(self, enc: EncodedExample, ctx: RunCtx,
                        with_decoder: bool = True) -> ExampleOutput:
        ro = self.reader.forward(enc, ctx)
        beta = rank_passages(ro, self.w_r)
        p_a = classify_answerability(ro, self.w_c)
        pointer = None
        if with_decoder and enc.answerable:
            pointer = self.decoder.decode_teacher(enc, ro, beta, ctx)
        return ExampleOutput(enc=enc, reader_out=ro, beta=beta,
                             p_answerable=p_a, pointer=pointer)

    def greedy(self, enc: EncodedExample, gold_ranker: bool = False,
               collect_trace: bool = False) -> DecodedAnswer:
        """Greedy decoding in evaluation mode (no dropout)."""
        ctx = EVAL_CTX
        ro = self.reader.forward(enc, ctx)
        beta = rank_passages(ro, self.w_r)
        p_a = classify_answerability(ro, self.w_c)
        used = Tensor(enc.rel.astype(np.float64)) if gold_ranker else beta
        ids, trace = greedy_decode(self.decoder, enc, ro, used, ctx,
                                   self.cfg.t_max, collect_trace=collect_trace)
        return DecodedAnswer(
            query_id=enc.query_id, style=enc.style,
            tokens=[enc.ext.token_of(i) for i in ids],
            p_answerable=p_a.item(),
            beta=[float(x) for x in beta.data], trace=trace)

    def apply_word_vectors(self, vectors: dict[str, np.ndarray]) -> int:
        """Overwrite embedding rows for known tokens; returns the hit count."""
        hits = 0
        for token, vec in vectors.items():
            idx = self.vocab.token_to_id.get(token)
            if idx is None:
                continue
            if vec.shape != (self.cfg.d_word,):
                raise ValueError(f"vector for '{token}' has shape {vec.shape}, "
                                 f"expected ({self.cfg.d_word},)")
            self.emb_table.data[idx] = vec
            hits += 1
        return hits
