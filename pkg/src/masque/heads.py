"""Passage ranker and answerability classifier.

Both heads read only the BOS column of each passage's modeling
representation: the ranker scores passages independently, the classifier
sees all K BOS columns at once. Neither has a bias term.
"""

from __future__ import annotations

from . import tensor as T
from .config import ConfigError
from .reader import ReaderOutput
from .tensor import Tensor


def rank_passages(reader_out: ReaderOutput, w_r: Tensor) -> Tensor:
    """Per-passage relevance probabilities, shape (K,)."""
    firsts = T.concat([T.slice_axis(m, 1, 0, 1) for m in reader_out.m_ps], axis=1)
    return T.sigmoid(T.contract_first(w_r, firsts))


def classify_answerability(reader_out: ReaderOutput, w_c: Tensor) -> Tensor:
    """Scalar probability that the question is answerable from the passages."""
    k = len(reader_out.m_ps)
    d = reader_out.m_ps[0].shape[0]
    if w_c.shape != (k * d,):
        raise ConfigError(f"classifier weight expects {w_c.shape[0]} features, "
                          f"reader produced {k} passages of width {d}")
    stacked = T.concat([T.slice_axis(m, 1, 0, 1) for m in reader_out.m_ps], axis=0)
    logit = T.contract_first(w_c, stacked)     # (1,)
    return T.sigmoid(T.reshape(logit, ()))
