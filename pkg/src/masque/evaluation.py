"""Metrics: ROUGE-L, corpus BLEU-1, MAP/MRR, PR curve, decode reports."""

from __future__ import annotations

import math
import string
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import DataError, tokenize

_PUNCT_ONLY = set(string.punctuation)


@dataclass(frozen=True)
class EvalPair:
    query_id: str
    predicted: str
    references: tuple
    style: str


@dataclass(frozen=True)
class RankingJudgment:
    query_id: str
    scores: tuple       # K floats
    relevance: tuple    # K 0/1 marks

    def __post_init__(self):
        if len(self.scores) != len(self.relevance):
            raise DataError(f"{self.query_id}: {len(self.scores)} scores vs "
                            f"{len(self.relevance)} relevance marks")


def _norm_tokens(text: str, strip_punct: bool) -> list[str]:
    toks = tokenize(text)
    if strip_punct:
        toks = [t for t in toks if not all(c in _PUNCT_ONLY for c in t)]
    return toks


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pred: str, refs: Sequence[str], beta: float = 1.2,
            strip_punct: bool = False) -> float:
    """LCS F-measure, max over references; empty prediction scores 0."""
    p_toks = _norm_tokens(pred, strip_punct)
    if not p_toks:
        return 0.0
    best = 0.0
    for ref in refs:
        r_toks = _norm_tokens(ref, strip_punct)
        if not r_toks:
            continue
        lcs = _lcs_len(p_toks, r_toks)
        if lcs == 0:
            continue
        rec = lcs / len(r_toks)
        prec = lcs / len(p_toks)
        f = (1 + beta * beta) * rec * prec / (rec + beta * beta * prec)
        best = max(best, f)
    return best


def corpus_rouge_l(pairs: Sequence[EvalPair], strip_punct: bool = False) -> float:
    if not pairs:
        raise DataError("rouge over an empty corpus")
    return sum(rouge_l(p.predicted, p.references, strip_punct=strip_punct)
               for p in pairs) / len(pairs)


def bleu_1(pairs: Sequence[EvalPair], strip_punct: bool = False) -> float:
    """Corpus-level unigram BLEU: clipped precision times brevity penalty.

    The effective reference length per pair is the reference closest in
    length to the prediction, shorter on ties.
    """
    if not pairs:
        raise DataError("bleu over an empty corpus")
    matched = 0
    cand_len = 0
    ref_len = 0
    for pair in pairs:
        p_toks = _norm_tokens(pair.predicted, strip_punct)
        ref_toks = [_norm_tokens(r, strip_punct) for r in pair.references]
        ref_toks = [r for r in ref_toks if r]
        if not ref_toks:
            continue
        cand_len += len(p_toks)
        ref_len += min((abs(len(r) - len(p_toks)), len(r)) for r in ref_toks)[1]
        counts: dict[str, int] = {}
        for t in p_toks:
            counts[t] = counts.get(t, 0) + 1
        for tok, n in counts.items():
            cap = max(r.count(tok) for r in ref_toks)
            matched += min(n, cap)
    if cand_len == 0:
        return 0.0
    precision = matched / cand_len
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * precision


def _ranked_indices(scores: Sequence[float]) -> list[int]:
    # descending score, ties broken toward the lower passage index
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def map_mrr(judgments: Sequence[RankingJudgment]) -> tuple[float, float]:
    """Mean average precision and mean reciprocal rank over queries that
    have at least one relevant passage; others are excluded."""
    aps = []
    rrs = []
    for j in judgments:
        if not any(j.relevance):
            continue
        order = _ranked_indices(j.scores)
        hits = 0
        precisions = []
        rr = 0.0
        for rank, idx in enumerate(order, 1):
            if j.relevance[idx]:
                hits += 1
                precisions.append(hits / rank)
                if rr == 0.0:
                    rr = 1.0 / rank
        aps.append(sum(precisions) / len(precisions))
        rrs.append(rr)
    if not aps:
        return 0.0, 0.0
    return sum(aps) / len(aps), sum(rrs) / len(rrs)


@dataclass
class PRResult:
    points: list      # (threshold, precision, recall), undefined points dropped
    max_f1: float
    threshold: float  # F1-maximizing threshold, ties toward the higher one
    dropped: int      # thresholds with no predicted positives


def pr_curve_max_f1(probabilities: Sequence[float],
                    labels: Sequence[int]) -> PRResult:
    """Sweep a decision threshold over every distinct probability."""
    if len(probabilities) != len(labels):
        raise DataError(f"{len(probabilities)} probabilities vs "
                        f"{len(labels)} labels")
    if any(l not in (0, 1) for l in labels):
        raise DataError("labels must be 0 or 1")
    total_pos = sum(labels)
    points = []
    dropped = 0
    best_f1 = 0.0
    best_thr = float("inf")
    for thr in sorted(set(probabilities), reverse=True):
        tp = sum(1 for p, l in zip(probabilities, labels) if p >= thr and l == 1)
        fp = sum(1 for p, l in zip(probabilities, labels) if p >= thr and l == 0)
        if tp + fp == 0:
            dropped += 1
            continue
        precision = tp / (tp + fp)
        recall = tp / total_pos if total_pos else 0.0
        points.append((thr, precision, recall))
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        # strictly-greater keeps the higher threshold on ties (descending sweep)
        if f1 > best_f1:
            best_f1 = f1
            best_thr = thr
    if not points:
        best_thr = max(probabilities) if probabilities else 0.0
    return PRResult(points=points, max_f1=best_f1, threshold=best_thr,
                    dropped=dropped)


def short_answer_copy_rate(pairs: Sequence[EvalPair]) -> Optional[float]:
    """Fraction of predictions containing their single-token gold answer.

    Pairs without a single-token reference are skipped; returns None when
    nothing qualifies. A high rate requires actually copying the token:
    for out-of-vocabulary answers generation alone cannot produce it.
    """
    hits = 0
    n = 0
    for pair in pairs:
        single = [r for r in (_norm_tokens(ref, False) for ref in pair.references)
                  if len(r) == 1]
        if not single:
            continue
        n += 1
        pred_toks = set(_norm_tokens(pair.predicted, False))
        if any(r[0] in pred_toks for r in single):
            hits += 1
    return hits / n if n else None


def decode_report(preds: Sequence[dict], traces: Sequence[dict]
                  ) -> tuple[list[dict], list[dict]]:
    """Summarize decoded answers for plotting.

    preds rows carry query_id/style/answer; traces rows carry style and the
    per-step entries with mixture weights. Returns (length rows, mixture
    rows): answer-length mean and standard error per style, and the mean
    mixture weights per (style, step).
    """
    by_style: dict[str, list[int]] = {}
    for p in preds:
        by_style.setdefault(p["style"], []).append(len(tokenize(p["answer"])))
    length_rows = []
    for style in sorted(by_style):
        lens = np.asarray(by_style[style], dtype=np.float64)
        stderr = (float(lens.std(ddof=1) / math.sqrt(len(lens)))
                  if len(lens) > 1 else 0.0)
        length_rows.append({"kind": "length", "style": style, "t": "",
                            "n": len(lens), "mean_len": float(lens.mean()),
                            "stderr": stderr})

    acc: dict[tuple, list] = {}
    for row in traces:
        for entry in row["steps"]:
            acc.setdefault((row["style"], entry["t"]), []).append(entry["lambda"])
    lambda_rows = []
    for (style, t) in sorted(acc):
        lams = np.asarray(acc[(style, t)], dtype=np.float64)
        lambda_rows.append({
            "kind": "lambda", "style": style, "t": t, "n": len(lams),
            "lam_gen": float(lams[:, 0].mean()),
            "lam_copy_q": float(lams[:, 1].mean()),
            "lam_copy_p": float(lams[:, 2].mean())})
    return length_rows, lambda_rows
