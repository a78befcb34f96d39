"""Text pipeline: tokenization, vocabularies, example encoding, batching.

Examples arrive as JSONL records with a question, K passages with relevance
marks, per-style reference answers, and an answerability flag. Encoding maps
them onto fixed-id arrays plus a per-example extended vocabulary that gives
every source token an id the copy mechanism can point at.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

_PUNCT = set(string.punctuation)


class DataError(ValueError):
    """A corpus record violates the expected schema."""


class StyleError(ValueError):
    """An undeclared answer style was requested."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, detach leading/trailing punctuation."""
    out: list[str] = []
    for chunk in text.lower().split():
        lead: list[str] = []
        tail: list[str] = []
        while chunk and chunk[0] in _PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        while chunk and chunk[-1] in _PUNCT:
            tail.append(chunk[-1])
            chunk = chunk[:-1]
        out.extend(lead)
        if chunk:
            out.append(chunk)
        out.extend(reversed(tail))
    return out


@dataclass(frozen=True)
class Passage:
    text: str
    is_selected: int = 0


@dataclass(frozen=True)
class RawExample:
    query_id: str
    question: str
    passages: tuple["Passage", ...]
    answers: dict[str, list[str]]
    answerable: int


def example_from_record(rec: dict, line_no: int = 0) -> RawExample:
    where = f"line {line_no}" if line_no else "record"
    if not isinstance(rec, dict):
        raise DataError(f"{where}: expected a JSON object")
    for key in ("query_id", "question", "passages", "answers", "answerable"):
        if key not in rec:
            raise DataError(f"{where}: missing field '{key}'")
    if not isinstance(rec["query_id"], str) or not isinstance(rec["question"], str):
        raise DataError(f"{where}: 'query_id' and 'question' must be strings")
    if rec["answerable"] not in (0, 1):
        raise DataError(f"{where}: 'answerable' must be 0 or 1")
    passages = []
    for i, p in enumerate(rec["passages"]):
        if not isinstance(p, dict) or "text" not in p:
            raise DataError(f"{where}: passage {i} missing 'text'")
        sel = p.get("is_selected", 0)
        if sel not in (0, 1):
            raise DataError(f"{where}: passage {i} 'is_selected' must be 0 or 1")
        passages.append(Passage(text=p["text"], is_selected=int(sel)))
    answers = rec["answers"]
    if not isinstance(answers, dict):
        raise DataError(f"{where}: 'answers' must map style -> list of strings")
    for style, refs in answers.items():
        if not isinstance(refs, list) or any(not isinstance(r, str) for r in refs):
            raise DataError(f"{where}: answers['{style}'] must be a list of strings")
    return RawExample(query_id=rec["query_id"], question=rec["question"],
                      passages=tuple(passages), answers=dict(answers),
                      answerable=int(rec["answerable"]))


def example_to_record(ex: RawExample) -> dict:
    return {
        "query_id": ex.query_id,
        "question": ex.question,
        "passages": [{"text": p.text, "is_selected": p.is_selected} for p in ex.passages],
        "answers": ex.answers,
        "answerable": ex.answerable,
    }


def read_jsonl(path) -> list[RawExample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {i}: invalid JSON ({exc})") from exc
            out.append(example_from_record(rec, line_no=i))
    return out


def write_jsonl(path, examples: Iterable[RawExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex)) + "\n")


class Vocabulary:
    """Fixed generation vocabulary: reserved ids, style tokens, common words.

    Common words are the most frequent corpus tokens up to the size cap,
    ties resolved lexicographically. Style tokens belong to the generation
    vocabulary but never occur as source text.
    """

    def __init__(self, common_tokens: Sequence[str], styles: Sequence[str]):
        self.styles = tuple(styles)
        self.id_to_token: list[str] = list(RESERVED)
        self.id_to_token.extend(f"<{s}>" for s in self.styles)
        self._first_style = len(RESERVED)
        self.id_to_token.extend(common_tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("duplicate token in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.id_to_token[idx]

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def style_id(self, style: str) -> int:
        if style not in self.styles:
            raise StyleError(f"style '{style}' not in declared styles {self.styles}")
        return self._first_style + self.styles.index(style)

    def is_style_id(self, idx: int) -> bool:
        return self._first_style <= idx < self._first_style + len(self.styles)


def build_vocabulary(examples: Iterable[RawExample], common_size: int,
                     styles: Sequence[str] = ("qa", "nlg")) -> Vocabulary:
    """Count tokens over questions, passages, and references; keep the top."""
    n_reserved = len(RESERVED) + len(styles)
    if common_size <= n_reserved:
        raise DataError(f"common_size {common_size} leaves no room after "
                        f"{n_reserved} reserved ids")
    counts: dict[str, int] = {}
    def feed(text: str) -> None:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    for ex in examples:
        feed(ex.question)
        for p in ex.passages:
            feed(p.text)
        for refs in ex.answers.values():
            for r in refs:
                feed(r)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: common_size - n_reserved]]
    return Vocabulary(kept, styles)


class ExtendedVocab:
    """Per-example extension: every source token gets a pointable id.

    In-vocabulary tokens keep their fixed id; the rest get fresh contiguous
    ids starting at the base size, in first-appearance order over the
    question followed by the passages.
    """

    def __init__(self, base: Vocabulary):
        self.base = base
        self.tokens: list[str] = []
        self._extra: dict[str, int] = {}

    def add(self, token: str) -> int:
        if token in self.base.token_to_id:
            return self.base.token_to_id[token]
        got = self._extra.get(token)
        if got is None:
            got = self.base.size + len(self.tokens)
            self._extra[token] = got
            self.tokens.append(token)
        return got

    def lookup(self, token: str) -> Optional[int]:
        if token in self.base.token_to_id:
            return self.base.token_to_id[token]
        return self._extra.get(token)

    @property
    def size(self) -> int:
        return self.base.size + len(self.tokens)

    def token_of(self, idx: int) -> str:
        if idx < self.base.size:
            return self.base.token_of(idx)
        return self.tokens[idx - self.base.size]


@dataclass(frozen=True)
class Limits:
    j_max: int
    l_max: int
    t_max: int
    k: int


@dataclass
class EncodedExample:
    query_id: str
    style: str
    style_token: int
    answerable: int
    rel: np.ndarray          # (K,) 0/1 relevance marks
    q_ids: np.ndarray        # (J,) fixed-vocab ids, UNK where out of vocabulary
    q_ext: np.ndarray        # (J,) extended ids
    q_mask: np.ndarray       # (J,) bool, True on real tokens
    p_ids: np.ndarray        # (K, L) per-passage ids, BOS first
    p_ext: np.ndarray        # (K, L)
    p_mask: np.ndarray       # (K, L) bool
    target: np.ndarray       # (T,) extended ids: style token, answer, EOS
    target_mask: np.ndarray  # (T-1,) bool, True where the shifted token is scored
    ext: ExtendedVocab

    @property
    def ext_size(self) -> int:
        return self.ext.size


def encode_example(ex: RawExample, vocab: Vocabulary, style: str,
                   limits: Limits) -> EncodedExample:
    style_token = vocab.style_id(style)
    ext = ExtendedVocab(vocab)

    q_tokens = tokenize(ex.question)[: limits.j_max]
    q_ids = np.array([vocab.id_of(t) for t in q_tokens], dtype=np.int64)
    q_ext = np.array([ext.add(t) for t in q_tokens], dtype=np.int64)
    q_mask = np.ones(len(q_tokens), dtype=bool)

    passages = list(ex.passages[: limits.k])
    while len(passages) < limits.k:
        passages.append(Passage(text="", is_selected=0))
    tok_rows = []
    for p in passages:
        toks = tokenize(p.text)[: limits.l_max]
        tok_rows.append(toks)
    width = 1 + max(len(r) for r in tok_rows)
    p_ids = np.full((limits.k, width), PAD_ID, dtype=np.int64)
    p_ext = np.full((limits.k, width), PAD_ID, dtype=np.int64)
    p_mask = np.zeros((limits.k, width), dtype=bool)
    for k, toks in enumerate(tok_rows):
        p_ids[k, 0] = BOS_ID
        p_ext[k, 0] = BOS_ID
        p_mask[k, 0] = True
        for j, t in enumerate(toks, start=1):
            p_ids[k, j] = vocab.id_of(t)
            p_ext[k, j] = ext.add(t)
            p_mask[k, j] = True

    rel = np.array([p.is_selected for p in passages], dtype=np.int64)

    if ex.answerable:
        refs = ex.answers.get(style) or []
        if not refs:
            raise DataError(f"example '{ex.query_id}' is answerable but has no "
                            f"'{style}' reference")
        ans_tokens = tokenize(refs[0])[: limits.t_max - 2]
        body = []
        for t in ans_tokens:
            got = ext.lookup(t)
            body.append(got if got is not None else UNK_ID)
        target = np.array([style_token] + body + [EOS_ID], dtype=np.int64)
        target_mask = np.ones(len(target) - 1, dtype=bool)
    else:
        target = np.array([style_token, EOS_ID], dtype=np.int64)
        target_mask = np.zeros(1, dtype=bool)

    return EncodedExample(
        query_id=ex.query_id, style=style, style_token=style_token,
        answerable=int(ex.answerable), rel=rel,
        q_ids=q_ids, q_ext=q_ext, q_mask=q_mask,
        p_ids=p_ids, p_ext=p_ext, p_mask=p_mask,
        target=target, target_mask=target_mask, ext=ext)


def _pad_1d(arr: np.ndarray, n: int, fill) -> np.ndarray:
    if arr.shape[0] >= n:
        return arr
    out = np.full(n, fill, dtype=arr.dtype)
    out[: arr.shape[0]] = arr
    return out


def pad_encoded(enc: EncodedExample, j_pad: int, l_pad: int, t_pad: int) -> EncodedExample:
    """Widen arrays to batch dimensions; masks keep marking the real slots."""
    k, width = enc.p_ids.shape
    p_ids = np.full((k, l_pad), PAD_ID, dtype=np.int64)
    p_ext = np.full((k, l_pad), PAD_ID, dtype=np.int64)
    p_mask = np.zeros((k, l_pad), dtype=bool)
    p_ids[:, :width] = enc.p_ids
    p_ext[:, :width] = enc.p_ext
    p_mask[:, :width] = enc.p_mask
    return EncodedExample(
        query_id=enc.query_id, style=enc.style, style_token=enc.style_token,
        answerable=enc.answerable, rel=enc.rel,
        q_ids=_pad_1d(enc.q_ids, j_pad, PAD_ID),
        q_ext=_pad_1d(enc.q_ext, j_pad, PAD_ID),
        q_mask=_pad_1d(enc.q_mask, j_pad, False),
        p_ids=p_ids, p_ext=p_ext, p_mask=p_mask,
        target=_pad_1d(enc.target, t_pad, PAD_ID),
        target_mask=_pad_1d(enc.target_mask, max(t_pad - 1, enc.target_mask.shape[0]), False),
        ext=enc.ext)


def batch_examples(examples: Sequence[RawExample], vocab: Vocabulary, limits: Limits,
                   batch_size: int, mixing: bool, seed: int,
                   style: Optional[str] = None,
                   cache: Optional[dict] = None) -> list[list[EncodedExample]]:
    """Expand examples into (example, style) instances, shuffle, batch, pad.

    With mixing on, every answerable example yields one instance per style it
    has a reference for; unanswerable examples yield a single instance under
    the first declared style. With mixing off a single target style is used
    for every example.
    """
    if batch_size < 1:
        raise DataError(f"batch_size {batch_size} must be positive")
    instances: list[tuple[RawExample, str]] = []
    if mixing:
        for ex in examples:
            if ex.answerable:
                for s in vocab.styles:
                    if ex.answers.get(s):
                        instances.append((ex, s))
            else:
                instances.append((ex, vocab.styles[0]))
    else:
        if style is None:
            raise StyleError("mixing off requires an explicit style")
        vocab.style_id(style)
        for ex in examples:
            if not ex.answerable or ex.answers.get(style):
                instances.append((ex, style))
    order = np.random.default_rng(seed).permutation(len(instances))
    shuffled = [instances[i] for i in order]

    batches: list[list[EncodedExample]] = []
    for start in range(0, len(shuffled), batch_size):
        chunk = shuffled[start: start + batch_size]
        encoded = []
        for ex, s in chunk:
            key = (ex.query_id, s)
            enc = cache.get(key) if cache is not None else None
            if enc is None:
                enc = encode_example(ex, vocab, s, limits)
                if cache is not None:
                    cache[key] = enc
            encoded.append(enc)
        j_pad = max(e.q_ids.shape[0] for e in encoded)
        l_pad = max(e.p_ids.shape[1] for e in encoded)
        t_pad = max(e.target.shape[0] for e in encoded)
        batches.append([pad_encoded(e, j_pad, l_pad, t_pad) for e in encoded])
    return batches


# ---------------------------------------------------------------------------
# synthetic lookup corpus


@dataclass(frozen=True)
class SynthSpec:
    n: int
    seed: int = 0
    k_passages: int = 3
    unanswerable_frac: float = 0.0
    key_pool: int = 50
    val_pool: int = 8
    oov_val_frac: float = 0.7


def synth_corpus(spec: SynthSpec) -> list[RawExample]:
    """Key-value lookup questions over K passages.

    Each answerable example asks for the value of a key; exactly one passage
    states it and the distractors state other keys' values. Values are partly
    unique serial tokens, which fall outside any reasonably sized common
    vocabulary, so answering requires the copy path. The serial namespace
    embeds the seed so corpora from different seeds never share values.
    """
    if not (0.0 <= spec.unanswerable_frac <= 1.0):
        raise DataError(f"unanswerable_frac {spec.unanswerable_frac} outside [0, 1]")
    if spec.k_passages < 1 or spec.n < 0:
        raise DataError("k_passages must be >= 1 and n >= 0")
    rng = np.random.default_rng(spec.seed)
    keys = [f"k{i:02d}" for i in range(spec.key_pool)]
    common_vals = [f"u{i:02d}" for i in range(spec.val_pool)]
    n_unans = int(round(spec.unanswerable_frac * spec.n))
    unans_idx = set(rng.choice(spec.n, size=n_unans, replace=False).tolist()) if n_unans else set()

    serial = 0
    def fresh_val() -> str:
        nonlocal serial
        serial += 1
        return f"v{spec.seed}x{serial:04d}"

    out = []
    for i in range(spec.n):
        key = keys[int(rng.integers(0, len(keys)))]
        answerable = i not in unans_idx
        if answerable and rng.random() >= spec.oov_val_frac:
            val = common_vals[int(rng.integers(0, len(common_vals)))]
        else:
            val = fresh_val()
        distract = [k for k in keys if k != key]
        slots = rng.permutation(spec.k_passages)
        rel_slot = int(slots[0]) if answerable else -1
        # Every passage closes with "noted .", so "." holds two slots per
        # passage against the value's one and the final answer position
        # stays separable by mass even when the copy attention degrades to
        # treating both as the same kind of slot. No other token is
        # duplicated: giving "the" a second slot as well looks like it
        # should help the same way, but it empirically collapses the early
        # copy queries instead of focusing them.
        passages = []
        for s in range(spec.k_passages):
            if s == rel_slot:
                passages.append(Passage(f"the value of {key} is {val} . noted .",
                                        is_selected=1))
            else:
                dkey = distract[int(rng.integers(0, len(distract)))]
                passages.append(Passage(f"the value of {dkey} is {fresh_val()} . noted .",
                                        is_selected=0))
        answers = ({"qa": [val], "nlg": [f"the value of {key} is {val} ."]}
                   if answerable else {"qa": [], "nlg": []})
        out.append(RawExample(
            query_id=f"q{i:06d}", question=f"value of {key}",
            passages=tuple(passages), answers=answers,
            answerable=int(answerable)))
    return out


def load_word_vectors(path, d_word: int) -> dict[str, np.ndarray]:
    """Read a whitespace text format: token followed by d_word floats."""
    out: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != d_word + 1:
                raise DataError(f"line {i}: expected token plus {d_word} floats, "
                                f"got {len(parts)} fields")
            out[parts[0]] = np.asarray([float(x) for x in parts[1:]], dtype=np.float64)
    return out
