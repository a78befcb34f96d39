"""Losses, optimizer, learning-rate schedule, train loop, checkpointing."""

from __future__ import annotations

import json
import math
import os
import tempfile
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig
from .data import (RESERVED, DataError, RawExample, Vocabulary, batch_examples)
from .model import ExampleOutput, Masque
from .params import ParamStore, RunCtx, decays
from .tensor import Tensor, derive_seed

LOG_FLOOR = 1e-12


class TrainingError(RuntimeError):
    """A training step could not proceed (non-finite gradients and the like)."""


def _bce(prob: Tensor, target: np.ndarray) -> Tensor:
    """Summed binary cross entropy; probabilities clamped away from 0 and 1."""
    p = T.clamp(prob, lo=LOG_FLOOR, hi=1.0 - LOG_FLOOR)
    pos = T.mul(Tensor(target), T.log(p))
    neg = T.mul(Tensor(1.0 - target), T.log(T.sub(1.0, p)))
    return T.neg(T.tsum(T.add(pos, neg)))


def decoder_loss(outputs: Sequence[ExampleOutput]) -> Tensor:
    """Answer NLL averaged per example over its scored tokens, then over
    the answerable examples. Unanswerable examples carry zero weight."""
    terms = []
    for out in outputs:
        if not out.enc.answerable or out.pointer is None:
            continue
        mask = out.enc.target_mask
        n_scored = int(mask.sum())
        if n_scored == 0:
            continue
        picks = T.gather_col_entries(out.pointer.dist, out.enc.target[1:])
        logs = T.mul(T.log(T.clamp(picks, lo=LOG_FLOOR)),
                     mask.astype(np.float64))
        terms.append(T.mul(T.tsum(logs), -1.0 / n_scored))
    if not terms:
        warnings.warn("batch has no answerable examples; decoder loss is 0",
                      RuntimeWarning)
        return Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.mul(acc, 1.0 / len(terms))


def ranking_loss(outputs: Sequence[ExampleOutput], smooth_pos: float) -> Tensor:
    """BCE of passage relevance over every (example, passage) slot.

    Positive labels are smoothed to smooth_pos; negatives stay exactly 0.
    """
    acc = None
    slots = 0
    for out in outputs:
        target = out.enc.rel.astype(np.float64) * smooth_pos
        term = _bce(out.beta, target)
        acc = term if acc is None else T.add(acc, term)
        slots += len(out.enc.rel)
    if acc is None:
        return Tensor(0.0)
    return T.mul(acc, 1.0 / slots)


def classification_loss(outputs: Sequence[ExampleOutput], smooth_pos: float) -> Tensor:
    """BCE of answerability over every example, positives smoothed."""
    acc = None
    for out in outputs:
        target = np.float64(out.enc.answerable) * smooth_pos
        term = _bce(out.p_answerable, np.asarray(target))
        acc = term if acc is None else T.add(acc, term)
    if acc is None:
        return Tensor(0.0)
    return T.mul(acc, 1.0 / len(outputs))


def total_loss(l_dec: Tensor, l_rank: Tensor, l_cls: Tensor,
               gamma_rank: float, gamma_cls: float) -> Tensor:
    return T.add(l_dec, T.add(T.mul(l_rank, gamma_rank), T.mul(l_cls, gamma_cls)))


def lr_at_step(step: int, cfg: RunConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to 0 at total_steps."""
    if cfg.total_steps <= cfg.warmup_steps:
        raise ConfigError(f"total_steps ({cfg.total_steps}) must exceed "
                          f"warmup_steps ({cfg.warmup_steps})")
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return 0.0 if step == 0 else cfg.peak_lr
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


@dataclass
class OptState:
    m: dict = field(default_factory=dict)     # first moments
    v: dict = field(default_factory=dict)     # second moments
    ema: dict = field(default_factory=dict)   # shadow weights
    t: int = 0                                # completed steps


def init_opt_state(store: ParamStore) -> OptState:
    state = OptState()
    for name, p in store.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
        state.ema[name] = p.data.copy()
    return state


def optimizer_step(store: ParamStore, state: OptState, cfg: RunConfig,
                   lr: float) -> dict:
    """Clip by global norm, apply Adam, decay non-bias weights, refresh EMA."""
    grads = {}
    sq = 0.0
    for name, p in store.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in '{name}' at step "
                                f"{state.t + 1}")
        grads[name] = g
        sq += float((g * g).sum())
    norm = math.sqrt(sq)
    scale = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0

    state.t += 1
    t = state.t
    corr1 = 1.0 - cfg.adam_beta1 ** t
    corr2 = 1.0 - cfg.adam_beta2 ** t
    for name, p in store.items():
        g = grads[name] * scale
        m = state.m[name]
        v = state.v[name]
        m *= cfg.adam_beta1
        m += (1.0 - cfg.adam_beta1) * g
        v *= cfg.adam_beta2
        v += (1.0 - cfg.adam_beta2) * (g * g)
        p.data -= lr * (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_eps)
        if decays(name):
            p.data -= lr * cfg.weight_decay * p.data
        shadow = state.ema[name]
        shadow *= cfg.ema_decay
        shadow += (1.0 - cfg.ema_decay) * p.data
    return {"grad_norm": norm, "lr": lr}


@contextmanager
def use_weights(store: ParamStore, weights: dict):
    """Temporarily swap parameter values, e.g. to evaluate with EMA weights."""
    saved = {}
    for name, p in store.items():
        saved[name] = p.data
        p.data = weights[name]
    try:
        yield
    finally:
        for name, p in store.items():
            p.data = saved[name]


# ---------------------------------------------------------------------------
# checkpointing: JSON manifest + little-endian float64 payload

CKPT_FORMAT = "masque-checkpoint"
_SECTIONS = ("params", "m", "v", "ema")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _ckpt_paths(prefix) -> tuple[Path, Path]:
    # plain concatenation: a dot inside the prefix must survive
    return Path(str(prefix) + ".json"), Path(str(prefix) + ".bin")


def save_checkpoint(prefix, model: Masque, state: OptState) -> None:
    manifest_path, payload_path = _ckpt_paths(prefix)
    n_special = len(RESERVED) + len(model.vocab.styles)
    manifest = {
        "format": CKPT_FORMAT,
        "version": 1,
        "step": state.t,
        "config": model.cfg.to_dict(),
        "vocab": {
            "styles": list(model.vocab.styles),
            "common": model.vocab.id_to_token[n_special:],
        },
        "params": [{"name": n, "shape": list(p.shape)}
                   for n, p in model.store.items()],
        "sections": list(_SECTIONS),
    }
    chunks = []
    for section in _SECTIONS:
        for name, p in model.store.items():
            arr = {"params": p.data, "m": state.m[name], "v": state.v[name],
                   "ema": state.ema[name]}[section]
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(manifest_path, json.dumps(manifest, indent=1))
    atomic_write_bytes(payload_path, b"".join(chunks))


def load_checkpoint(prefix) -> tuple[Masque, OptState]:
    manifest_path, payload_path = _ckpt_paths(prefix)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CKPT_FORMAT:
        raise DataError(f"{prefix}: not a checkpoint manifest")
    cfg = RunConfig.from_dict(manifest["config"])
    vocab = Vocabulary(manifest["vocab"]["common"], manifest["vocab"]["styles"])
    model = Masque(cfg, vocab)
    names = model.store.names()
    listed = [e["name"] for e in manifest["params"]]
    if listed != names:
        raise DataError(f"{prefix}: parameter list does not match the "
                        f"configured model")
    payload = payload_path.read_bytes()
    state = OptState(t=int(manifest["step"]))
    offset = 0
    for section in manifest["sections"]:
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * 8
            arr = np.frombuffer(payload[offset:offset + nbytes],
                                dtype="<f8").reshape(shape).copy()
            offset += nbytes
            if section == "params":
                model.store[entry["name"]].data = arr
            else:
                getattr(state, section)[entry["name"]] = arr
    if offset != len(payload):
        raise DataError(f"{prefix}: payload has {len(payload)} bytes, "
                        f"expected {offset}")
    return model, state


# ---------------------------------------------------------------------------
# training loop

METRIC_COLUMNS = ("step", "lr", "L_dec", "L_rank", "L_cls", "L")


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in METRIC_COLUMNS))
    atomic_write_text(path, "\n".join(lines) + "\n")


def train_run(model: Masque, examples: Sequence[RawExample],
              mixing: bool = True, style: Optional[str] = None,
              state: Optional[OptState] = None,
              progress: Optional[Callable[[dict], None]] = None
              ) -> tuple[OptState, list[dict]]:
    """Optimize the model on the example set for cfg.total_steps steps.

    Epochs reshuffle with a seed mixed from the run seed and the epoch
    index, so the whole trajectory is a pure function of (model, data,
    config). Returns the optimizer state and the per-step metrics rows.
    """
    if not examples:
        raise DataError("training requires a nonempty example set")
    cfg = model.cfg
    if state is None:
        state = init_opt_state(model.store)
    rows: list[dict] = []
    cache: dict = {}
    epoch = 0
    step = state.t
    while step < cfg.total_steps:
        batches = batch_examples(examples, model.vocab, cfg.limits(),
                                 cfg.batch_size, mixing=mixing,
                                 seed=derive_seed(cfg.seed, 0xE90C, epoch),
                                 style=style, cache=cache)
        epoch += 1
        for batch in batches:
            if step >= cfg.total_steps:
                break
            step += 1
            ctx = RunCtx(training=True, seed=cfg.seed, step=step)
            model.store.zero_grad()
            with T.Tape() as tape:
                outs = [model.forward_example(enc, ctx) for enc in batch]
                l_dec = decoder_loss(outs)
                l_rank = ranking_loss(outs, cfg.smooth_pos)
                l_cls = classification_loss(outs, cfg.smooth_pos)
                loss = total_loss(l_dec, l_rank, l_cls, cfg.gamma_rank,
                                  cfg.gamma_cls)
                tape.backward(loss)
            lr = lr_at_step(step, cfg)
            optimizer_step(model.store, state, cfg, lr)
            row = {"step": step, "lr": lr, "L_dec": l_dec.item(),
                   "L_rank": l_rank.item(), "L_cls": l_cls.item(),
                   "L": loss.item()}
            rows.append(row)
            if progress is not None and step % cfg.log_every == 0:
                progress(row)
    return state, rows
