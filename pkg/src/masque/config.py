"""Run configuration: one flat record covering model, data, and training."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from importlib import resources

from .data import RESERVED, Limits


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


@dataclass
class RunConfig:
    # model
    d: int = 32
    d_word: int = 32
    heads: int = 4
    ffn_inner: int = 64
    shared_blocks: int = 2
    model_q_blocks: int = 1
    model_p_blocks: int = 2
    decoder_blocks: int = 2
    dropout: float = 0.1
    # data
    k_passages: int = 3
    j_max: int = 20
    l_max: int = 30
    t_max: int = 20
    common_size: int = 320
    styles: tuple = ("qa", "nlg")
    # training
    batch_size: int = 8
    total_steps: int = 1000
    warmup_steps: int = 100
    peak_lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    ema_decay: float = 0.99
    smooth_pos: float = 0.9
    gamma_rank: float = 0.5
    gamma_cls: float = 0.1
    seed: int = 0
    log_every: int = 1
    # decoding
    answerable_threshold: float = 0.5

    def limits(self) -> Limits:
        return Limits(j_max=self.j_max, l_max=self.l_max, t_max=self.t_max,
                      k=self.k_passages)

    def validate(self) -> "RunConfig":
        if self.d < 1 or self.d % self.heads != 0:
            raise ConfigError(f"'d' ({self.d}) must be a positive multiple of "
                              f"'heads' ({self.heads})")
        for key in ("d_word", "heads", "ffn_inner", "shared_blocks", "model_q_blocks",
                    "model_p_blocks", "decoder_blocks", "k_passages", "j_max",
                    "l_max", "batch_size", "total_steps"):
            if getattr(self, key) < 1:
                raise ConfigError(f"'{key}' must be >= 1, got {getattr(self, key)}")
        if self.t_max < 2:
            raise ConfigError(f"'t_max' must be >= 2, got {self.t_max}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"'dropout' must lie in [0, 1), got {self.dropout}")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ConfigError(f"'ema_decay' must lie in [0, 1), got {self.ema_decay}")
        if not (0.0 < self.smooth_pos <= 1.0):
            raise ConfigError(f"'smooth_pos' must lie in (0, 1], got {self.smooth_pos}")
        if self.warmup_steps < 0 or self.warmup_steps >= self.total_steps:
            raise ConfigError(f"'warmup_steps' ({self.warmup_steps}) must lie in "
                              f"[0, total_steps)")
        if self.common_size <= len(RESERVED) + len(self.styles):
            raise ConfigError(f"'common_size' ({self.common_size}) leaves no room "
                              f"for common words")
        if len(self.styles) < 1 or len(set(self.styles)) != len(self.styles):
            raise ConfigError("'styles' must be a non-empty set of distinct names")
        if not (0.0 <= self.answerable_threshold <= 1.0):
            raise ConfigError(f"'answerable_threshold' must lie in [0, 1], got "
                              f"{self.answerable_threshold}")
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["styles"] = list(self.styles)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError(f"unknown config key '{key}'")
        values = dict(values)
        if "styles" in values:
            values["styles"] = tuple(values["styles"])
        cfg = cls(**values)
        return cfg.validate()


def _coerce_override(current, raw: str):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1"):
            return True
        if raw.lower() in ("false", "0"):
            return False
        raise ConfigError(f"cannot parse boolean from '{raw}'")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(x for x in raw.split(",") if x)
    return raw


def load_config(path: str | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Load a config JSON (or a shipped preset name) and apply overrides.

    Overrides arrive as strings from the command line and are coerced to the
    field's declared type. Unknown keys fail with the offending name.
    """
    values: dict = {}
    if path:
        if path in ("full", "full.json"):
            text = resources.files("masque").joinpath("presets/full.json").read_text()
        else:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config JSON must be an object")
    base = RunConfig()
    known = {f.name: getattr(base, f.name) for f in dataclasses.fields(RunConfig)}
    for key, raw in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce_override(known[key], raw)
    return RunConfig.from_dict(values)
