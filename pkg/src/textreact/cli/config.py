"""Flat ``key = value`` run configuration with typed, range-checked fields."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from ..errors import TextReactError


class ConfigError(TextReactError):
    pass


class UnknownKey(ConfigError, KeyError):
    def __init__(self, key: str):
        super().__init__(key)
        self.key = key

    def __str__(self) -> str:
        return f"unknown config key {self.key!r}"


class MissingRequired(ConfigError, ValueError):
    def __init__(self, key: str, detail: str = ""):
        super().__init__(key)
        self.key = key
        self.detail = detail

    def __str__(self) -> str:
        return f"missing required {self.key!r}" + (f": {self.detail}" if self.detail else "")


class ConfigTypeError(ConfigError, TypeError):
    def __init__(self, key: str, value: Any, reason: str):
        super().__init__(key)
        self.key = key
        self.value = value
        self.reason = reason

    def __str__(self) -> str:
        return f"bad value {self.value!r} for {self.key!r}: {self.reason}"


def _prob(v):
    return 0.0 <= v <= 1.0


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


# (choices or predicate, message)
_CHECKS: dict[str, tuple] = {
    "task": (("rcr", "retro_tf", "retro_tb"), "one of rcr, retro_tf, retro_tb"),
    "split_kind": (("random", "time"), "random or time"),
    "scenario": (("full", "gold_removed", "ts_corpus"), "one of full, gold_removed, ts_corpus"),
    "mode": (("joint", "ensemble_separate", "smiles_only", "text_only"), "a prediction mode"),
    "baseline": (("none", "rxnfp"), "none or rxnfp"),
    "alpha": (_prob, "a probability in [0, 1]"),
    "mask_ratio": (lambda v: 0 < v < 1, "in (0, 1)"),
    "randomize_prob": (_prob, "a probability in [0, 1]"),
    "distractor_rate": (_prob, "a probability in [0, 1]"),
    "condition_noise": (_prob, "a probability in [0, 1]"),
    "train_frac": (lambda v: 0 < v <= 1, "in (0, 1]"),
    "K": (_pos, "positive"),
    "k": (lambda v: 0 <= v <= 10, "in [0, 10]"),
    "mask_lambda": (_pos, "positive"),
    "max_span": (_pos, "positive"),
    "lambda_mlm": (_nonneg, "non-negative"),
    "d_model": (_pos, "positive"),
    "n_heads": (_pos, "positive"),
    "n_layers": (_pos, "positive"),
    "dec_layers": (_pos, "positive"),
    "d_ff": (_pos, "positive"),
    "max_len": (_pos, "positive"),
    "ret_max_len": (_pos, "positive"),
    "max_target_len": (_pos, "positive"),
    "dropout_rate": (lambda v: 0 <= v < 1, "in [0, 1)"),
    "lr": (_pos, "positive"),
    "ret_lr": (_pos, "positive"),
    "warmup": (_prob, "a fraction in [0, 1]"),
    "ret_warmup": (_prob, "a fraction in [0, 1]"),
    "epochs": (_nonneg, "non-negative"),
    "ret_epochs": (_nonneg, "non-negative"),
    "batch_size": (_pos, "positive"),
    "ret_batch_size": (_pos, "positive"),
    "beam_width": (_pos, "positive"),
    "n_reactions": (_pos, "positive"),
    "n_types": (_pos, "positive"),
    "n_fragments": (_pos, "positive"),
    "n_unlabeled": (_nonneg, "non-negative"),
}


@dataclass
class RunConfig:
    seed: int | None = None
    task: str = "rcr"
    out_dir: str = "run"
    # paths; empty means <out_dir>/<default name>
    corpus: str = ""
    dataset: str = ""
    sources: str = ""
    templates: str = ""
    splits: str = ""
    vocab: str = ""
    retriever_ckpt: str = ""
    index: str = ""
    neighbors: str = ""
    predictor_ckpt: str = ""
    predictions: str = ""
    metrics: str = ""
    # synthetic data
    n_reactions: int = 2000
    n_types: int = 40
    n_fragments: int = 120
    n_unlabeled: int = 500
    distractor_rate: float = 0.3
    condition_noise: float = 0.05
    # split / scenario
    split_kind: str = "random"
    scenario: str = "full"
    ts_cutoff: int = 0
    train_frac: float = 1.0
    # model
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 128
    dropout_rate: float = 0.0
    ret_max_len: int = 256
    max_len: int = 384
    max_target_len: int = 96
    # retriever optimisation
    ret_epochs: int = 50
    ret_batch_size: int = 32
    ret_lr: float = 1e-3
    ret_warmup: float = 0.1
    # neighbour policy
    alpha: float | None = None
    K: int = 10
    k: int = 3
    # masking
    mask_lambda: float = 3.0
    mask_ratio: float = 0.15
    max_span: int = 10
    use_masking: bool = True
    # predictor optimisation
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    warmup: float = 0.02
    lambda_mlm: float = 0.1
    randomize_prob: float = 0.5
    # inference
    beam_width: int = 10
    mode: str = "joint"
    baseline: str = "none"

    _DEFAULT_NAMES = {
        "corpus": "corpus.jsonl",
        "dataset": "reactions.jsonl",
        "sources": "sources.jsonl",
        "templates": "templates.jsonl",
        "splits": "split.json",
        "vocab": "vocab.json",
        "retriever_ckpt": "retriever.ckpt",
        "index": "index.txix",
        "neighbors": "neighbors.jsonl",
        "predictor_ckpt": "predictor.ckpt",
        "predictions": "predictions.jsonl",
        "metrics": "metrics.json",
    }

    def path(self, role: str) -> Path:
        value = getattr(self, role)
        return Path(value) if value else Path(self.out_dir) / self._DEFAULT_NAMES[role]

    def require(self, role: str) -> Path:
        p = self.path(role)
        if not p.exists():
            raise MissingRequired(role, f"{p} does not exist")
        return p

    @property
    def ks(self) -> tuple[int, ...]:
        return (1, 3, 10, 15)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **changes) -> "RunConfig":
        out = dataclasses.replace(self, **changes)
        validate(out)
        return out


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    ann = str(_FIELDS[key].type)
    text = raw.strip()
    try:
        if ann.startswith("bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if "None" in ann and text.lower() in ("", "none", "default"):
            return None
        if ann.startswith("int"):
            return int(text)
        if ann.startswith("float"):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigTypeError(key, raw, str(exc)) from None


def validate(cfg: RunConfig) -> RunConfig:
    for key, (check, msg) in _CHECKS.items():
        value = getattr(cfg, key)
        if value is None:
            continue
        ok = value in check if isinstance(check, tuple) else check(value)
        if not ok:
            raise ConfigTypeError(key, value, f"must be {msg}")
    if cfg.k > cfg.K:
        raise ConfigTypeError("k", cfg.k, f"must not exceed K={cfg.K}")
    if cfg.d_model % cfg.n_heads:
        raise ConfigTypeError("n_heads", cfg.n_heads, f"must divide d_model={cfg.d_model}")
    if cfg.scenario == "ts_corpus" and not cfg.ts_cutoff:
        raise MissingRequired("ts_cutoff", "ts_corpus scenario needs a year cutoff")
    if cfg.seed is None:
        raise MissingRequired("seed")
    return cfg


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise UnknownKey(key)
        values[key] = value
    return values


def parse_config(path=None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Read a config file (optional), apply string overrides, convert and validate."""
    raw: dict[str, str] = {}
    if path is not None:
        if not os.path.exists(path):
            raise MissingRequired("config", f"{path} does not exist")
        with open(path, encoding="utf-8") as fh:
            raw.update(parse_config_text(fh.read(), str(path)))
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise UnknownKey(key)
        raw[key] = value
    cfg = RunConfig(**{k: _convert(k, v) for k, v in raw.items()})
    return validate(cfg)


def config_keys() -> list[str]:
    return list(_FIELDS)
