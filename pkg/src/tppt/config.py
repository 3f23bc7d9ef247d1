"""Structured experiment configuration: JSON documents plus ``key=value`` overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from tppt.continual import MODES, Hyperparams
from tppt.encoders import EncoderConfig, PretrainConfig
from tppt.errors import ConfigError, ContractError
from tppt.synthdata import SynthConfig

SECTIONS = {"data": SynthConfig, "encoder": EncoderConfig, "pretrain": PretrainConfig,
            "train": Hyperparams}
TOP_LEVEL = ("mode", "seeds", "output_dir", "encoder_path")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    seeds: tuple[int, ...]
    output_dir: str
    encoder_path: str | None
    data: SynthConfig
    encoder: EncoderConfig
    pretrain: PretrainConfig
    train: Hyperparams

    def to_dict(self) -> dict:
        return {"mode": self.mode, "seeds": list(self.seeds), "output_dir": self.output_dir,
                "encoder_path": self.encoder_path,
                **{name: asdict(getattr(self, name)) for name in SECTIONS}}


def _coerce(section: str, cls, values: dict):
    known = {f.name: f for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key}")
    defaults = cls()
    out = {}
    for key, value in values.items():
        want = type(getattr(defaults, key))
        if value is None and getattr(defaults, key) is None:
            out[key] = None
            continue
        if want is bool or isinstance(value, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key} must be a boolean, got {value!r}")
        elif want is int:
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            if not isinstance(value, int):
                raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
        elif want is float or getattr(defaults, key) is None:
            if value is not None and not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
            value = None if value is None else float(value)
        out[key] = value
    return cls(**out)


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object")
    for key in raw:
        if key not in TOP_LEVEL and key not in SECTIONS:
            raise ConfigError(f"unknown config key {key}")
    for name in SECTIONS:
        if not isinstance(raw.get(name, {}), dict):
            raise ConfigError(f"config section {name} must be an object")
    mode = raw.get("mode", "tppt-v")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {mode!r}")
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)):
        raise ConfigError(f"seeds must be a non-empty list of non-negative integers, got {seeds!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must not repeat")
    output_dir = raw.get("output_dir", "runs")
    encoder_path = raw.get("encoder_path")
    if not isinstance(output_dir, str) or not (encoder_path is None or isinstance(encoder_path, str)):
        raise ConfigError("output_dir and encoder_path must be strings")

    data = _coerce("data", SynthConfig, raw.get("data", {}))
    # vocabulary and token width follow the data unless set explicitly
    enc_raw = dict(raw.get("encoder", {}))
    enc_raw.setdefault("vocab_size", data.vocab_size)
    enc_raw.setdefault("image_token_dim", data.token_dim)
    encoder = _coerce("encoder", EncoderConfig, enc_raw)
    pretrain = _coerce("pretrain", PretrainConfig, raw.get("pretrain", {}))
    train = _coerce("train", Hyperparams, raw.get("train", {}))

    cfg = ExperimentConfig(mode, tuple(seeds), output_dir, encoder_path, data, encoder, pretrain, train)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    checks = [("data", cfg.data.validate), ("encoder", cfg.encoder.validate), ("train", cfg.train.validate)]
    for section, check in checks:
        try:
            check()
        except ContractError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    if cfg.pretrain.steps < 0 or cfg.pretrain.lr <= 0 or cfg.pretrain.batch_classes < 2:
        raise ConfigError("pretrain: steps must be >= 0, lr > 0 and batch_classes >= 2")
    if cfg.encoder.vocab_size < cfg.data.vocab_size:
        raise ConfigError(f"encoder.vocab_size {cfg.encoder.vocab_size} is smaller than the data "
                          f"vocabulary {cfg.data.vocab_size}")
    if cfg.encoder.image_token_dim != cfg.data.token_dim:
        raise ConfigError("encoder.image_token_dim must equal data.token_dim")
    longest = 1 + max(cfg.train.length_v + cfg.data.n_image_tokens,
                      cfg.train.length_t + cfg.data.template_len + 1)
    if cfg.encoder.max_tokens < longest:
        raise ConfigError(f"encoder.max_tokens must be at least {longest} for these prompt lengths")
    n_tasks = 1 if cfg.mode == "joint" else cfg.train.n_tasks
    if cfg.data.n_classes % n_tasks:
        raise ConfigError(f"train.n_tasks {n_tasks} does not divide data.n_classes {cfg.data.n_classes}")


def parse_value(text: str):
    """JSON literal if it parses, otherwise the bare string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` (or ``key=value`` for top-level keys) assignments."""
    out = copy.deepcopy(raw)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.strip().split(".")
        if len(parts) == 1:
            if parts[0] not in TOP_LEVEL:
                raise ConfigError(f"unknown config key {parts[0]}")
            out[parts[0]] = parse_value(value)
        elif len(parts) == 2 and parts[0] in SECTIONS:
            section = out.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section {parts[0]} must be an object")
            section[parts[1]] = parse_value(value)
        else:
            raise ConfigError(f"unknown config key {key}")
    return out


def load(path, overrides=()) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return from_dict(apply_overrides(raw, overrides))
