"""Flat ``section.key = value`` experiment configuration."""

from __future__ import annotations

from pathlib import Path

from .model import ModelConfig
from .seqgan import GANConfig
from .training import TrainConfig

PRETRAIN_MODES = ("none", "monolingual", "same-source-naive", "same-source-scheduled", "same-source-seqgan")

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.corpus": "",
    "data.features": "",
    "data.lang_feature": False,
    "data.min_count": 1,
    "data.split_seed": 0,
    "data.mono0": "",
    "data.mono1": "",
    "model.kind": "dual",
    "model.hidden": 32,
    "model.embed": 32,
    "model.feature_width": 8,
    "train.lr": 1.0,
    "train.decay_rate": 0.98,
    "train.decay_start": 80,
    "train.epochs": 100,
    "train.batch_size": 32,
    "train.clip": 5.0,
    "pretrain.mode": "none",
    "pretrain.epochs": 20,
    "gan.sample_len": 20,
    "gan.n_rollouts": 4,
    "gan.g_steps": 1,
    "gan.d_steps": 3,
    "gan.n_rounds": 20,
    "gan.mle_pretrain_epochs": 30,
    "gan.sample_multiplier": 3.0,
    "gan.g_batch": 32,
    "gan.g_lr": 0.1,
    "gan.d_lr": 0.5,
    "gan.d_batch": 64,
    "gan.d_pretrain_steps": 5,
    "gan.d_sample_cap": 512,
    "gan.disc_hidden": 32,
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _coerce(key: str, raw: str, problems: list[str]):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        problems.append(f"{key}: cannot parse {raw!r} as {type(default).__name__}")
        return default


def parse_pairs(lines, problems: list[str], origin: str) -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            problems.append(f"{origin}:{n}: expected key=value, got {line!r}")
            continue
        pairs[key.strip()] = value.strip()
    return pairs


def resolve(path=None, overrides: list[str] | None = None) -> dict[str, object]:
    """Defaults, then the config file, then ``key=value`` overrides.

    Every problem found is reported together in one :class:`ConfigError`.
    """
    problems: list[str] = []
    raw: dict[str, str] = {}
    if path:
        try:
            raw.update(parse_pairs(Path(path).read_text(encoding="utf-8").splitlines(), problems, str(path)))
        except OSError as exc:
            problems.append(f"cannot read config {path}: {exc}")
    raw.update(parse_pairs(overrides or [], problems, "override"))
    cfg = dict(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            problems.append(f"unknown key {key!r}")
            continue
        cfg[key] = _coerce(key, value, problems)
    problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: dict[str, object]) -> list[str]:
    p = []
    if cfg["model.kind"] not in ("rnnlm", "dual"):
        p.append(f"model.kind must be rnnlm or dual, got {cfg['model.kind']!r}")
    if cfg["pretrain.mode"] not in PRETRAIN_MODES:
        p.append(f"pretrain.mode must be one of {', '.join(PRETRAIN_MODES)}")
    if cfg["pretrain.mode"] == "monolingual" and not (cfg["data.mono0"] and cfg["data.mono1"]):
        p.append("pretrain.mode=monolingual needs data.mono0 and data.mono1")
    for key in ("model.hidden", "model.embed", "train.batch_size", "gan.n_rollouts", "gan.g_batch", "gan.d_batch"):
        if cfg[key] < 1:
            p.append(f"{key} must be >= 1")
    if cfg["train.epochs"] < 0 or cfg["pretrain.epochs"] < 0:
        p.append("epoch counts must be >= 0")
    if not 0 < cfg["train.decay_rate"] <= 1:
        p.append("train.decay_rate must lie in (0, 1]")
    if cfg["train.decay_start"] > cfg["train.epochs"]:
        p.append("train.decay_start must not exceed train.epochs")
    if cfg["gan.sample_len"] < 2:
        p.append("gan.sample_len must be >= 2")
    if cfg["gan.sample_multiplier"] < 0:
        p.append("gan.sample_multiplier must be >= 0")
    if cfg["data.min_count"] < 1:
        p.append("data.min_count must be >= 1")
    return p


def dump(cfg: dict[str, object]) -> str:
    def fmt(v):
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.items())


def train_config(cfg) -> TrainConfig:
    return TrainConfig(
        initial_lr=cfg["train.lr"], decay_rate=cfg["train.decay_rate"], decay_start_epoch=cfg["train.decay_start"],
        total_epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"], grad_clip_norm=cfg["train.clip"],
        seed=cfg["seed"],
    )


def pretrain_config(cfg) -> TrainConfig:
    return train_config(cfg).scaled(cfg["pretrain.epochs"])


def model_config(cfg, features: dict[str, int] | None = None) -> ModelConfig:
    return ModelConfig(kind=cfg["model.kind"], hidden=cfg["model.hidden"], embed=cfg["model.embed"],
                       features=dict(features or {}), feature_width=cfg["model.feature_width"])


def gan_config(cfg) -> GANConfig:
    fields = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("gan.")}
    return GANConfig(seed=cfg["seed"], **fields)
