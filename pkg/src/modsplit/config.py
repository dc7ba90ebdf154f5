"""Run configuration: nested JSON defaults, file overrides, dotted --set overrides."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields
from pathlib import Path

from .data import CorpusConfig, CorpusSpec
from .errors import ContractViolation
from .model import ModelConfig
from .schedule import LayerwiseScheduleParams
from .trainer import TrainConfig


class ConfigError(ContractViolation):
    pass


# the corpus seed is the run seed and its vocab sizes are the model's
_FROM_ELSEWHERE = {"seed", "text_vocab", "speech_vocab"}


def _corpus_defaults() -> dict:
    spec = {f.name: f.default for f in fields(CorpusSpec) if f.name not in _FROM_ELSEWHERE}
    cc = asdict(CorpusConfig())
    cc["sft_mix"] = list(cc["sft_mix"])
    return {**spec, **cc}


DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "model": asdict(ModelConfig()),
    "corpus": _corpus_defaults(),
    "train": {**asdict(TrainConfig()), "stage": "stage2_full"},
    "schedule": {"layerwise": {"N": 8, "k": 200, "w": 100, "T": 4000, "eta_max": 6e-5}},
    "eval": {"n_items": 1000, "prefix_len": 8, "cont_len": 4, "n_probes": 100, "probe_len": 24},
    "analysis": {"n_samples": 5, "length": 12},
    "filter": {"threshold": 0.2},
    "ablation": {"configs": "fp-full,fp-layerwise,fp-shared,nf,nf-nosplit"},
    "paths": {"data": "", "base": "", "model": ""},
}

# Desk-quick preset: small enough that base pretraining, Stage 1, Stage 2 and
# the five-way ablation finish in minutes on one CPU core.
QUICK: dict = {
    "model": {"d_model": 48, "n_heads": 4, "d_ff": 192, "n_shared": 4, "n_branch": 2,
              "text_vocab": 64, "speech_vocab": 128, "max_seq": 128},
    "corpus": {"n_interleaved": 3000, "n_unsup": 600, "n_text": 3000, "n_sft": 400,
               "min_len": 8, "max_len": 16, "temperature": 0.5},
    "train": {"batch_size": 16, "seq_len": 128, "stage0_steps": 1500, "stage1_steps": 2000,
              "stage2_steps": 1000, "sft_steps": 200, "base_lr": 3e-3, "base_lr_end": 3e-4,
              "stage1_lr": 3e-3, "stage1_lr_end": 3e-4, "stage2_lr": 1e-3, "stage2_lr_end": 1e-4,
              "sft_lr": 3e-4, "sft_lr_end": 3e-5},
    "schedule": {"layerwise": {"N": 4, "k": 100, "w": 50, "T": 1000, "eta_max": 1e-3}},
    "eval": {"n_items": 1000, "n_probes": 100},
}


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def merge(base: dict, override: dict, where: str = "") -> dict:
    """Recursive merge; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{where}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            out[k] = merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def parse_set(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_set(cfg: dict, key: str, value) -> dict:
    parts = key.split(".")
    node = cfg
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        if i == len(parts) - 1:
            if isinstance(node[part], dict):
                raise ConfigError(f"config key {key!r} is a section, not a value")
            node[part] = value
        else:
            node = node[part]
    return cfg


def resolve(path=None, sets=(), seed=None, threads=None, preset: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if preset:
        cfg = merge(cfg, preset)
    if path:
        cfg = merge(cfg, json.loads(Path(path).read_text()))
    for item in sets:
        apply_set(cfg, *parse_set(item))
    if seed is not None:
        cfg["seed"] = int(seed)
    if threads is not None:
        cfg["threads"] = int(threads)
    return cfg


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def require(cfg: dict, key: str) -> str:
    node = cfg
    for part in key.split("."):
        node = node[part]
    if node in ("", None):
        raise ConfigError(f"missing required config key {key!r}")
    return node


# -- typed views


def model_config(cfg) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def corpus_spec(cfg) -> CorpusSpec:
    c = cfg["corpus"]
    names = {f.name for f in fields(CorpusSpec)} - _FROM_ELSEWHERE
    m = cfg["model"]
    return CorpusSpec(seed=int(cfg["seed"]), text_vocab=m["text_vocab"], speech_vocab=m["speech_vocab"],
                      **{k: c[k] for k in names})


def corpus_config(cfg) -> CorpusConfig:
    c = cfg["corpus"]
    names = {f.name for f in fields(CorpusConfig)}
    d = {k: c[k] for k in names}
    d["sft_mix"] = tuple(d["sft_mix"])
    return CorpusConfig(**d)


def train_config(cfg) -> TrainConfig:
    return TrainConfig(**{k: v for k, v in cfg["train"].items() if k != "stage"})


def layerwise_params(cfg) -> LayerwiseScheduleParams:
    return LayerwiseScheduleParams(**cfg["schedule"]["layerwise"])
