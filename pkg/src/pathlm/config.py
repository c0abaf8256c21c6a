"""Declarative experiment configuration.

One YAML file holds every section (data, model, pretrain, modular, routing,
plan, harness, eval); command-line --set overrides merge on top. Commands
copy the resolved config into their output directory so every artifact is
reproducible from what it carries.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml

from .datagen import CorpusConfig
from .model import LmConfig
from .optim import LrSchedule
from .trainer import TrainPlan
from .tree import ParamTree


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {
        "n_domains": 4,
        "sequences_per_domain": 100,
        "seq_len": 64,
        "vocab_size": 64,
        "seed": 1,
        "switch_prob": 0.0,
        "prefix_len": 32,
        "prefix_bias": 0.9,
        "domain_blend": 0.0,
    },
    "model": {
        "n_blocks": 2,
        "hidden_dim": 32,
        "n_heads": 4,
        "seed": 7,
    },
    "pretrain": {
        "steps": 300,
        "batch_size": 8,
        "peak_lr": 1e-3,
        "warmup_frac": 0.1,
        "val_frac": 0.05,
    },
    "modular": {
        "levels": [2, 2],
        "path_specific": [],
        "embed_level": 1,
    },
    "routing": {
        "router": "kmeans",  # kmeans | product | discriminative
        "overlap": 1,
        "router_data_frac": 0.02,
        "val_frac": 0.1,
        "seed": 3,
        "kmeans_iters": 50,
        "bootstrap_outer_steps": 2,  # discriminative: phases of generative training first
    },
    "plan": {
        "outer_steps": 6,
        "inner_steps": 20,
        "batch_size": 8,
        "inner_optimizer": "adamw",
        "schedule": "cosine",  # cosine | constant
        "peak_lr": 1e-3,
        "warmup_frac": 0.1,
        "weight_decay": 0.1,
        "outer_lr": 0.7,
        "outer_momentum": 0.9,
        "reweigh": False,
        "rescale": False,
        "early_stop": False,
        "reshard_at": None,  # int, or "auto" for max(2, T // 3)
        "path_sample_frac": 1.0,
        "seed": 5,
    },
    "harness": {
        "workers": 4,
        "executors": 2,
        "lease_ticks": 1000,
        "step_ticks": 10,
        "monitor_ticks": 50,
    },
    "eval": {
        "route_every": 0,
        "feature_source": "active",
        "chunk_window": None,  # forward window for chunk-router targets; null = suffix
        "train_chunk": 32,
        "switch_prob": None,  # eval-corpus switching; null = same as data
        "sequences_per_domain": 30,
        "seed_offset": 1000,
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_scalar(text: str) -> Any:
    return yaml.safe_load(text)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply repeated --set section.key=value pairs."""
    out = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = out
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ConfigError(f"unknown config section {dotted!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[keys[-1]] = _parse_scalar(raw)
    return out


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except yaml.YAMLError as e:
            raise ConfigError(f"config file is not valid YAML: {e}")
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be a mapping of sections")
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for section, body in loaded.items():
            if not isinstance(body, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            bad = set(body) - set(DEFAULTS[section])
            if bad:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
        cfg = _deep_merge(cfg, loaded)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        corpus_config(cfg)
        lm_config(cfg)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e))
    plan_section = cfg["plan"]
    if plan_section["outer_steps"] < 1 or plan_section["inner_steps"] < 1:
        raise ConfigError("plan.outer_steps and plan.inner_steps must be >= 1")
    if cfg["routing"]["router"] not in ("kmeans", "product", "discriminative"):
        raise ConfigError(f"unknown router {cfg['routing']['router']!r}")
    if cfg["routing"]["overlap"] not in (1, 2):
        raise ConfigError("routing.overlap must be 1 or 2")
    levels = cfg["modular"]["levels"]
    if not levels or any(int(k) < 1 for k in levels):
        raise ConfigError("modular.levels must be a non-empty list of positive counts")


def save_config(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))


# -- typed views --------------------------------------------------------------


def corpus_config(cfg: dict, eval_corpus: bool = False) -> CorpusConfig:
    d = cfg["data"]
    if eval_corpus:
        e = cfg["eval"]
        switch = d["switch_prob"] if e["switch_prob"] is None else e["switch_prob"]
        return CorpusConfig(
            n_domains=d["n_domains"],
            sequences_per_domain=e["sequences_per_domain"],
            seq_len=d["seq_len"],
            vocab_size=d["vocab_size"],
            seed=d["seed"] + e["seed_offset"],
            switch_prob=switch,
            prefix_len=d["prefix_len"],
            prefix_bias=d["prefix_bias"],
            domain_blend=d["domain_blend"],
        )
    return CorpusConfig(
        n_domains=d["n_domains"],
        sequences_per_domain=d["sequences_per_domain"],
        seq_len=d["seq_len"],
        vocab_size=d["vocab_size"],
        seed=d["seed"],
        switch_prob=d["switch_prob"],
        prefix_len=d["prefix_len"],
        prefix_bias=d["prefix_bias"],
        domain_blend=d["domain_blend"],
    )


def lm_config(cfg: dict) -> LmConfig:
    d, m = cfg["data"], cfg["model"]
    return LmConfig(
        vocab_size=d["vocab_size"],
        seq_len=d["seq_len"],
        n_blocks=m["n_blocks"],
        hidden_dim=m["hidden_dim"],
        n_heads=m["n_heads"],
        seed=m["seed"],
    )


def schedule_for(section: dict, total_steps: int) -> LrSchedule:
    kind = section.get("schedule", "cosine")
    warmup = int(round(section.get("warmup_frac", 0.1) * total_steps))
    return LrSchedule(
        kind="cosine" if kind == "cosine" else "constant",
        peak=section["peak_lr"],
        warmup_steps=warmup if kind == "cosine" else 0,
        total_steps=total_steps,
    )


def train_plan(cfg: dict, init: ParamTree, **extra) -> TrainPlan:
    p = cfg["plan"]
    total = p["outer_steps"] * p["inner_steps"]
    reshard_at = p["reshard_at"]
    if reshard_at == "auto":  # once during training, at roughly a third
        reshard_at = max(2, p["outer_steps"] // 3)
    kwargs = dict(
        outer_steps=p["outer_steps"],
        inner_steps=p["inner_steps"],
        init=init,
        batch_size=p["batch_size"],
        prefix_len=cfg["data"]["prefix_len"],
        inner_optimizer=p["inner_optimizer"],
        schedule=schedule_for(p, total),
        weight_decay=p["weight_decay"],
        outer_lr=p["outer_lr"],
        outer_momentum=p["outer_momentum"],
        reweigh=p["reweigh"],
        rescale=p["rescale"],
        early_stop=p["early_stop"],
        reshard_at=reshard_at,
        path_sample_frac=p["path_sample_frac"],
        seed=p["seed"],
    )
    kwargs.update(extra)
    return TrainPlan(**kwargs)
