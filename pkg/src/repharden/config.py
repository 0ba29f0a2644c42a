"""Flat key/value configuration shared by the CLI subcommands.

One YAML document, no nesting: every tunable of the hardening loop, the
attacker, the classifier, and the corpus generator gets a single key. Keys
that would collide across groups carry an `agent_` or `classifier_` prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import yaml

from .agent import AgentConfig
from .corpus import CorpusSpec, binary_spec, multiclass_spec
from .errors import ConfigError
from .harden import HardenConfig


@dataclass
class ClassifierParams:
    hash_dim: int = 1024
    d_cat: int = 16
    hidden_dim: int = 64
    epochs: int = 10
    lr: float = 3e-3
    batch_size: int = 128


DEFAULTS: dict = {
    # hardening loop
    "iterations": 15,
    "budget": 1000,
    "mix_ratio": 0.5,
    "retrain_epochs_per_iteration": 1,
    "retrain_lr": 1e-3,
    "retrain_batch_size": 128,
    "collapse_floor": 0.5,
    "seed": 0,
    # attacker
    "agent_lr": 2e-3,
    "agent_batch_size": 32,
    "steps_per_episode": 1000,
    "steps_per_iteration": 50_000,
    "gamma": 0.99,
    "entropy_coef": 0.01,
    "value_coef": 0.5,
    "agent_hidden_dim": 64,
    "mask_heads": False,
    "ppo_clip": None,
    "eval_episodes": 200,
    "source_classes": None,
    "english_vocab_path": None,
    "cost_mode": "action",
    # classifier
    "hash_dim": 1024,
    "d_cat": 16,
    "classifier_hidden_dim": 64,
    "classifier_epochs": 10,
    "classifier_lr": 3e-3,
    "classifier_batch_size": 128,
    # corpus
    "corpus_preset": "binary",
    "corpus_size": 2000,
    "entry_scale": 1.0,
    "split_train": 0.7,
    "split_val": 0.15,
    "split_test": 0.15,
    # gradient baseline
    "epsilon": 0.02,
    "pgd_steps": 5,
}

_LIST_OK = {"source_classes"}  # the only key whose value may be a list


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults overlaid with a YAML file and explicit overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError("config must be a flat key/value mapping")
        for key, value in doc.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(value, dict) or (isinstance(value, list) and key not in _LIST_OK):
                raise ConfigError(f"config key {key!r} must be a scalar")
            cfg[key] = value
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def agent_config(cfg: dict) -> AgentConfig:
    return AgentConfig(
        lr=cfg["agent_lr"],
        batch_size_rl=cfg["agent_batch_size"],
        steps_per_episode=cfg["steps_per_episode"],
        steps_per_iteration=cfg["steps_per_iteration"],
        gamma=cfg["gamma"],
        entropy_coef=cfg["entropy_coef"],
        value_coef=cfg["value_coef"],
        hidden_dim=cfg["agent_hidden_dim"],
        mask_heads=cfg["mask_heads"],
        ppo_clip=cfg["ppo_clip"],
        budget=cfg["budget"],
        eval_episodes=cfg["eval_episodes"],
        source_classes=cfg["source_classes"],
        english_vocab_path=cfg["english_vocab_path"],
        cost_mode=cfg["cost_mode"],
    )


def harden_config(cfg: dict) -> HardenConfig:
    return HardenConfig(
        iterations=cfg["iterations"],
        budget=cfg["budget"],
        mix_ratio=cfg["mix_ratio"],
        retrain_epochs_per_iteration=cfg["retrain_epochs_per_iteration"],
        retrain_lr=cfg["retrain_lr"],
        retrain_batch_size=cfg["retrain_batch_size"],
        collapse_floor=cfg["collapse_floor"],
        agent=agent_config(cfg),
        seed=cfg["seed"],
    )


def classifier_params(cfg: dict) -> ClassifierParams:
    return ClassifierParams(
        hash_dim=cfg["hash_dim"],
        d_cat=cfg["d_cat"],
        hidden_dim=cfg["classifier_hidden_dim"],
        epochs=cfg["classifier_epochs"],
        lr=cfg["classifier_lr"],
        batch_size=cfg["classifier_batch_size"],
    )


def corpus_spec(cfg: dict) -> CorpusSpec:
    preset = cfg["corpus_preset"]
    if preset == "binary":
        make = binary_spec
    elif preset == "multiclass":
        make = multiclass_spec
    else:
        raise ConfigError(f"unknown corpus_preset {preset!r} (expected 'binary' or 'multiclass')")
    return make(size=cfg["corpus_size"], entry_scale=cfg["entry_scale"], seed=cfg["seed"])


def split_ratios(cfg: dict) -> tuple[float, float, float]:
    return (cfg["split_train"], cfg["split_val"], cfg["split_test"])
