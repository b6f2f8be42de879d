"""Experiment configuration: nested JSON with defaults, dotted overrides and a content hash."""

from __future__ import annotations

import copy
import hashlib
import json
from typing import Any, Iterable, Mapping

DATASET_KINDS = ("linear", "nonlinear-ivae-style", "label-plus-continuous")


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "dataset": {
        "kind": "linear",
        "n_train": 2000,
        "n_test": 2000,
        "num_modalities": 5,
        "latent_dim": 10,
        "dim_low": 10,
        "dim_high": 20,
        "obs_dim": 25,
        "num_classes": 5,
        "sigma": None,
        "eta": 0.0,
        "private_dim": 0,
    },
    "model": {
        "hidden": [64, 64],
        "activation": "leaky_relu",
        "scale_mode": "fixed",
        "log_scale": None,
        "mixture_prior": None,
        "sigma_source": "mle",
    },
    "encoder": {
        "scheme": "sum-pooling",
        "feature_dim": 32,
        "hidden": [64, 64],
        "pool_dim": 64,
        "chi_hidden": [64],
        "rho_hidden": [64],
        "attention_width": 32,
        "heads": 4,
        "blocks": 2,
        "ffn_hidden": 64,
        "mixture_components": 1,
        "activation": "relu",
    },
    "objective": {
        "bound": "masked",
        "beta": 1.0,
        "sampler": "hierarchical",
        "private": False,
        "fixed_subset": [],
        "stl": True,
    },
    "training": {
        "epochs": 200,
        "batch_size": 100,
        "lr_start": 3e-3,
        "lr_end": 6e-4,
        "log_every": 100,
    },
    "evaluation": {
        "metrics": ["llh", "mcc", "rates", "accuracy", "coherence"],
        "is_samples": 512,
        "mc_samples": 10,
        "eval_points": 500,
    },
    "output_dir": "runs/default",
}

# dataset-dependent sigma used when "dataset.sigma" is null
DEFAULT_SIGMA = {"linear": 1.0, "nonlinear-ivae-style": 0.5, "label-plus-continuous": 0.1}


def merge(base: Mapping, override: Mapping, path: str = "") -> dict:
    """Recursive merge; unknown keys are rejected."""
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where!r} expects an object")
            out[key] = merge(out[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: Mapping, assignments: Iterable[str]) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as JSON when possible."""
    out = copy.deepcopy(dict(config))
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = parse_value(raw)
    return out


def validate(config: Mapping) -> dict:
    cfg = dict(config)
    ds = cfg["dataset"]
    if ds["kind"] not in DATASET_KINDS:
        raise ConfigError(f"unknown dataset kind {ds['kind']!r}")
    for key in ("n_train", "n_test", "num_modalities", "latent_dim"):
        if not isinstance(ds[key], int) or ds[key] < 1:
            raise ConfigError(f"dataset.{key} must be a positive integer")
    if not 0.0 <= float(ds["eta"]) < 1.0:
        raise ConfigError("dataset.eta must lie in [0, 1)")
    tr = cfg["training"]
    if not isinstance(tr["epochs"], int) or tr["epochs"] < 0:
        raise ConfigError("training.epochs must be a non-negative integer")
    if not isinstance(tr["batch_size"], int) or tr["batch_size"] < 1:
        raise ConfigError("training.batch_size must be a positive integer")
    if float(cfg["objective"]["beta"]) <= 0:
        raise ConfigError("objective.beta must be positive")
    if cfg["evaluation"]["is_samples"] < 1:
        raise ConfigError("evaluation.is_samples must be positive")
    return cfg


def load(text: str | None = None, overrides: Iterable[str] = ()) -> dict:
    """Defaults, then a JSON document, then dotted overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if text:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, Mapping):
            raise ConfigError("config must be a JSON object")
        cfg = merge(cfg, doc)
    cfg = apply_overrides(cfg, overrides)
    return validate(cfg)


def dumps(config: Mapping) -> str:
    return json.dumps(config, sort_keys=True, indent=2)


def config_hash(config: Mapping) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def dataset_sigma(config: Mapping) -> float:
    ds = config["dataset"]
    return float(DEFAULT_SIGMA[ds["kind"]] if ds["sigma"] is None else ds["sigma"])
