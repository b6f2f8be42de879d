"""Parameter stores, initialisers and small network building blocks."""

from __future__ import annotations

import json
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict  # name -> np.ndarray (or Tensor while a tape is active)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape if shape is not None else (fan_in, fan_out))


def init_dense(rng, prefix: str, n_in: int, n_out: int) -> Params:
    return {f"{prefix}.W": glorot_uniform(rng, n_in, n_out), f"{prefix}.b": np.zeros(n_out)}


def dense(p: Mapping, prefix: str, x) -> Tensor:
    return ad.matmul(x, p[f"{prefix}.W"]) + p[f"{prefix}.b"]


def init_mlp(rng, prefix: str, sizes: Sequence[int]) -> Params:
    out: Params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out.update(init_dense(rng, f"{prefix}.{i}", a, b))
    return out


def activate(x, kind: str):
    if kind == "relu":
        return ad.relu(x)
    if kind == "leaky_relu":
        return ad.leaky_relu(x, 0.2)
    if kind in ("identity", "linear", None):
        return ad.as_tensor(x)
    raise ValueError(f"unknown activation {kind!r}")


def mlp(p: Mapping, prefix: str, x, n_layers: int, activation: str = "relu") -> Tensor:
    """Dense stack with ``activation`` between layers and a linear output."""
    h = ad.as_tensor(x)
    for i in range(n_layers):
        h = dense(p, f"{prefix}.{i}", h)
        if i < n_layers - 1:
            h = activate(h, activation)
    return h


def init_layer_norm(prefix: str, dim: int) -> Params:
    return {f"{prefix}.scale": np.ones(dim), f"{prefix}.shift": np.zeros(dim)}


def layer_norm(p: Mapping, prefix: str, x) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.scale"], p[f"{prefix}.shift"])


def count(params: Mapping) -> int:
    return int(sum(np.size(v) for v in params.values()))


def params_to_json(params: Mapping[str, np.ndarray], **meta) -> str:
    """Flat JSON document: name -> {shape, values}; extra keys go under ``meta``."""
    doc = {
        "meta": meta,
        "params": {
            name: {"shape": list(np.shape(v)), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for name, v in sorted(params.items())
        },
    }
    return json.dumps(doc, sort_keys=True)


def params_from_json(text: str) -> tuple[Params, dict]:
    doc = json.loads(text)
    params = {
        name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return params, doc.get("meta", {})
