"""Minibatch training loop around the objective steps and Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import NonFiniteError
from .linear_oracle import Dataset
from .model import GenerativeModel
from .objectives import (
    ObjectiveConfig,
    TrainState,
    draw_step_noise,
    element_rng,
    objective_step,
    optimizer_step,
)


class NumericFailure(RuntimeError):
    """Non-finite loss or gradient; carries the step index and the term breakdown."""

    def __init__(self, step: int, terms: Mapping, detail: str = ""):
        self.step = step
        self.terms = dict(terms)
        super().__init__(f"non-finite value at step {step}: {detail} terms={self.terms}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 250
    lr_start: float = 5e-4
    lr_end: float = 1e-4
    seed: int = 0
    log_every: int = 50


@dataclass
class TrainResult:
    params: dict
    log: list = field(default_factory=list)
    steps: int = 0


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list:
    order = np.random.default_rng([seed, epoch, 2**31 - 1]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train(model: GenerativeModel, encoder, params: Mapping, data: Dataset, objective: ObjectiveConfig,
          config: TrainConfig, sink: Callable[[str], None] | None = None) -> TrainResult:
    """Run ``config.epochs`` passes; returns the final parameters and the JSON log lines.

    Every row draws its mask and noise from a generator seeded by
    ``(seed, epoch, row index)``, so results do not depend on the batch size
    used for a given row order.
    """
    n = data.size
    per_epoch = -(-n // config.batch_size)
    total = max(config.epochs * per_epoch, 1)
    state = TrainState.create(params, config.lr_start, config.lr_end, total)
    if getattr(encoder, "layout", None) is not None:
        shared_dim = encoder.layout.shared_dim
    else:
        shared_dim = model.latent_dim
    private_dim = model.layout.private_dim if model.layout is not None else 0
    log = []
    for epoch in range(config.epochs):
        for idx in batches(n, config.batch_size, config.seed, epoch):
            rows = data.take(idx)
            rngs = [element_rng(config.seed, epoch, int(i)) for i in idx]
            noise = draw_step_noise(rngs, model.num_modalities, shared_dim, private_dim, objective)
            try:
                result = objective_step(rows.values, model, encoder, state.params, objective, noise,
                                        observed=rows.observed)
            except NonFiniteError as exc:
                raise NumericFailure(state.step, {}, str(exc)) from exc
            bad = [k for k, g in result.grads.items() if not np.all(np.isfinite(g))]
            if not np.isfinite(result.loss) or bad:
                raise NumericFailure(state.step, result.terms, f"gradients {bad[:3]}" if bad else "loss")
            lr = _lr(state)
            state = optimizer_step(state, result.grads)
            if state.step % config.log_every == 0 or state.step == total:
                line = json.dumps({"step": state.step, "epoch": epoch, "lr": lr,
                                   **{k: float(v) for k, v in sorted(result.terms.items())}},
                                  sort_keys=True)
                log.append(line)
                if sink is not None:
                    sink(line)
    return TrainResult(state.params, log, state.step)


def _lr(state: TrainState) -> float:
    from .objectives import cosine_lr

    return float(cosine_lr(state.step, state.lr_start, state.lr_end, state.total_steps))
