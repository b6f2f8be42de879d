"""Synthetic multi-modal datasets beyond the linear model.

Latents are drawn from a label-conditional Gaussian,
``z | c ~ N(mu_c, diag(lambda_c))`` with ``mu_c ~ U(-5, 5)`` and
``lambda_c ~ U(0.5, 3)``, and uniform labels ``c``. Continuous modalities are
``x_s = f_s(z) + sigma * noise`` for injective leaky-ReLU networks ``f_s``
whose layers never shrink in width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import singular_values
from .linear_oracle import Dataset, mcar_mask
from .model import ModalitySpec

LEAKY_SLOPE = 0.2
FULL_RANK_TOL = 1e-8


@dataclass(frozen=True)
class ClusterLatents:
    means: np.ndarray
    variances: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "variances": self.variances.tolist()}


@dataclass(frozen=True)
class InjectiveMLP:
    """Leaky-ReLU network with full-rank weights and non-decreasing widths; no activation on the output."""

    weights: tuple

    def __call__(self, z: np.ndarray) -> np.ndarray:
        h = z
        for i, w in enumerate(self.weights):
            h = h @ w.T
            if i < len(self.weights) - 1:
                h = np.where(h > 0, h, LEAKY_SLOPE * h)
        return h

    def min_singular_value(self) -> float:
        return float(min(singular_values(w)[-1] for w in self.weights))

    def to_dict(self) -> dict:
        return {"weights": [w.tolist() for w in self.weights], "slope": LEAKY_SLOPE}


def draw_cluster_latents(rng: np.random.Generator, num_classes: int, dim: int) -> ClusterLatents:
    return ClusterLatents(rng.uniform(-5.0, 5.0, size=(num_classes, dim)),
                          rng.uniform(0.5, 3.0, size=(num_classes, dim)))


def condition_threshold(rng: np.random.Generator, rows: int, cols: int, draws: int = 1000,
                        quantile: float = 0.25) -> float:
    """Quantile of the condition number of U(-1, 1) matrices of the given shape."""
    conds = np.linalg.cond(rng.uniform(-1.0, 1.0, size=(draws, rows, cols)))
    return float(np.quantile(conds, quantile))


def draw_well_conditioned(rng: np.random.Generator, rows: int, cols: int, max_tries: int = 10000) -> np.ndarray:
    """U(-1, 1) matrix redrawn until full rank and better conditioned than a quarter of random draws."""
    threshold = condition_threshold(rng, rows, cols)
    for _ in range(max_tries):
        w = rng.uniform(-1.0, 1.0, size=(rows, cols))
        sv = singular_values(w)
        if sv[-1] > FULL_RANK_TOL and sv[0] / sv[-1] <= threshold:
            return w
    raise RuntimeError("could not draw a well-conditioned weight matrix")


def draw_injective_mlp(rng: np.random.Generator, in_dim: int, out_dim: int,
                       hidden: int | None = None) -> InjectiveMLP:
    """One hidden layer of width ``hidden`` (default ``out_dim``) with well-conditioned weights."""
    hidden = out_dim if hidden is None else hidden
    if not in_dim <= hidden <= out_dim:
        raise ValueError("layer widths must be non-decreasing for injectivity")
    sizes = [in_dim, hidden, out_dim]
    return InjectiveMLP(tuple(draw_well_conditioned(rng, b, a) for a, b in zip(sizes[:-1], sizes[1:])))


def sample_cluster_latents(rng: np.random.Generator, clusters: ClusterLatents, n: int):
    labels = rng.integers(0, clusters.num_classes, size=n)
    z = clusters.means[labels] + np.sqrt(clusters.variances[labels]) * rng.standard_normal(
        (n, clusters.means.shape[1]))
    return z, labels


def label_plus_continuous(rng: np.random.Generator, n: int, num_classes: int = 5, latent_dim: int = 2,
                          obs_dim: int = 2, sigma: float = 0.1, eta: float = 0.0) -> Dataset:
    """Bi-modal data: a continuous modality ``x_0 = f(z) + noise`` and the label ``x_1 = c``."""
    if obs_dim < latent_dim:
        raise ValueError("observation dimension must be at least the latent dimension")
    clusters = draw_cluster_latents(rng, num_classes, latent_dim)
    f = draw_injective_mlp(rng, latent_dim, obs_dim)
    z, labels = sample_cluster_latents(rng, clusters, n)
    x0 = f(z) + sigma * rng.standard_normal((n, obs_dim))
    x1 = labels.astype(np.float64)[:, None]
    observed = mcar_mask(rng, n, 2, eta)
    values = [np.where(observed[:, :1], x0, 0.0), np.where(observed[:, 1:], x1, 0.0)]
    mods = [ModalitySpec("continuous", obs_dim), ModalitySpec("categorical", num_classes)]
    meta = {"kind": "label-plus-continuous", "sigma": sigma, "clusters": clusters.to_dict(),
            "decoders": [f.to_dict()]}
    return Dataset(values, mods, observed, z, labels, meta)


def nonlinear_multimodal(rng: np.random.Generator, n: int, num_modalities: int = 5, latent_dim: int = 10,
                         obs_dim: int = 25, num_classes: int = 5, sigma: float = 0.5,
                         eta: float = 0.0) -> Dataset:
    """``M`` continuous modalities from one cluster-Gaussian latent; labels kept but not observed."""
    clusters = draw_cluster_latents(rng, num_classes, latent_dim)
    fs = [draw_injective_mlp(rng, latent_dim, obs_dim) for _ in range(num_modalities)]
    z, labels = sample_cluster_latents(rng, clusters, n)
    observed = mcar_mask(rng, n, num_modalities, eta)
    values = []
    for s, f in enumerate(fs):
        x = f(z) + sigma * rng.standard_normal((n, obs_dim))
        values.append(np.where(observed[:, s : s + 1], x, 0.0))
    mods = [ModalitySpec("continuous", obs_dim) for _ in range(num_modalities)]
    meta = {"kind": "nonlinear-ivae-style", "sigma": sigma, "clusters": clusters.to_dict(),
            "decoders": [f.to_dict() for f in fs]}
    return Dataset(values, mods, observed, z, labels, meta)
