"""Gaussian and Gaussian-mixture densities, samplers and divergences.

All functions accept leading batch axes; the event axis is the last one
(and the component axis precedes it for mixtures).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_STD_MIN = -7.0
LOG_STD_MAX = 7.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
# log-weight used for mixture components that are switched off; exp() of it is exactly 0
MASKED_LOG_WEIGHT = -1e30


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Covariance failed the symmetric positive-definite check."""


@dataclass(frozen=True)
class DiagGaussianParams:
    """Diagonal Gaussian with clamped log standard deviations."""

    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        mean = ad.as_tensor(self.mean)
        log_std = ad.as_tensor(self.log_std)
        if mean.shape != log_std.shape:
            raise ad.ShapeError("DiagGaussianParams", (mean.shape, log_std.shape))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", ad.clip(log_std, LOG_STD_MIN, LOG_STD_MAX))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> Tensor:
        return ad.exp(self.log_std)

    def detach(self) -> "DiagGaussianParams":
        return DiagGaussianParams(ad.stop_gradient(self.mean), ad.stop_gradient(self.log_std))

    @classmethod
    def standard(cls, dim: int, batch_shape: tuple = ()) -> "DiagGaussianParams":
        zeros = np.zeros(tuple(batch_shape) + (dim,))
        return cls(Tensor(zeros), Tensor(zeros.copy()))


def diag_log_prob(z, params: DiagGaussianParams) -> Tensor:
    """log N(z | mean, diag(exp(2 log_std))), summed over the last axis."""
    z = ad.as_tensor(z)
    inv_std = ad.exp(ad.neg(params.log_std))
    u = (z - params.mean) * inv_std
    per_dim = ad.neg(params.log_std) - 0.5 * ad.square(u) - HALF_LOG_2PI
    return ad.sum_(per_dim, axis=-1)


def diag_sample(params: DiagGaussianParams, noise) -> Tensor:
    """Reparameterised draw ``mean + std * noise`` with externally supplied noise."""
    return params.mean + params.std * ad.as_tensor(noise)


def kl_diag(p: DiagGaussianParams, q: DiagGaussianParams) -> Tensor:
    """Closed-form KL(p || q) for diagonal Gaussians, summed over the last axis."""
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ad.ShapeError("kl_diag", (p.mean.shape, q.mean.shape))
    var_ratio = ad.exp(2.0 * (p.log_std - q.log_std))
    diff = (p.mean - q.mean) * ad.exp(ad.neg(q.log_std))
    per_dim = (q.log_std - p.log_std) + 0.5 * (var_ratio + ad.square(diff)) - 0.5
    return ad.sum_(per_dim, axis=-1)


@dataclass(frozen=True)
class MixtureParams:
    """K-component diagonal Gaussian mixture.

    ``components`` holds stacked parameters of shape ``(..., K, D)`` and
    ``log_weights`` has shape ``(..., K)`` with ``logsumexp == 0``.
    """

    components: DiagGaussianParams
    log_weights: Tensor

    def __post_init__(self):
        lw = ad.as_tensor(self.log_weights)
        object.__setattr__(self, "log_weights", lw)
        if self.components.mean.shape[:-1] != lw.shape:
            raise ad.ShapeError("MixtureParams", (self.components.mean.shape, lw.shape))
        if lw.shape[-1] < 1:
            raise ValueError("mixture needs K >= 1 components")
        top = lw.value.max(axis=-1, keepdims=True)
        norm = np.squeeze(top, -1) + np.log(np.exp(lw.value - top).sum(axis=-1))
        if np.max(np.abs(norm)) > 1e-10:
            raise ValueError("mixture log-weights must satisfy logsumexp == 0")

    @property
    def num_components(self) -> int:
        return self.log_weights.shape[-1]

    @property
    def dim(self) -> int:
        return self.components.dim

    @classmethod
    def from_logits(cls, components: DiagGaussianParams, logits) -> "MixtureParams":
        return cls(components, ad.log_softmax(logits, axis=-1))

    def detach(self) -> "MixtureParams":
        return MixtureParams(self.components.detach(), ad.stop_gradient(self.log_weights))


def mixture_log_prob(z, params: MixtureParams) -> Tensor:
    """log sum_k w_k N(z | mean_k, std_k)."""
    z = ad.expand_dims(ad.as_tensor(z), -2)
    comp = diag_log_prob(z, params.components)
    return ad.logsumexp(comp + params.log_weights, axis=-1)


def select_component(params: MixtureParams, index: np.ndarray) -> DiagGaussianParams:
    """Gather component ``index`` (shape = batch shape) from each mixture."""
    idx = np.asarray(index, dtype=np.intp)[..., None, None]
    idx = np.broadcast_to(idx, idx.shape[:-1] + (params.dim,))
    squeeze = idx.shape[:-2] + (params.dim,)
    mean = ad.reshape(ad.take_along_axis(params.components.mean, idx, axis=-2), squeeze)
    log_std = ad.reshape(ad.take_along_axis(params.components.log_std, idx, axis=-2), squeeze)
    return DiagGaussianParams(mean, log_std)


def draw_components(log_weights: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical draws; weights are plain arrays (no gradient)."""
    w = np.exp(np.asarray(log_weights))
    cdf = np.cumsum(w, axis=-1)
    cdf = cdf / cdf[..., -1:]
    idx = (np.asarray(uniforms)[..., None] >= cdf).sum(axis=-1)
    return np.minimum(idx, w.shape[-1] - 1)


def mixture_sample(params: MixtureParams, rng: np.random.Generator | None = None, *,
                   noise=None, uniforms=None) -> tuple[Tensor, np.ndarray]:
    """Draw a component from the frozen weights, then reparameterise within it.

    Either ``rng`` or both ``noise`` and ``uniforms`` must be given.
    """
    batch = params.log_weights.shape[:-1]
    if uniforms is None:
        uniforms = rng.random(batch)
    if noise is None:
        noise = rng.standard_normal(batch + (params.dim,))
    index = draw_components(params.log_weights.value, uniforms)
    z = diag_sample(select_component(params, index), noise)
    return z, index


def kl_monte_carlo(sample_p: Callable, log_prob_p: Callable, log_prob_q: Callable, n: int,
                   rng: np.random.Generator) -> tuple[float, float]:
    """Estimate E_p[log p - log q] from ``n`` draws; returns (estimate, standard error).

    ``sample_p(n, rng)`` returns ``n`` samples along the first axis; the log-prob
    callables may return arrays or tensors.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    z = sample_p(n, rng)
    lp = np.asarray(ad.as_tensor(log_prob_p(z)).value)
    lq = np.asarray(ad.as_tensor(log_prob_q(z)).value)
    diff = lp - lq
    se = float(diff.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return float(diff.mean()), se


@dataclass(frozen=True)
class FullGaussian:
    """Dense-covariance Gaussian, used by the analytic oracle only."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ad.ShapeError("FullGaussian", (mean.shape, cov.shape))
        scale = max(1.0, float(np.max(np.abs(cov))))
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise NotPositiveDefiniteError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError("covariance is not positive definite") from None

    def log_det(self) -> float:
        return float(2.0 * np.log(np.diag(self.cholesky())).sum())

    def to_diag(self, atol: float = 1e-10) -> DiagGaussianParams:
        off = self.covariance - np.diag(np.diag(self.covariance))
        if np.max(np.abs(off), initial=0.0) > atol:
            raise ValueError("covariance is not diagonal")
        return DiagGaussianParams(Tensor(self.mean.copy()),
                                  Tensor(0.5 * np.log(np.diag(self.covariance))))


def full_gaussian_log_prob(x, g: FullGaussian):
    """Exact log-density through the Cholesky factor; ``x`` may carry batch axes."""
    x = np.asarray(x, dtype=np.float64)
    chol = g.cholesky()
    diff = x - g.mean
    flat = diff.reshape(-1, g.dim).T
    sol = np.linalg.solve(chol, flat)
    maha = (sol * sol).sum(axis=0).reshape(diff.shape[:-1])
    out = -0.5 * maha - 0.5 * g.log_det() - g.dim * HALF_LOG_2PI
    return float(out) if out.ndim == 0 else out
