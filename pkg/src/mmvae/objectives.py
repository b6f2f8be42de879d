"""Variational objectives, their single-sample gradient estimators, and Adam.

The masked objective for a subset S is the sum of two terms:

* ``L_S``: an ELBO for the modalities in S, encoded from S alone;
* ``L_C``: reconstruction of the complement from a latent encoded from all
  modalities, regularised towards the subset encoder q(z | x_S).

The training steps follow the sticking-the-landing recipe. Densities that
score the sampled latent are evaluated with parameters behind
``stop_gradient``, and mixture weights are never differentiated through the
sampling step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .aggregation import MaskSubset
from .autodiff import Tensor
from .distributions import (
    DiagGaussianParams,
    MixtureParams,
    diag_log_prob,
    diag_sample,
    draw_components,
    kl_diag,
    mixture_log_prob,
    select_component,
)
from .model import GenerativeModel, prior_distribution, prior_log_prob

BOUND_KINDS = ("masked", "mixture", "tc", "masked-augmented-mixture-prior")
SAMPLER_KINDS = ("hierarchical", "fixed-subset", "uniform-singletons")


@dataclass(frozen=True)
class ObjectiveConfig:
    bound: str = "masked"
    beta: float = 1.0
    sampler: str = "hierarchical"
    mc_samples: int = 1
    private: bool = False
    stl: bool = True
    fixed_subset: tuple = ()

    def __post_init__(self):
        if self.bound not in BOUND_KINDS:
            raise ValueError(f"unknown bound kind {self.bound!r}")
        if self.sampler not in SAMPLER_KINDS:
            raise ValueError(f"unknown mask sampler {self.sampler!r}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.bound == "tc" and self.sampler != "uniform-singletons":
            object.__setattr__(self, "sampler", "uniform-singletons")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


# ---------------------------------------------------------------------------
# subsets and per-element noise


def sample_mask(rng: np.random.Generator, m: int, gamma: float | None = None) -> MaskSubset:
    """Hierarchical draw: gamma ~ U(0, 1), then each modality kept with probability gamma."""
    if m < 1:
        raise ValueError("need at least one modality")
    if gamma is None:
        gamma = rng.random()
    u = rng.random(m)
    return MaskSubset(tuple(bool(b) for b in u < gamma))


def mask_from_uniforms(kind: str, gamma: float, u: np.ndarray, fixed: Sequence[int] = ()) -> np.ndarray:
    m = u.shape[-1]
    if kind == "hierarchical":
        return u < gamma
    if kind == "uniform-singletons":
        out = np.zeros(m, dtype=bool)
        out[min(int(gamma * m), m - 1)] = True
        return out
    return MaskSubset.from_indices(m, fixed).as_array()


@dataclass
class StepNoise:
    """Randomness for one batch; row ``b`` comes from its own generator."""

    mask: np.ndarray
    comp_s: np.ndarray
    eps_s: np.ndarray
    priv_s: np.ndarray
    comp_m: np.ndarray
    eps_m: np.ndarray
    priv_m: np.ndarray


def element_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def draw_step_noise(rngs: Sequence[np.random.Generator], m: int, shared_dim: int, private_dim: int,
                    config: ObjectiveConfig) -> StepNoise:
    rows = []
    for rng in rngs:
        gamma = rng.random()
        u = rng.random(m)
        rows.append((
            mask_from_uniforms(config.sampler, gamma, u, config.fixed_subset),
            rng.random(), rng.standard_normal(shared_dim), rng.standard_normal((m, private_dim)),
            rng.random(), rng.standard_normal(shared_dim), rng.standard_normal((m, private_dim)),
        ))
    cols = list(zip(*rows))
    return StepNoise(*(np.stack(c) for c in cols))


# ---------------------------------------------------------------------------
# density helpers


def log_prob(z, dist) -> Tensor:
    if isinstance(dist, MixtureParams):
        return mixture_log_prob(z, dist)
    return diag_log_prob(z, dist)


def detach(dist):
    return dist.detach()


def sample_from(dist, noise, uniforms) -> Tensor:
    """Reparameterised draw; ``noise`` may carry extra leading sample axes."""
    noise = np.asarray(noise)
    if isinstance(dist, DiagGaussianParams):
        return diag_sample(dist, noise)
    batch = noise.shape[:-1]
    k, d = dist.num_components, dist.dim
    comps = DiagGaussianParams(
        ad.broadcast_to(dist.components.mean, batch + (k, d)),
        ad.broadcast_to(dist.components.log_std, batch + (k, d)),
    )
    weights = np.broadcast_to(dist.log_weights.value, batch + (k,))
    index = draw_components(weights, np.broadcast_to(uniforms, batch))
    chosen = select_component(MixtureParams(comps, Tensor(weights)), index)
    return diag_sample(chosen, noise)


def kl_term(p, q, z, analytic: bool = True) -> Tensor:
    """KL(p || q): closed form for two diagonal Gaussians, else log p(z) - log q(z) at ``z ~ p``."""
    if analytic and isinstance(p, DiagGaussianParams) and isinstance(q, DiagGaussianParams):
        return kl_diag(p, q)
    return log_prob(z, p) - log_prob(z, q)


# ---------------------------------------------------------------------------
# bound estimators


@dataclass
class BoundEstimate:
    """Per-data-point MC averages; ``total = sum(reconstruction) - beta * sum(rates)``."""

    total: np.ndarray
    reconstruction: dict
    rates: dict
    subset: object
    per_modality: dict
    beta: float
    standard_error: np.ndarray
    samples: np.ndarray = field(repr=False, default=None)

    def term_sum(self) -> np.ndarray:
        recon = sum(self.reconstruction.values())
        rates = sum(self.rates.values())
        return recon - self.beta * rates


def _batch_mask(subset, batch: int, m: int) -> np.ndarray:
    if isinstance(subset, MaskSubset):
        return subset.as_array(batch)
    arr = np.asarray(subset, dtype=bool)
    return np.broadcast_to(arr, (batch, m)).copy()


def _batch_size(x) -> int:
    return int(np.shape(x[0])[0])


def _noise(rng, n: int, batch: int, dim: int):
    return rng.standard_normal((n, batch, dim)), rng.random((n, batch))


def _observed(observed, batch: int, m: int) -> np.ndarray:
    if observed is None:
        return np.ones((batch, m), dtype=bool)
    return np.asarray(observed, dtype=bool)


def _finish(per_sample_recon: dict, per_sample_rates: dict, per_modality: dict, beta: float,
            subset, active: np.ndarray, analytic_rates: dict) -> BoundEstimate:
    recon = {k: np.where(active, v.mean(axis=0), 0.0) for k, v in per_sample_recon.items()}
    rates = {}
    for k, v in per_sample_rates.items():
        rates[k] = np.where(active, v.mean(axis=0), 0.0)
    for k, v in analytic_rates.items():
        rates[k] = np.where(active, v, 0.0)
    samples = sum(per_sample_recon.values()) - beta * (
        sum(per_sample_rates.values()) if per_sample_rates else 0.0
    )
    samples = np.where(active, samples, 0.0)
    n = samples.shape[0]
    se = samples.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(samples.shape[1:], np.nan)
    est = BoundEstimate(np.zeros(active.shape), recon, rates, subset,
                        {s: np.where(active, v.mean(axis=0), 0.0) for s, v in per_modality.items()},
                        beta, se, samples)
    est.total = est.term_sum()
    return est


def _recon(model: GenerativeModel, x, z, weights, params) -> tuple[np.ndarray, dict]:
    total, terms = model.reconstruction(x, z, weights, params)
    per_mod = {s: t.value for s, t in enumerate(terms) if t is not None}
    return total.value, per_mod


def marginal_bound(x, subset, model: GenerativeModel, encoder, params: Mapping, beta: float,
                   rng: np.random.Generator, n: int = 1, observed=None) -> BoundEstimate:
    """E_q(z|x_S)[log p(x_S | z)] - beta * KL(q(z | x_S) || p(z)); zero when S is empty."""
    b, m = _batch_size(x), model.num_modalities
    mask = _batch_mask(subset, b, m) & _observed(observed, b, m)
    feats = encoder.features(x, params)
    q = encoder.distribution(feats, mask, params)
    prior = prior_distribution(model.prior, params)
    eps, u = _noise(rng, n, b, model.latent_dim)
    z = sample_from(q, eps, u)
    recon, per_mod = _recon(model, x, z, mask, params)
    active = mask.any(axis=-1)
    if isinstance(q, DiagGaussianParams) and isinstance(prior, DiagGaussianParams):
        return _finish({"S": recon}, {}, per_mod, beta, subset, active, {"S": kl_diag(q, prior).value})
    rate = (log_prob(z, q) - prior_log_prob(z, model.prior, params)).value
    return _finish({"S": recon}, {"S": rate}, per_mod, beta, subset, active, {})


def _cross_bound(x, subset, model, encoder, params, beta, rng, n, observed, full_recon: bool) -> BoundEstimate:
    b, m = _batch_size(x), model.num_modalities
    obs = _observed(observed, b, m)
    mask = _batch_mask(subset, b, m) & obs
    feats = encoder.features(x, params)
    q_s = encoder.distribution(feats, mask, params)
    q_m = encoder.distribution(feats, obs, params)
    eps, u = _noise(rng, n, b, model.latent_dim)
    z = sample_from(q_m, eps, u)
    weights = obs if full_recon else (obs & ~mask)
    recon, per_mod = _recon(model, x, z, weights, params)
    active = (obs & ~mask).any(axis=-1)
    if isinstance(q_s, DiagGaussianParams) and isinstance(q_m, DiagGaussianParams):
        return _finish({"M": recon}, {}, per_mod, beta, subset, active,
                       {"cross": kl_diag(q_m, q_s).value})
    rate = (log_prob(z, q_m) - log_prob(z, q_s)).value
    return _finish({"M": recon}, {"cross": rate}, per_mod, beta, subset, active, {})


def conditional_bound(x, subset, model, encoder, params, beta, rng, n=1, observed=None) -> BoundEstimate:
    """E_q(z|x)[log p(x_C | z)] - beta * KL(q(z | x) || q(z | x_S)) for the complement C of S."""
    return _cross_bound(x, subset, model, encoder, params, beta, rng, n, observed, full_recon=False)


def tc_bound(x, subset, model, encoder, params, beta, rng, n=1, observed=None) -> BoundEstimate:
    """E_q(z|x)[log p(x | z)] - beta * KL(q(z | x) || q(z | x_S))."""
    return _cross_bound(x, subset, model, encoder, params, beta, rng, n, observed, full_recon=True)


def mixture_bound(x, subset, model, encoder, params, beta, rng, n=1, observed=None) -> BoundEstimate:
    """E_q(z|x_S)[log p(x | z)] - beta * KL(q(z | x_S) || p(z)); the prior stands in for S empty."""
    b, m = _batch_size(x), model.num_modalities
    obs = _observed(observed, b, m)
    mask = _batch_mask(subset, b, m) & obs
    feats = encoder.features(x, params)
    q = encoder.distribution(feats, mask, params)
    prior = prior_distribution(model.prior, params)
    eps, u = _noise(rng, n, b, model.latent_dim)
    z = sample_from(q, eps, u)
    recon, per_mod = _recon(model, x, z, obs, params)
    active = obs.any(axis=-1)
    if isinstance(q, DiagGaussianParams) and isinstance(prior, DiagGaussianParams):
        return _finish({"M": recon}, {}, per_mod, beta, subset, active, {"S": kl_diag(q, prior).value})
    rate = (log_prob(z, q) - prior_log_prob(z, model.prior, params)).value
    return _finish({"M": recon}, {"S": rate}, per_mod, beta, subset, active, {})


# ---------------------------------------------------------------------------
# training losses (single-sample, STL)


def _freeze(dist, stl: bool):
    return dist.detach() if stl else dist


def masked_objective_loss(x, model: GenerativeModel, encoder, params: Mapping, config: ObjectiveConfig,
                          noise: StepNoise, observed=None) -> tuple[Tensor, dict]:
    """-(L_S + L_C) averaged over the batch, with a dict of per-term batch means."""
    b, m = _batch_size(x), model.num_modalities
    obs = _observed(observed, b, m)
    mask_s = noise.mask & obs
    comp = obs & ~mask_s
    beta = config.beta
    feats = encoder.features(x, params)
    q_s = encoder.distribution(feats, mask_s, params)
    q_m = encoder.distribution(feats, obs, params)
    z_s = sample_from(q_s, noise.eps_s, noise.comp_s)
    z_m = sample_from(q_m, noise.eps_m, noise.comp_m)

    rec_s, _ = model.reconstruction(x, z_s, mask_s, params)
    rate_s = log_prob(z_s, _freeze(q_s, config.stl)) - prior_log_prob(z_s, model.prior, params)
    has_s = mask_s.any(axis=-1)
    l_s = ad.where(has_s, rec_s - beta * rate_s, 0.0)

    rec_c, _ = model.reconstruction(x, z_m, comp, params)
    rate_c = log_prob(z_m, _freeze(q_m, config.stl)) - log_prob(z_m, q_s)
    has_c = comp.any(axis=-1)
    l_c = ad.where(has_c, rec_c - beta * rate_c, 0.0)

    loss = ad.neg(ad.mean(l_s + l_c))
    terms = {
        "recon_S": float(np.where(has_s, rec_s.value, 0).mean()),
        "rate_S": float(np.where(has_s, rate_s.value, 0).mean()),
        "recon_C": float(np.where(has_c, rec_c.value, 0).mean()),
        "rate_C": float(np.where(has_c, rate_c.value, 0).mean()),
    }
    return loss, terms


def mixture_objective_loss(x, model, encoder, params, config, noise, observed=None) -> tuple[Tensor, dict]:
    b, m = _batch_size(x), model.num_modalities
    obs = _observed(observed, b, m)
    mask_s = noise.mask & obs
    feats = encoder.features(x, params)
    q_s = encoder.distribution(feats, mask_s, params)
    z_s = sample_from(q_s, noise.eps_s, noise.comp_s)
    rec, _ = model.reconstruction(x, z_s, obs, params)
    rate = log_prob(z_s, _freeze(q_s, config.stl)) - prior_log_prob(z_s, model.prior, params)
    loss = ad.neg(ad.mean(rec - config.beta * rate))
    return loss, {"recon": float(rec.value.mean()), "rate": float(rate.value.mean())}


def tc_objective_loss(x, model, encoder, params, config, noise, observed=None) -> tuple[Tensor, dict]:
    b, m = _batch_size(x), model.num_modalities
    obs = _observed(observed, b, m)
    mask_s = noise.mask & obs
    feats = encoder.features(x, params)
    q_s = encoder.distribution(feats, mask_s, params)
    q_m = encoder.distribution(feats, obs, params)
    z_m = sample_from(q_m, noise.eps_m, noise.comp_m)
    rec, _ = model.reconstruction(x, z_m, obs, params)
    rate = log_prob(z_m, _freeze(q_m, config.stl)) - log_prob(z_m, q_s)
    rate = ad.where(np.all(mask_s == obs, axis=-1), 0.0, rate)
    loss = ad.neg(ad.mean(rec - config.beta * rate))
    return loss, {"recon": float(rec.value.mean()), "rate": float(rate.value.mean())}


def _private_log_prob(z_priv, bundle, select: np.ndarray) -> Tensor:
    """sum_{s selected} log q(z~_s | ...), shape = batch."""
    per_mod = diag_log_prob(z_priv, bundle.private)
    return ad.sum_(ad.where(select, per_mod, 0.0), axis=-1)


def _std_normal_log_prob(z_priv, select: np.ndarray) -> Tensor:
    per_mod = ad.sum_(-0.5 * ad.square(z_priv) - 0.5 * np.log(2 * np.pi), axis=-1)
    return ad.sum_(ad.where(select, per_mod, 0.0), axis=-1)


def _freeze_bundle(bundle, stl: bool):
    if not stl:
        return bundle
    return type(bundle)(bundle.shared.detach(), bundle.private.detach(), bundle.fallback)


def private_objective_loss(x, model: GenerativeModel, encoder, params: Mapping, config: ObjectiveConfig,
                           noise: StepNoise, observed=None) -> tuple[Tensor, dict]:
    """Masked objective with shared and private latents.

    The conditional rate splits into a shared part, a private part for the
    modalities in S, and a prior part for the private blocks outside S.
    """
    layout = model.layout
    if layout is None:
        raise ValueError("private objective needs a model with a private-latent layout")
    b, m = _batch_size(x), model.num_modalities
    obs = _observed(observed, b, m)
    mask_s = noise.mask & obs
    comp = obs & ~mask_s
    beta, stl = config.beta, config.stl
    p_dim = layout.private_dim
    feats = encoder.features(x, params)
    q_s = encoder.distribution(feats, mask_s, params)
    q_m = encoder.distribution(feats, obs, params)
    zs_shared = sample_from(q_s, noise.eps_s, noise.comp_s)
    zm_shared = sample_from(q_m, noise.eps_m, noise.comp_m)
    prior_shared = DiagGaussianParams.standard(layout.shared_dim)

    rate_s = log_prob(zs_shared, _freeze(q_s, stl)) - diag_log_prob(zs_shared, prior_shared)
    rate_c = log_prob(zm_shared, _freeze(q_m, stl)) - log_prob(zm_shared, q_s)
    if p_dim > 0:
        bundle_s = encoder.private(feats, mask_s, zs_shared, q_s, params)
        zs_priv = diag_sample(bundle_s.private, noise.priv_s)
        rate_s = rate_s + _private_log_prob(zs_priv, _freeze_bundle(bundle_s, stl), mask_s) \
            - _std_normal_log_prob(zs_priv, mask_s)
        bundle_m = encoder.private(feats, obs, zm_shared, q_m, params)
        zm_priv = diag_sample(bundle_m.private, noise.priv_m)
        bundle_sm = encoder.private(feats, mask_s, zm_shared, q_s, params)
        rate_c = rate_c + _private_log_prob(zm_priv, _freeze_bundle(bundle_m, stl), obs) \
            - _private_log_prob(zm_priv, bundle_sm, mask_s) - _std_normal_log_prob(zm_priv, comp)
        z_s = layout.join(zs_shared, zs_priv)
        z_m = layout.join(zm_shared, zm_priv)
    else:
        z_s, z_m = zs_shared, zm_shared

    rec_s, _ = model.reconstruction(x, z_s, mask_s, params)
    has_s = mask_s.any(axis=-1)
    l_s = ad.where(has_s, rec_s - beta * rate_s, 0.0)
    rec_c, _ = model.reconstruction(x, z_m, comp, params)
    has_c = comp.any(axis=-1)
    l_c = ad.where(has_c, rec_c - beta * rate_c, 0.0)
    loss = ad.neg(ad.mean(l_s + l_c))
    terms = {
        "recon_S": float(np.where(has_s, rec_s.value, 0).mean()),
        "rate_S": float(np.where(has_s, rate_s.value, 0).mean()),
        "recon_C": float(np.where(has_c, rec_c.value, 0).mean()),
        "rate_C": float(np.where(has_c, rate_c.value, 0).mean()),
    }
    return loss, terms


def private_kl_terms(z_shared, z_priv, q_m, q_s, bundle_m, bundle_s, mask_s: np.ndarray,
                     observed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample log q(z', z~ | x) - log q(z', z~ | x_S), computed two ways.

    The first value evaluates both joint densities on the concatenated latent;
    the second adds the shared, in-subset private and out-of-subset private
    log-ratios separately.
    """
    def joint(dist, bundle, present):
        mean = ad.where(present[..., None], bundle.private.mean, 0.0)
        log_std = ad.where(present[..., None], bundle.private.log_std, 0.0)
        b = mean.shape[0]
        full = DiagGaussianParams(
            ad.concat([dist.mean, ad.reshape(mean, (b, -1))], axis=-1),
            ad.concat([dist.log_std, ad.reshape(log_std, (b, -1))], axis=-1),
        )
        flat = ad.concat([ad.as_tensor(z_shared), ad.reshape(ad.as_tensor(z_priv), (b, -1))], axis=-1)
        return diag_log_prob(flat, full).value

    assembled = joint(q_m, bundle_m, observed) - joint(q_s, bundle_s, mask_s)
    shared = diag_log_prob(z_shared, q_m).value - diag_log_prob(z_shared, q_s).value
    per_m = diag_log_prob(z_priv, bundle_m.private).value
    per_s = diag_log_prob(z_priv, bundle_s.private).value
    std = (-0.5 * np.asarray(ad.as_tensor(z_priv).value) ** 2 - 0.5 * np.log(2 * np.pi)).sum(-1)
    in_s = np.where(mask_s, per_m - per_s, 0.0).sum(-1)
    out_s = np.where(observed & ~mask_s, per_m - std, 0.0).sum(-1)
    return assembled, shared + in_s + out_s


LOSSES = {
    "masked": masked_objective_loss,
    "masked-augmented-mixture-prior": masked_objective_loss,
    "mixture": mixture_objective_loss,
    "tc": tc_objective_loss,
}


@dataclass
class StepResult:
    loss: float
    grads: dict
    terms: dict


def _step(loss_fn, x, model, encoder, params, config, rng, noise, observed) -> StepResult:
    if noise is None:
        b = _batch_size(x)
        children = rng.spawn(b) if hasattr(rng, "spawn") else [np.random.default_rng(rng.integers(2**63)) for _ in range(b)]
        shared = encoder.layout.shared_dim if getattr(encoder, "layout", None) else model.latent_dim
        p_dim = model.layout.private_dim if model.layout is not None else 0
        noise = draw_step_noise(children, model.num_modalities, shared, p_dim, config)
    with ad.Tape() as tape:
        watched = tape.watch_all(params)
        loss, terms = loss_fn(x, model, encoder, watched, config, noise, observed)
        grads = tape.gradient(loss, watched)
    terms["loss"] = float(loss.value)
    return StepResult(float(loss.value), grads, terms)


def masked_objective_step(x, model, encoder, params, config: ObjectiveConfig, rng=None, *,
                          noise: StepNoise | None = None, observed=None) -> StepResult:
    return _step(masked_objective_loss, x, model, encoder, params, config, rng, noise, observed)


def augmented_objective_step(x, model, encoder, params, config: ObjectiveConfig, rng=None, *,
                             noise: StepNoise | None = None, observed=None) -> StepResult:
    """Masked step under a mixture prior; the optimal cluster factor reduces to log p(z)."""
    if not model.prior.is_mixture:
        raise ValueError("augmented objective requires a gaussian-mixture prior")
    return _step(masked_objective_loss, x, model, encoder, params, config, rng, noise, observed)


def private_objective_step(x, model, encoder, params, config: ObjectiveConfig, rng=None, *,
                           noise: StepNoise | None = None, observed=None) -> StepResult:
    if model.layout is None:
        raise ValueError("private objective needs a model with a private-latent layout")
    return _step(private_objective_loss, x, model, encoder, params, config, rng, noise, observed)


def objective_step(x, model, encoder, params, config: ObjectiveConfig, noise: StepNoise,
                   observed=None) -> StepResult:
    if config.private:
        return private_objective_step(x, model, encoder, params, config, noise=noise, observed=observed)
    if config.bound == "masked-augmented-mixture-prior":
        return augmented_objective_step(x, model, encoder, params, config, noise=noise, observed=observed)
    return _step(LOSSES[config.bound], x, model, encoder, params, config, None, noise, observed)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int = 0
    lr_start: float = 5e-4
    lr_end: float = 1e-4
    total_steps: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Mapping, lr_start: float = 5e-4, lr_end: float = 1e-4,
               total_steps: int = 1, **kw) -> "TrainState":
        return cls(
            {k: np.array(v, dtype=np.float64) for k, v in params.items()},
            {k: np.zeros(np.shape(v)) for k, v in params.items()},
            {k: np.zeros(np.shape(v)) for k, v in params.items()},
            0, lr_start, lr_end, max(int(total_steps), 1), **kw,
        )


def cosine_lr(step: int, lr_start: float, lr_end: float, total: int) -> float:
    frac = min(max(step, 0), total) / total
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + np.cos(np.pi * frac))


def optimizer_step(state: TrainState, grads: Mapping[str, np.ndarray]) -> TrainState:
    """One bias-corrected Adam update at the cosine-scheduled learning rate."""
    if set(grads) != set(state.params):
        missing = sorted(set(state.params) ^ set(grads))
        raise KeyError(f"gradient keys do not match parameters: {missing[:5]}")
    lr = cosine_lr(state.step, state.lr_start, state.lr_end, state.total_steps)
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    params, m, v = {}, {}, {}
    for k in sorted(state.params):
        g = np.asarray(grads[k], dtype=np.float64)
        m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        params[k] = state.params[k] - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    return replace(state, params=params, m=m, v=v, step=t)
