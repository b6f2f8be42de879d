"""Generative side: priors over the latent and per-modality decoders.

The joint density is ``p(z) * prod_s p(x_s | z)``. Parameters live in a flat
dict keyed by dotted names (``prior.means``, ``dec0.layer.1.W`` ...), so the
same functions serve training (tensors on a tape) and evaluation (arrays).

Modalities are either continuous vectors or categorical labels. Labels are
stored as a single float column holding the class index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .distributions import (
    DiagGaussianParams,
    MixtureParams,
    diag_log_prob,
    mixture_log_prob,
)

PRIOR_KINDS = ("standard-gaussian", "gaussian-mixture")
DECODER_KINDS = ("linear-gaussian", "mlp-gaussian", "categorical")


@dataclass(frozen=True)
class ModalitySpec:
    """``kind`` is ``continuous`` (``dim`` features) or ``categorical`` (``dim`` classes)."""

    kind: str
    dim: int

    @property
    def width(self) -> int:
        """Number of stored columns."""
        return 1 if self.kind == "categorical" else self.dim


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "standard-gaussian"
    dim: int = 2
    components: int = 0

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "gaussian-mixture" and self.components < 1:
            raise ValueError("mixture prior needs components >= 1")

    @property
    def is_mixture(self) -> bool:
        return self.kind == "gaussian-mixture"

    def init(self, rng: np.random.Generator) -> nn.Params:
        if not self.is_mixture:
            return {}
        k, d = self.components, self.dim
        return {
            "prior.means": rng.uniform(-1.0, 1.0, size=(k, d)) * 2.0,
            "prior.log_stds": np.zeros((k, d)),
            "prior.logits": np.zeros(k),
        }


def prior_distribution(prior: PriorSpec, params: Mapping | None = None):
    """The prior as DiagGaussianParams (standard) or MixtureParams."""
    if not prior.is_mixture:
        return DiagGaussianParams.standard(prior.dim)
    comps = DiagGaussianParams(params["prior.means"], params["prior.log_stds"])
    return MixtureParams.from_logits(comps, params["prior.logits"])


def prior_log_prob(z, prior: PriorSpec, params: Mapping | None = None) -> Tensor:
    dist = prior_distribution(prior, params)
    if isinstance(dist, MixtureParams):
        return mixture_log_prob(z, dist)
    return diag_log_prob(z, dist)


def cluster_log_joint(z, prior: PriorSpec, params: Mapping) -> Tensor:
    """log p(c) + log p(z | c) for every component c, shape (..., K)."""
    if not prior.is_mixture:
        raise ValueError("cluster posterior requires a gaussian-mixture prior")
    dist = prior_distribution(prior, params)
    comp = diag_log_prob(ad.expand_dims(ad.as_tensor(z), -2), dist.components)
    return comp + dist.log_weights


def optimal_cluster_posterior(z, prior: PriorSpec, params: Mapping) -> Tensor:
    """p(c | z) as probabilities over the K components."""
    return ad.softmax(cluster_log_joint(z, prior, params), axis=-1)


def cluster_objective(q, z, prior: PriorSpec, params: Mapping, beta: float) -> Tensor:
    """sum_c q(c) * (beta * log p(c, z) - beta * log q(c)).

    Entries with q(c) = 0 contribute nothing.
    """
    q = ad.as_tensor(q)
    joint = cluster_log_joint(z, prior, params)
    log_q = ad.log(q)
    terms = ad.where(q.value > 0, q * (beta * joint - beta * log_q), 0.0)
    return ad.sum_(terms, axis=-1)


@dataclass(frozen=True)
class DecoderSpec:
    modality: int
    kind: str
    out_dim: int
    hidden: tuple = (64, 64)
    log_scale: float = 0.0
    scale_mode: str = "fixed"
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in DECODER_KINDS:
            raise ValueError(f"unknown decoder kind {self.kind!r}")
        if self.scale_mode not in ("fixed", "learned"):
            raise ValueError(f"unknown scale mode {self.scale_mode!r}")
        if not np.isfinite(self.log_scale):
            raise ValueError("decoder log-scale must be finite")

    @property
    def prefix(self) -> str:
        return f"dec{self.modality}"

    def init(self, rng: np.random.Generator, in_dim: int) -> nn.Params:
        p: nn.Params = {}
        if self.kind == "linear-gaussian":
            p[f"{self.prefix}.W"] = nn.glorot_uniform(rng, in_dim, self.out_dim, (self.out_dim, in_dim))
            p[f"{self.prefix}.b"] = np.zeros(self.out_dim)
        else:
            sizes = [in_dim, *self.hidden, self.out_dim]
            p.update(nn.init_mlp(rng, f"{self.prefix}.layer", sizes))
        if self.scale_mode == "learned" and self.kind != "categorical":
            p[f"{self.prefix}.log_scale"] = np.array(self.log_scale)
        return p


def decoder_output(z, decoder: DecoderSpec, params: Mapping) -> Tensor:
    """Gaussian mean, or class logits for categorical decoders."""
    if decoder.kind == "linear-gaussian":
        w = params[f"{decoder.prefix}.W"]
        return ad.matmul(z, ad.transpose(w)) + params[f"{decoder.prefix}.b"]
    return nn.mlp(params, f"{decoder.prefix}.layer", z, len(decoder.hidden) + 1, decoder.activation)


def decoder_log_scale(decoder: DecoderSpec, params: Mapping):
    key = f"{decoder.prefix}.log_scale"
    if decoder.scale_mode == "learned":
        return params[key]
    return decoder.log_scale


def _class_index(x_s, num_classes: int) -> np.ndarray:
    arr = np.asarray(ad.as_tensor(x_s).value)
    if arr.ndim >= 1 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    idx = np.rint(arr).astype(np.intp)
    if np.any(idx < 0) or np.any(idx >= num_classes) or np.any(np.abs(arr - idx) > 1e-9):
        raise ValueError(f"class index out of range [0, {num_classes})")
    return idx


def decode_log_prob(x_s, z, decoder: DecoderSpec, params: Mapping) -> Tensor:
    """log p(x_s | z) with the batch shape of ``z`` (minus the latent axis)."""
    out = decoder_output(z, decoder, params)
    if decoder.kind == "categorical":
        idx = _class_index(x_s, decoder.out_dim)
        logp = ad.log_softmax(out, axis=-1)
        idx = np.broadcast_to(idx, logp.shape[:-1])[..., None]
        return ad.reshape(ad.take_along_axis(logp, idx, axis=-1), logp.shape[:-1])
    log_scale = decoder_log_scale(decoder, params)
    log_scale = ad.broadcast_to(log_scale, out.shape)
    return diag_log_prob(x_s, DiagGaussianParams(out, log_scale))


def decode_sample(z, decoder: DecoderSpec, params: Mapping, rng: np.random.Generator | None = None,
                  deterministic: bool = False) -> np.ndarray:
    """Draw from p(x_s | z); deterministic mode returns the mean or the argmax class."""
    out = decoder_output(z, decoder, params).value
    if decoder.kind == "categorical":
        if deterministic:
            return np.argmax(out, axis=-1).astype(np.float64)[..., None]
        probs = np.exp(out - out.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        u = rng.random(probs.shape[:-1])
        idx = np.minimum((u[..., None] >= np.cumsum(probs, axis=-1)).sum(-1), decoder.out_dim - 1)
        return idx.astype(np.float64)[..., None]
    if deterministic:
        return out
    scale = np.exp(np.asarray(ad.as_tensor(decoder_log_scale(decoder, params)).value))
    return out + scale * rng.standard_normal(out.shape)


@dataclass(frozen=True)
class LatentLayout:
    """Shared block of size ``shared_dim`` followed by one private block per modality."""

    shared_dim: int
    private_dim: int
    num_modalities: int

    @property
    def total_dim(self) -> int:
        return self.shared_dim + self.num_modalities * self.private_dim

    def private_slice(self, s: int) -> tuple[int, int]:
        start = self.shared_dim + s * self.private_dim
        return start, start + self.private_dim

    def decoder_input(self, z, s: int) -> Tensor:
        """(z', z~_s): the only coordinates decoder ``s`` may read."""
        z = ad.as_tensor(z)
        shared = ad.slice_(z, -1, 0, self.shared_dim)
        if self.private_dim == 0:
            return shared
        lo, hi = self.private_slice(s)
        return ad.concat([shared, ad.slice_(z, -1, lo, hi)], axis=-1)

    def split(self, z) -> tuple[Tensor, Tensor]:
        """Shared part (..., D') and private parts (..., M, P)."""
        z = ad.as_tensor(z)
        shared = ad.slice_(z, -1, 0, self.shared_dim)
        private = ad.slice_(z, -1, self.shared_dim, None)
        private = ad.reshape(private, z.shape[:-1] + (self.num_modalities, self.private_dim))
        return shared, private

    def join(self, shared, private) -> Tensor:
        shared = ad.as_tensor(shared)
        private = ad.as_tensor(private)
        flat = ad.reshape(private, private.shape[:-2] + (self.num_modalities * self.private_dim,))
        return ad.concat([shared, flat], axis=-1)


@dataclass
class GenerativeModel:
    prior: PriorSpec
    decoders: list
    modalities: list
    layout: LatentLayout | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.decoders) != len(self.modalities):
            raise ValueError("one decoder per modality is required")
        for s, (dec, mod) in enumerate(zip(self.decoders, self.modalities)):
            if dec.modality != s:
                raise ValueError(f"decoder {s} is labelled for modality {dec.modality}")
            if (dec.kind == "categorical") != (mod.kind == "categorical"):
                raise ValueError(f"decoder kind {dec.kind} does not fit modality {mod.kind}")
            if dec.out_dim != mod.dim:
                raise ValueError(f"decoder {s} outputs {dec.out_dim}, modality has {mod.dim}")
        if self.layout is not None and self.layout.total_dim != self.prior.dim:
            raise ValueError("latent layout does not match the prior dimension")

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    @property
    def latent_dim(self) -> int:
        return self.prior.dim

    def decoder_in_dim(self) -> int:
        if self.layout is None:
            return self.latent_dim
        return self.layout.shared_dim + self.layout.private_dim

    def init(self, rng: np.random.Generator) -> nn.Params:
        params = self.prior.init(rng)
        for dec in self.decoders:
            params.update(dec.init(rng, self.decoder_in_dim()))
        return params

    def decoder_input(self, z, s: int) -> Tensor:
        if self.layout is None:
            return ad.as_tensor(z)
        return self.layout.decoder_input(z, s)

    def modality_log_prob(self, x_s, z, s: int, params: Mapping) -> Tensor:
        return decode_log_prob(x_s, self.decoder_input(z, s), self.decoders[s], params)

    def reconstruction(self, x: Sequence, z, weights: np.ndarray, params: Mapping) -> tuple[Tensor, list]:
        """sum_s weights[..., s] * log p(x_s | z); also returns the per-modality terms.

        ``weights`` is a 0/1 array with the batch shape of ``z`` plus a modality axis.
        """
        weights = np.asarray(weights, dtype=np.float64)
        total = None
        terms = []
        for s in range(self.num_modalities):
            w = weights[..., s]
            if not np.any(w):
                terms.append(None)
                continue
            term = ad.where(w, self.modality_log_prob(x[s], z, s, params), 0.0)
            terms.append(term)
            total = term if total is None else total + term
        if total is None:
            total = ad.Tensor(np.zeros(weights.shape[:-1]))
        return total, terms

    def log_joint(self, x: Sequence, z, params: Mapping, weights=None) -> Tensor:
        z = ad.as_tensor(z)
        if weights is None:
            weights = np.ones(z.shape[:-1] + (self.num_modalities,))
        recon, _ = self.reconstruction(x, z, weights, params)
        return recon + prior_log_prob(z, self.prior, params)
