"""Encoding distributions q(z | x_S) for arbitrary modality subsets.

Each modality first passes through its own feature network. The per-modality
features are then combined by a permutation-invariant aggregator: a product of
experts, a mixture of experts, a mixture of products of experts, sum pooling,
or masked self-attention. Models with private latents use equivariant
aggregators that produce one private block per modality.

Masks are boolean arrays of shape ``(B, M)``. Absent features are zeroed
before aggregation and excluded from every sum and attention softmax. All
sums over modalities run in ascending modality index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .distributions import MASKED_LOG_WEIGHT, DiagGaussianParams, MixtureParams
from .model import GenerativeModel, LatentLayout, ModalitySpec, prior_distribution

SCHEMES = ("poe", "moe", "mopoe", "sum-pooling", "self-attention")
EQUIVARIANT_KINDS = ("poe", "sum-pooling", "self-attention")
MAX_MOPOE_MODALITIES = 12
_ATTN_MASK = -1e30


@dataclass(frozen=True)
class MaskSubset:
    """A subset S of {0, ..., M-1} stored as membership bits."""

    bits: tuple

    @classmethod
    def from_indices(cls, m: int, members) -> "MaskSubset":
        members = set(int(i) for i in members)
        if any(i < 0 or i >= m for i in members):
            raise ValueError(f"modality index outside [0, {m})")
        return cls(tuple(i in members for i in range(m)))

    @classmethod
    def empty(cls, m: int) -> "MaskSubset":
        return cls((False,) * m)

    @classmethod
    def full(cls, m: int) -> "MaskSubset":
        return cls((True,) * m)

    @property
    def num_modalities(self) -> int:
        return len(self.bits)

    @property
    def members(self) -> tuple:
        return tuple(i for i, b in enumerate(self.bits) if b)

    def __len__(self) -> int:
        return sum(self.bits)

    def complement(self) -> "MaskSubset":
        return MaskSubset(tuple(not b for b in self.bits))

    def as_array(self, batch: int | None = None) -> np.ndarray:
        arr = np.array(self.bits, dtype=bool)
        return arr if batch is None else np.broadcast_to(arr, (batch, arr.size)).copy()


@dataclass(frozen=True)
class FeatureSet:
    """Tokens ``features[b, t]`` belonging to modality ``modality[b, t]``.

    Token order is arbitrary; :meth:`canonical` sorts tokens into ascending
    modality index and zeroes absent ones.
    """

    features: Tensor
    present: np.ndarray
    modality: np.ndarray | None = None

    @classmethod
    def stack(cls, per_modality: Sequence, present) -> "FeatureSet":
        feats = ad.concat([ad.expand_dims(h, 1) for h in per_modality], axis=1)
        return cls(feats, np.asarray(present, dtype=bool))

    @property
    def num_modalities(self) -> int:
        return self.features.shape[1]

    def permuted(self, perm: np.ndarray) -> "FeatureSet":
        """Reorder tokens per row; ``perm`` has shape (B, M)."""
        perm = np.asarray(perm, dtype=np.intp)
        modality = self._modality()
        feats = ad.take_along_axis(self.features, perm[..., None], axis=1)
        return FeatureSet(feats, np.take_along_axis(self.present, perm, axis=1),
                          np.take_along_axis(modality, perm, axis=1))

    def _modality(self) -> np.ndarray:
        if self.modality is not None:
            return np.asarray(self.modality, dtype=np.intp)
        b, m = self.present.shape
        return np.broadcast_to(np.arange(m), (b, m)).copy()

    def canonical(self) -> tuple[Tensor, np.ndarray]:
        feats = self.features
        present = np.asarray(self.present, dtype=bool)
        if self.modality is not None:
            modality = self._modality()
            if np.any(np.sort(modality, axis=1) != np.arange(modality.shape[1])):
                raise ValueError("each row must hold one token per modality")
            order = np.argsort(modality, axis=1, kind="stable")
            feats = ad.take_along_axis(feats, order[..., None], axis=1)
            present = np.take_along_axis(present, order, axis=1)
        feats = ad.where(present[..., None], feats, 0.0)
        return feats, present


def _canonical(features, mask) -> tuple[Tensor, np.ndarray]:
    if isinstance(features, FeatureSet):
        feats, present = features.canonical()
        if mask is not None:
            present = present & np.asarray(mask, dtype=bool)
            feats = ad.where(present[..., None], feats, 0.0)
        return feats, present
    feats = ad.as_tensor(features)
    if feats.ndim == 2:
        feats = ad.expand_dims(feats, 0)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    mask = np.broadcast_to(mask, feats.shape[:2])
    return ad.where(mask[..., None], feats, 0.0), mask


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EncoderSpec:
    """Sizes and scheme of the full encoder (feature networks + aggregator)."""

    scheme: str = "sum-pooling"
    latent_dim: int = 2
    feature_dim: int = 32
    hidden: tuple = (64, 64)
    pool_dim: int = 64
    chi_hidden: tuple = (64,)
    rho_hidden: tuple = (64,)
    attention_width: int = 32
    heads: int = 4
    blocks: int = 2
    ffn_hidden: int = 64
    mixture_components: int = 1
    activation: str = "relu"
    shared_dim: int | None = None
    private_dim: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown aggregation scheme {self.scheme!r}")
        if self.attention_width % self.heads:
            raise ValueError("attention width must be divisible by the head count")
        if self.mixture_components < 1:
            raise ValueError("mixture_components must be >= 1")
        if self.private and self.scheme not in EQUIVARIANT_KINDS:
            raise ValueError(f"scheme {self.scheme!r} has no equivariant variant")
        if self.private and self.mixture_components != 1:
            raise ValueError("private-latent encoders use a Gaussian shared head")

    @property
    def private(self) -> bool:
        return self.private_dim > 0

    @property
    def shared(self) -> int:
        return self.latent_dim if self.shared_dim is None else self.shared_dim

    @property
    def expert_dim(self) -> int:
        """Feature width for the expert-based schemes: (mean, log-std) pairs."""
        return 2 * self.shared + 2 * self.private_dim

    @property
    def token_dim(self) -> int:
        return self.expert_dim if self.scheme in ("poe", "moe", "mopoe") else self.feature_dim

    @property
    def head_dim(self) -> int:
        k, d = self.mixture_components, self.shared
        return 2 * d if k == 1 else 2 * d * k + k


# ---------------------------------------------------------------------------
# modality feature networks


def modality_input(x_s, modality: ModalitySpec) -> Tensor:
    """Raw network input: the vector itself, or a one-hot code for labels."""
    if modality.kind == "categorical":
        arr = np.asarray(ad.as_tensor(x_s).value)
        idx = np.rint(arr[..., 0] if arr.ndim > 1 else arr).astype(np.intp)
        return Tensor(np.eye(modality.dim)[np.clip(idx, 0, modality.dim - 1)])
    return ad.as_tensor(x_s)


def init_modality_encoder(rng, s: int, modality: ModalitySpec, spec: EncoderSpec) -> nn.Params:
    sizes = [modality.dim, *spec.hidden, spec.token_dim]
    return nn.init_mlp(rng, f"enc{s}", sizes)


def encode_modality(s: int, x_s, modality: ModalitySpec, spec: EncoderSpec, params: Mapping) -> Tensor:
    """h_s = network_s(x_s), shape (B, token_dim)."""
    inp = modality_input(x_s, modality)
    if inp.shape[-1] != modality.dim:
        raise ad.ShapeError("encode_modality", (inp.shape, (modality.dim,)))
    return nn.mlp(params, f"enc{s}", inp, len(spec.hidden) + 1, spec.activation)


def encode_features(x: Sequence, modalities: Sequence[ModalitySpec], spec: EncoderSpec,
                    params: Mapping, present=None) -> FeatureSet:
    hs = [encode_modality(s, x[s], mod, spec, params) for s, mod in enumerate(modalities)]
    if present is None:
        present = np.ones((hs[0].shape[0], len(hs)), dtype=bool)
    return FeatureSet.stack(hs, present)


# ---------------------------------------------------------------------------
# expert-based aggregators


def _expert(feats: Tensor, dim: int, offset: int = 0) -> DiagGaussianParams:
    mean = ad.slice_(feats, -1, offset, offset + dim)
    log_std = ad.slice_(feats, -1, offset + dim, offset + 2 * dim)
    return DiagGaussianParams(mean, log_std)


def _poe_sum(experts: DiagGaussianParams, mask: np.ndarray, prior: DiagGaussianParams) -> DiagGaussianParams:
    """Precision-weighted product, prior included, summed in ascending modality order."""
    prior_prec = ad.exp(-2.0 * prior.log_std)
    prec_sum = prior_prec
    weighted = prior.mean * prior_prec
    m = experts.mean.shape[-2]
    prec = ad.exp(-2.0 * experts.log_std)
    for s in range(m):
        present = mask[..., s : s + 1]
        prec_s = ad.where(present, ad.getitem(prec, (Ellipsis, s, slice(None))), 0.0)
        mean_s = ad.getitem(experts.mean, (Ellipsis, s, slice(None)))
        prec_sum = prec_sum + prec_s
        weighted = weighted + prec_s * mean_s
    mean = weighted / prec_sum
    return DiagGaussianParams(mean, -0.5 * ad.log(prec_sum))


def aggregate_poe(features, mask, prior: DiagGaussianParams, offset: int = 0) -> DiagGaussianParams:
    """Gaussian product of the present experts and the prior.

    Features hold ``(mean, log_std)`` pairs starting at ``offset``. An empty
    mask returns the prior.
    """
    feats, mask = _canonical(features, mask)
    dim = prior.dim
    return _poe_sum(_expert(feats, dim, offset), mask, prior)


def _moe(feats: Tensor, mask: np.ndarray, dim: int, offset: int = 0) -> MixtureParams:
    counts = mask.sum(axis=-1, keepdims=True)
    safe = np.where(counts > 0, counts, mask.shape[-1])
    weights = np.where(mask | (counts == 0), -np.log(safe), MASKED_LOG_WEIGHT)
    return MixtureParams(_expert(feats, dim, offset), Tensor(weights))


def aggregate_moe(features, mask, dim: int | None = None, offset: int = 0) -> MixtureParams:
    """Uniform mixture of the present experts (component s belongs to modality s).

    Absent modalities keep a component slot with zero weight.
    """
    feats, mask = _canonical(features, mask)
    if np.any(mask.sum(axis=-1) == 0):
        raise ValueError("mixture of experts is undefined on the empty subset")
    dim = feats.shape[-1] // 2 if dim is None else dim
    return _moe(feats, mask, dim, offset)


def subset_table(m: int) -> np.ndarray:
    """All 2^m subsets as a (2^m, m) boolean table, empty subset first."""
    codes = np.arange(2**m)[:, None]
    return ((codes >> np.arange(m)) & 1).astype(bool)


def aggregate_mopoe(features, mask, prior: DiagGaussianParams, offset: int = 0) -> MixtureParams:
    """Uniform mixture over the PoE of every subset of the present modalities.

    Components are indexed by all 2^M subsets of {0..M-1}; those that are not
    subsets of the mask carry zero weight, leaving 2^|S| active components.
    """
    feats, mask = _canonical(features, mask)
    m = feats.shape[1]
    if m > MAX_MOPOE_MODALITIES:
        raise ValueError(
            f"MoPoE needs 2^{m} components; use sum-pooling or self-attention for M > {MAX_MOPOE_MODALITIES}"
        )
    dim = prior.dim
    experts = _expert(feats, dim, offset)
    table = subset_table(m)
    means, log_stds = [], []
    for subset in table:
        comp = _poe_sum(experts, mask & subset, prior)
        means.append(ad.expand_dims(comp.mean, -2))
        log_stds.append(ad.expand_dims(comp.log_std, -2))
    allowed = np.all(~table[None, :, :] | mask[:, None, :], axis=-1)
    n_active = allowed.sum(axis=-1, keepdims=True)
    weights = np.where(allowed, -np.log(n_active), MASKED_LOG_WEIGHT)
    comps = DiagGaussianParams(ad.concat(means, axis=-2), ad.concat(log_stds, axis=-2))
    return MixtureParams(comps, Tensor(weights))


def active_components(mix: MixtureParams, row: int = 0) -> list:
    """Indices of components with nonzero weight in batch row ``row``."""
    lw = mix.log_weights.value.reshape(-1, mix.num_components)[row]
    return [k for k in range(mix.num_components) if lw[k] > MASKED_LOG_WEIGHT / 2]


# ---------------------------------------------------------------------------
# learnable aggregators


def init_sum_pooling(rng, spec: EncoderSpec, prefix: str = "agg", in_dim: int | None = None,
                     out_dim: int | None = None) -> nn.Params:
    in_dim = spec.token_dim if in_dim is None else in_dim
    out_dim = spec.head_dim if out_dim is None else out_dim
    p = nn.init_mlp(rng, f"{prefix}.chi", [in_dim, *spec.chi_hidden, spec.pool_dim])
    p.update(nn.init_mlp(rng, f"{prefix}.rho", [spec.pool_dim, *spec.rho_hidden, out_dim]))
    return p


def _n_layers(params: Mapping, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    return n


def _apply(params: Mapping, prefix: str, x, activation: str) -> Tensor:
    """MLP under ``prefix``; a prefix with no layers is the identity."""
    n = _n_layers(params, prefix)
    return ad.as_tensor(x) if n == 0 else nn.mlp(params, prefix, x, n, activation)


def _masked_token_sum(tokens: Tensor, mask: np.ndarray) -> Tensor:
    m = tokens.shape[1]
    total = None
    for s in range(m):
        tok = ad.where(mask[:, s : s + 1], ad.getitem(tokens, (slice(None), s)), 0.0)
        total = tok if total is None else total + tok
    return total


def sum_pooling_output(features, mask, params: Mapping, prefix: str = "agg",
                       activation: str = "relu") -> Tensor:
    """rho(sum_{s in S} chi(h_s)) as a raw vector."""
    feats, mask = _canonical(features, mask)
    pooled = _masked_token_sum(_apply(params, f"{prefix}.chi", feats, activation), mask)
    return _apply(params, f"{prefix}.rho", pooled, activation)


def head_to_distribution(out: Tensor, dim: int, components: int):
    """Split a head vector into DiagGaussianParams (K=1) or MixtureParams."""
    if components == 1:
        return DiagGaussianParams(ad.slice_(out, -1, 0, dim), ad.slice_(out, -1, dim, 2 * dim))
    k = components
    batch = out.shape[:-1]
    means = ad.reshape(ad.slice_(out, -1, 0, dim * k), batch + (k, dim))
    log_stds = ad.reshape(ad.slice_(out, -1, dim * k, 2 * dim * k), batch + (k, dim))
    logits = ad.slice_(out, -1, 2 * dim * k, 2 * dim * k + k)
    return MixtureParams.from_logits(DiagGaussianParams(means, log_stds), logits)


def aggregate_sum_pooling(features, mask, params: Mapping, spec: EncoderSpec, prefix: str = "agg"):
    out = sum_pooling_output(features, mask, params, prefix, spec.activation)
    return head_to_distribution(out, spec.shared, spec.mixture_components)


def init_attention_blocks(rng, spec: EncoderSpec, prefix: str) -> nn.Params:
    a = spec.attention_width
    p: nn.Params = {}
    for layer in range(spec.blocks):
        bp = f"{prefix}.block{layer}"
        p.update(nn.init_layer_norm(f"{bp}.ln1", a))
        p.update(nn.init_layer_norm(f"{bp}.ln2", a))
        for name in ("q", "k", "v", "o"):
            p.update(nn.init_dense(rng, f"{bp}.{name}", a, a))
        p.update(nn.init_mlp(rng, f"{bp}.ffn", [a, spec.ffn_hidden, a]))
    return p


def init_self_attention(rng, spec: EncoderSpec, prefix: str = "agg", in_dim: int | None = None,
                        out_dim: int | None = None) -> nn.Params:
    in_dim = spec.token_dim if in_dim is None else in_dim
    out_dim = spec.head_dim if out_dim is None else out_dim
    p = nn.init_mlp(rng, f"{prefix}.chi", [in_dim, spec.attention_width])
    p.update(init_attention_blocks(rng, spec, prefix))
    p.update(nn.init_mlp(rng, f"{prefix}.rho", [spec.attention_width, *spec.rho_hidden, out_dim]))
    return p


def masked_attention(params: Mapping, prefix: str, y: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    """Multi-head attention where keys outside the mask get exactly zero weight."""
    b, m, a = y.shape
    dh = a // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (b, m, heads, dh)), (0, 2, 1, 3))

    q = split(nn.dense(params, f"{prefix}.q", y))
    k = split(nn.dense(params, f"{prefix}.k", y))
    v = split(nn.dense(params, f"{prefix}.v", y))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    key_mask = mask[:, None, None, :]
    scores = ad.where(key_mask, scores, _ATTN_MASK)
    weights = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(weights, v)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, m, a))
    return nn.dense(params, f"{prefix}.o", mixed)


def attention_block(params: Mapping, prefix: str, y: Tensor, mask: np.ndarray, heads: int,
                    activation: str = "relu") -> Tensor:
    """Pre-layer-norm block: Z = Y + MHA(LN(Y)); out = Z + FFN(LN(Z)); absent tokens reset to 0."""
    normed = nn.layer_norm(params, f"{prefix}.ln1", y)
    z = y + masked_attention(params, prefix, normed, mask, heads)
    out = z + nn.mlp(params, f"{prefix}.ffn", nn.layer_norm(params, f"{prefix}.ln2", z), 2, activation)
    return ad.where(mask[..., None], out, 0.0)


def _attention_tokens(params: Mapping, prefix: str, g: Tensor, mask: np.ndarray, spec: EncoderSpec) -> Tensor:
    g = ad.where(mask[..., None], g, 0.0)
    for layer in range(spec.blocks):
        g = attention_block(params, f"{prefix}.block{layer}", g, mask, spec.heads, spec.activation)
    return g


def self_attention_output(features, mask, params: Mapping, spec: EncoderSpec, prefix: str = "agg") -> Tensor:
    feats, mask = _canonical(features, mask)
    g = _apply(params, f"{prefix}.chi", feats, spec.activation)
    g = _attention_tokens(params, prefix, g, mask, spec)
    return _apply(params, f"{prefix}.rho", _masked_token_sum(g, mask), spec.activation)


def aggregate_self_attention(features, mask, params: Mapping, spec: EncoderSpec, prefix: str = "agg"):
    out = self_attention_output(features, mask, params, spec, prefix)
    return head_to_distribution(out, spec.shared, spec.mixture_components)


# ---------------------------------------------------------------------------
# private latents


@dataclass(frozen=True)
class PrivateBundle:
    """Shared q(z' | x_S) plus per-modality q(z~_s | z', x_S), shape (B, M, P).

    Rows flagged in ``fallback`` carry the prior p(z~_s | z') = N(0, I).
    """

    shared: DiagGaussianParams
    private: DiagGaussianParams
    fallback: np.ndarray


def init_equivariant(rng, spec: EncoderSpec, prefix: str = "eqv") -> nn.Params:
    p_dim = spec.private_dim
    if spec.scheme == "poe":
        return {}
    if spec.scheme == "sum-pooling":
        p = nn.init_mlp(rng, f"{prefix}.chi0", [spec.token_dim, *spec.chi_hidden, spec.pool_dim])
        p.update(nn.init_mlp(rng, f"{prefix}.chi1", [spec.shared, *spec.chi_hidden, spec.pool_dim]))
        p.update(nn.init_mlp(rng, f"{prefix}.chi2", [spec.token_dim, *spec.chi_hidden, spec.pool_dim]))
        p.update(nn.init_mlp(rng, f"{prefix}.rho", [spec.pool_dim, *spec.rho_hidden, 2 * p_dim]))
        return p
    p = nn.init_mlp(rng, f"{prefix}.chi1", [spec.token_dim, spec.attention_width])
    p.update(nn.init_mlp(rng, f"{prefix}.chi2", [spec.shared, spec.attention_width]))
    p.update(init_attention_blocks(rng, spec, prefix))
    p.update(nn.init_mlp(rng, f"{prefix}.rho", [spec.attention_width, 2 * p_dim]))
    return p


def aggregate_equivariant(kind: str, z_shared, features, mask, params: Mapping, spec: EncoderSpec,
                          shared: DiagGaussianParams, prefix: str = "eqv") -> PrivateBundle:
    """Per-modality private encodings given a shared sample ``z_shared`` of shape (B, D')."""
    if kind != spec.scheme or kind not in EQUIVARIANT_KINDS:
        raise ValueError(f"equivariant kind {kind!r} does not match encoder scheme {spec.scheme!r}")
    feats, mask = _canonical(features, mask)
    b, m = mask.shape
    p_dim = spec.private_dim
    if kind == "poe":
        out = ad.slice_(feats, -1, 2 * spec.shared, 2 * spec.shared + 2 * p_dim)
    elif kind == "sum-pooling":
        pooled = _masked_token_sum(_apply(params, f"{prefix}.chi0", feats, spec.activation), mask)
        from_z = _apply(params, f"{prefix}.chi1", z_shared, spec.activation)
        own = _apply(params, f"{prefix}.chi2", feats, spec.activation)
        hidden = own + ad.expand_dims(pooled + from_z, 1)
        out = _apply(params, f"{prefix}.rho", hidden, spec.activation)
    else:
        g = _apply(params, f"{prefix}.chi1", feats, spec.activation)
        g = g + ad.expand_dims(_apply(params, f"{prefix}.chi2", z_shared, spec.activation), 1)
        g = _attention_tokens(params, prefix, g, mask, spec)
        out = _apply(params, f"{prefix}.rho", g, spec.activation)
    present = mask[..., None]
    mean = ad.where(present, ad.slice_(out, -1, 0, p_dim), 0.0)
    log_std = ad.where(present, ad.slice_(out, -1, p_dim, 2 * p_dim), 0.0)
    return PrivateBundle(shared, DiagGaussianParams(mean, log_std), ~mask)


# ---------------------------------------------------------------------------
# full encoders


def _as_mixture(dist) -> MixtureParams:
    if isinstance(dist, MixtureParams):
        return dist
    comps = DiagGaussianParams(ad.expand_dims(dist.mean, -2), ad.expand_dims(dist.log_std, -2))
    return MixtureParams(comps, Tensor(np.zeros(dist.mean.shape[:-1] + (1,))))


def _pad_mixture(mix: MixtureParams, k: int, batch: tuple) -> MixtureParams:
    comps = mix.components
    mean = ad.broadcast_to(comps.mean, batch + comps.mean.shape[-2:])
    log_std = ad.broadcast_to(comps.log_std, batch + comps.log_std.shape[-2:])
    lw = ad.broadcast_to(mix.log_weights, batch + mix.log_weights.shape[-1:])
    extra = k - mix.num_components
    if extra > 0:
        d = comps.dim
        mean = ad.concat([mean, Tensor(np.zeros(batch + (extra, d)))], axis=-2)
        log_std = ad.concat([log_std, Tensor(np.zeros(batch + (extra, d)))], axis=-2)
        lw = ad.concat([lw, Tensor(np.full(batch + (extra,), MASKED_LOG_WEIGHT))], axis=-1)
    return MixtureParams(DiagGaussianParams(mean, log_std), lw)


def substitute_prior(dist, empty: np.ndarray, prior):
    """Replace rows flagged ``empty`` by the prior, keeping a single representation."""
    empty = np.asarray(empty, dtype=bool)
    if not np.any(empty):
        return dist
    if isinstance(dist, DiagGaussianParams) and isinstance(prior, DiagGaussianParams):
        sel = empty[:, None]
        return DiagGaussianParams(ad.where(sel, prior.mean, dist.mean), ad.where(sel, prior.log_std, dist.log_std))
    batch = empty.shape
    qa, pa = _as_mixture(dist), _as_mixture(prior)
    k = max(qa.num_components, pa.num_components)
    qa, pa = _pad_mixture(qa, k, batch), _pad_mixture(pa, k, batch)
    sel2, sel1 = empty[:, None, None], empty[:, None]
    comps = DiagGaussianParams(
        ad.where(sel2, pa.components.mean, qa.components.mean),
        ad.where(sel2, pa.components.log_std, qa.components.log_std),
    )
    return MixtureParams(comps, ad.where(sel1, pa.log_weights, qa.log_weights))


class LearnedEncoder:
    """Feature networks plus one of the aggregation schemes.

    Parameters are read from the flat parameter dict under ``enc*``, ``agg``
    and ``eqv`` prefixes.
    """

    def __init__(self, spec: EncoderSpec, model: GenerativeModel):
        self.spec = spec
        self.model = model
        if spec.private:
            layout = model.layout
            if layout is None or layout.shared_dim != spec.shared or layout.private_dim != spec.private_dim:
                raise ValueError("encoder private layout does not match the model")
            if model.prior.is_mixture:
                raise ValueError("private-latent models use the standard Gaussian prior")
        elif spec.shared != model.latent_dim:
            raise ValueError("encoder latent dimension does not match the model")

    @property
    def layout(self) -> LatentLayout | None:
        return self.model.layout if self.spec.private else None

    def init(self, rng: np.random.Generator) -> nn.Params:
        spec = self.spec
        p: nn.Params = {}
        for s, mod in enumerate(self.model.modalities):
            p.update(init_modality_encoder(rng, s, mod, spec))
        if spec.scheme == "sum-pooling":
            p.update(init_sum_pooling(rng, spec))
        elif spec.scheme == "self-attention":
            p.update(init_self_attention(rng, spec))
        if spec.private:
            p.update(init_equivariant(rng, spec))
        return p

    def features(self, x: Sequence, params: Mapping) -> FeatureSet:
        return encode_features(x, self.model.modalities, self.spec, params)

    def expert_prior(self, params: Mapping) -> DiagGaussianParams:
        """Prior expert for the product schemes; a mixture prior is replaced by N(0, I)."""
        prior = prior_distribution(self.model.prior, params)
        if isinstance(prior, MixtureParams) or self.spec.private:
            return DiagGaussianParams.standard(self.spec.shared)
        return prior

    def shared_distribution(self, feats: FeatureSet, mask, params: Mapping):
        """q(z | x_S) (or q(z' | x_S) with private latents) without prior substitution."""
        spec = self.spec
        scheme = spec.scheme
        if scheme == "poe":
            return aggregate_poe(feats, mask, self.expert_prior(params))
        if scheme == "mopoe":
            return aggregate_mopoe(feats, mask, self.expert_prior(params))
        if scheme == "moe":
            f, m = _canonical(feats, mask)
            return _moe(f, m, spec.shared)
        if scheme == "sum-pooling":
            return aggregate_sum_pooling(feats, mask, params, spec)
        return aggregate_self_attention(feats, mask, params, spec)

    def distribution(self, feats: FeatureSet, mask, params: Mapping):
        """q(z | x_S) with empty-subset rows replaced by the prior."""
        mask = np.asarray(mask, dtype=bool)
        dist = self.shared_distribution(feats, mask, params)
        empty = ~np.any(mask & feats.present if isinstance(feats, FeatureSet) else mask, axis=-1)
        if self.spec.private:
            prior = DiagGaussianParams.standard(self.spec.shared)
        else:
            prior = prior_distribution(self.model.prior, params)
        return substitute_prior(dist, empty, prior)

    def private(self, feats: FeatureSet, mask, z_shared, shared: DiagGaussianParams,
                params: Mapping) -> PrivateBundle:
        if not self.spec.private:
            raise ValueError("encoder has no private latents")
        return aggregate_equivariant(self.spec.scheme, z_shared, feats, mask, params, self.spec, shared)


def encode(x: Sequence, mask, encoder: LearnedEncoder, params: Mapping, z_shared=None):
    """q(z | x_S) for a batch; with private latents ``z_shared`` selects the private part."""
    feats = encoder.features(x, params)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, feats.present.shape)
    dist = encoder.distribution(feats, mask, params)
    if not encoder.spec.private:
        return dist
    if z_shared is None:
        raise ValueError("private-latent encoding needs a shared latent sample")
    return encoder.private(feats, mask, z_shared, dist, params)
