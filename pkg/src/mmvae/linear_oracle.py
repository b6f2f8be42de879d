"""Multi-modal linear-Gaussian model with closed-form inference.

``z ~ N(0, I)`` and ``x_s | z ~ N(W_s z + b_s, sigma^2 I)``. Every marginal,
conditional and posterior is Gaussian, so this model serves as the exact
reference for the bounds, estimators and training runs elsewhere in the
package. A tempering factor ``beta`` rescales the observation variance to
``beta * sigma^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .aggregation import FeatureSet, MaskSubset
from .autodiff import Tensor
from .distributions import DiagGaussianParams, FullGaussian, full_gaussian_log_prob
from .linalg import jacobi_eigh
from .model import DecoderSpec, GenerativeModel, LatentLayout, ModalitySpec, PriorSpec


@dataclass(frozen=True)
class LinearModelConfig:
    num_modalities: int = 3
    latent_dim: int = 5
    dim_low: int = 8
    dim_high: int = 8
    sigma: float = 1.0
    shared_dim: int | None = None
    private_dim: int = 0


@dataclass
class LinearGaussianModel:
    loadings: list
    biases: list
    sigma: float
    layout: LatentLayout | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        self.loadings = [np.asarray(w, dtype=np.float64) for w in self.loadings]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        d = self.loadings[0].shape[1]
        for w, b in zip(self.loadings, self.biases):
            if w.shape[1] != d or w.shape[0] != b.shape[0]:
                raise ValueError("inconsistent loading/bias shapes")

    @property
    def num_modalities(self) -> int:
        return len(self.loadings)

    @property
    def latent_dim(self) -> int:
        return self.loadings[0].shape[1]

    @property
    def dims(self) -> list:
        return [w.shape[0] for w in self.loadings]

    def stacked(self, subset) -> tuple[np.ndarray, np.ndarray]:
        idx = _members(subset, self.num_modalities)
        if not idx:
            return np.zeros((0, self.latent_dim)), np.zeros(0)
        return np.vstack([self.loadings[s] for s in idx]), np.concatenate([self.biases[s] for s in idx])

    def covariance(self, subset, beta: float = 1.0) -> np.ndarray:
        w, _ = self.stacked(subset)
        return w @ w.T + beta * self.sigma**2 * np.eye(w.shape[0])

    def to_dict(self) -> dict:
        out = {
            "loadings": [w.tolist() for w in self.loadings],
            "biases": [b.tolist() for b in self.biases],
            "sigma": self.sigma,
        }
        if self.layout is not None:
            out["layout"] = {"shared_dim": self.layout.shared_dim, "private_dim": self.layout.private_dim}
        return out

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LinearGaussianModel":
        layout = None
        if "layout" in doc:
            layout = LatentLayout(doc["layout"]["shared_dim"], doc["layout"]["private_dim"], len(doc["loadings"]))
        return cls([np.array(w) for w in doc["loadings"]], [np.array(b) for b in doc["biases"]],
                   float(doc["sigma"]), layout)


def _members(subset, m: int) -> list:
    if isinstance(subset, MaskSubset):
        return list(subset.members)
    arr = np.asarray(subset)
    if arr.dtype == bool:
        return [i for i in range(m) if arr[i]]
    return sorted(int(i) for i in arr)


def _orthonormal(rng, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.uniform(-1.0, 1.0, size=(rows, cols)))
    return q * np.sign(np.diag(r))


def generate_model(rng: np.random.Generator, config: LinearModelConfig) -> LinearGaussianModel:
    """Random orthonormal-column loadings (QR of uniform entries) and N(0, 1) biases.

    With ``private_dim > 0`` each modality loads on the shared block and on its
    own private block only; the two blocks are orthonormal jointly.
    """
    m = config.num_modalities
    dims = rng.integers(config.dim_low, config.dim_high + 1, size=m)
    if config.private_dim > 0:
        shared = config.latent_dim if config.shared_dim is None else config.shared_dim
        layout = LatentLayout(shared, config.private_dim, m)
        loadings = []
        for s in range(m):
            if shared + config.private_dim > dims[s]:
                raise ValueError("latent dimension exceeds modality dimension")
            q = _orthonormal(rng, dims[s], shared + config.private_dim)
            w = np.zeros((dims[s], layout.total_dim))
            w[:, :shared] = q[:, :shared]
            lo, hi = layout.private_slice(s)
            w[:, lo:hi] = q[:, shared:]
            loadings.append(w)
    else:
        layout = None
        if np.any(dims < config.latent_dim):
            raise ValueError("latent dimension exceeds modality dimension")
        loadings = [_orthonormal(rng, int(d), config.latent_dim) for d in dims]
    biases = [rng.standard_normal(int(d)) for d in dims]
    return LinearGaussianModel(loadings, biases, float(config.sigma), layout)


@dataclass
class Dataset:
    """Per-modality value arrays ``(N, width)`` with MCAR observation flags.

    Unobserved entries hold zeros.
    """

    values: list
    modalities: list
    observed: np.ndarray
    latents: np.ndarray | None = None
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.values[0].shape[0])

    @property
    def num_modalities(self) -> int:
        return len(self.values)

    def take(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            [v[index] for v in self.values],
            list(self.modalities),
            self.observed[index],
            None if self.latents is None else self.latents[index],
            None if self.labels is None else self.labels[index],
            dict(self.meta),
        )

    def stacked(self) -> np.ndarray:
        return np.hstack(self.values)


def mcar_mask(rng: np.random.Generator, n: int, m: int, eta: float) -> np.ndarray:
    if not 0.0 <= eta < 1.0:
        raise ValueError("missing rate must lie in [0, 1)")
    return rng.random((n, m)) >= eta


def sample_dataset(model: LinearGaussianModel, n: int, rng: np.random.Generator, eta: float = 0.0) -> Dataset:
    if n < 1:
        raise ValueError("need at least one sample")
    z = rng.standard_normal((n, model.latent_dim))
    values = [z @ w.T + b + model.sigma * rng.standard_normal((n, w.shape[0]))
              for w, b in zip(model.loadings, model.biases)]
    observed = mcar_mask(rng, n, model.num_modalities, eta)
    values = [np.where(observed[:, s : s + 1], v, 0.0) for s, v in enumerate(values)]
    mods = [ModalitySpec("continuous", d) for d in model.dims]
    return Dataset(values, mods, observed, z)


def _gather(x: Sequence, idx: list) -> np.ndarray:
    parts = [np.asarray(x[s], dtype=np.float64) for s in idx]
    return np.concatenate(parts, axis=-1)


def exact_posterior(model: LinearGaussianModel, x: Sequence, subset, beta: float = 1.0) -> FullGaussian:
    """Tempered posterior of z given the modalities in ``subset`` of a single point."""
    idx = _members(subset, model.num_modalities)
    d = model.latent_dim
    if not idx:
        return FullGaussian(np.zeros(d), np.eye(d))
    w, b = model.stacked(idx)
    var = beta * model.sigma**2
    k = w.T @ w + var * np.eye(d)
    mean = np.linalg.solve(k, w.T @ (_gather(x, idx) - b))
    cov = var * np.linalg.inv(k)
    return FullGaussian(mean, 0.5 * (cov + cov.T))


def exact_marginal_llh(model: LinearGaussianModel, x: Sequence, subset, beta: float = 1.0):
    """log N(x_S | b_S, W_S W_S^T + beta sigma^2 I); zero for the empty subset. Batched."""
    idx = _members(subset, model.num_modalities)
    if not idx:
        return np.zeros(np.shape(x[0])[:-1]) if np.ndim(x[0]) > 1 else 0.0
    _, b = model.stacked(idx)
    return full_gaussian_log_prob(_gather(x, idx), FullGaussian(b, model.covariance(idx, beta)))


def exact_conditional_llh(model: LinearGaussianModel, x: Sequence, subset, beta: float = 1.0):
    """log p(x_C | x_S) = log p(x) - log p(x_S); zero when S is everything."""
    idx = _members(subset, model.num_modalities)
    every = list(range(model.num_modalities))
    if idx == every:
        return np.zeros(np.shape(x[0])[:-1]) if np.ndim(x[0]) > 1 else 0.0
    return exact_marginal_llh(model, x, every, beta) - exact_marginal_llh(model, x, idx, beta)


def marginal_entropy(model: LinearGaussianModel, subset, beta: float = 1.0) -> float:
    idx = _members(subset, model.num_modalities)
    if not idx:
        return 0.0
    cov = model.covariance(idx, beta)
    return 0.5 * float(np.linalg.slogdet(2.0 * np.pi * np.e * cov)[1])


def conditional_entropy(model: LinearGaussianModel, subset, beta: float = 1.0) -> float:
    """Differential entropy H(x_C | x_S) of the Gaussian model."""
    m = model.num_modalities
    idx = _members(subset, m)
    every = list(range(m))
    return marginal_entropy(model, every, beta) - marginal_entropy(model, idx, beta)


# ---------------------------------------------------------------------------
# maximum likelihood


@dataclass
class MLEResult:
    loadings: np.ndarray
    bias: np.ndarray
    sigma2: float
    llh: float
    eigenvalues: np.ndarray

    def split(self, dims: Sequence[int]) -> LinearGaussianModel:
        cuts = np.cumsum([0, *dims])
        w = [self.loadings[cuts[i] : cuts[i + 1]] for i in range(len(dims))]
        b = [self.bias[cuts[i] : cuts[i + 1]] for i in range(len(dims))]
        return LinearGaussianModel(w, b, float(np.sqrt(self.sigma2)))


def gaussian_mean_llh(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    return float(np.mean(full_gaussian_log_prob(x, FullGaussian(mean, 0.5 * (cov + cov.T)))))


def mle_fit(data, latent_dim: int, denominator: str = "dimensions") -> MLEResult:
    """Closed-form probabilistic-PCA fit on the stacked modalities.

    ``denominator`` selects how the discarded eigenvalues are averaged into
    the noise variance: over the ``D_x - D`` discarded directions
    (``"dimensions"``) or over ``N - D`` (``"samples"``).
    """
    x = data.stacked() if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    n, dx = x.shape
    if latent_dim >= dx:
        raise ValueError("latent dimension must be below the data dimension")
    bias = x.mean(axis=0)
    centred = x - bias
    cov = centred.T @ centred / n
    vals, vecs = jacobi_eigh(cov)
    if denominator == "dimensions":
        sigma2 = float(vals[latent_dim:].sum() / (dx - latent_dim))
    elif denominator == "samples":
        sigma2 = float(vals[latent_dim:].sum() / (n - latent_dim))
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    top = np.clip(vals[:latent_dim] - sigma2, 0.0, None)
    w = vecs[:, :latent_dim] * np.sqrt(top)
    llh = gaussian_mean_llh(x, bias, w @ w.T + sigma2 * np.eye(dx))
    return MLEResult(w, bias, sigma2, llh, vals)


def model_mean_llh(model: LinearGaussianModel, data) -> float:
    """Average exact log-likelihood of fully observed rows."""
    x = data.stacked() if isinstance(data, Dataset) else np.asarray(data)
    w, b = model.stacked(range(model.num_modalities))
    return gaussian_mean_llh(x, b, w @ w.T + model.sigma**2 * np.eye(w.shape[0]))


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles (radians) between the column spaces of ``a`` and ``b``."""
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    cos = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(cos, -1.0, 1.0))


# ---------------------------------------------------------------------------
# bridges to the variational machinery


def as_generative_model(model: LinearGaussianModel, scale_mode: str = "fixed") -> tuple[GenerativeModel, dict]:
    """The same model expressed with linear-gaussian decoders, plus its parameter dict."""
    decoders = [
        DecoderSpec(s, "linear-gaussian", d, log_scale=float(np.log(model.sigma)), scale_mode=scale_mode)
        for s, d in enumerate(model.dims)
    ]
    mods = [ModalitySpec("continuous", d) for d in model.dims]
    gen = GenerativeModel(PriorSpec("standard-gaussian", model.latent_dim), decoders, mods, model.layout)
    params = {}
    for s, (w, b) in enumerate(zip(model.loadings, model.biases)):
        params[f"dec{s}.W"] = w.copy()
        params[f"dec{s}.b"] = b.copy()
        if scale_mode == "learned":
            params[f"dec{s}.log_scale"] = np.array(np.log(model.sigma))
    return gen, params


def linear_model_from_params(gen: GenerativeModel, params: Mapping) -> LinearGaussianModel:
    """Read a trained linear-decoder model back into oracle form."""
    scales = []
    for dec in gen.decoders:
        if dec.kind != "linear-gaussian":
            raise ValueError("all decoders must be linear-gaussian")
        key = f"{dec.prefix}.log_scale"
        scales.append(float(params[key]) if dec.scale_mode == "learned" else dec.log_scale)
    if max(scales) - min(scales) > 1e-12:
        raise ValueError("oracle form needs a common observation scale")
    w = [np.asarray(params[f"dec{s}.W"]) for s in range(gen.num_modalities)]
    b = [np.asarray(params[f"dec{s}.b"]) for s in range(gen.num_modalities)]
    return LinearGaussianModel(w, b, float(np.exp(scales[0])), gen.layout)


class AnalyticEncoder:
    """Encoder whose output is the exact tempered posterior of a linear model.

    Its variational parameters (``post.W{s}``, ``post.b{s}``,
    ``post.log_sigma``) start as copies of the generative ones. The posterior
    is computed through the autodiff engine, so gradients with respect to those
    copies are available. The posterior covariance is diagonal, and the
    result exact, whenever ``sum_{s in S} W_s^T W_s`` is diagonal. That holds
    for every subset with orthonormal-column loadings, and for the full set
    with maximum-likelihood loadings. Requested subsets are checked.
    """

    layout = None
    tolerance = 1e-10

    def __init__(self, model: LinearGaussianModel, beta: float = 1.0):
        self.model = model
        self.beta = float(beta)
        self._grams = [w.T @ w for w in model.loadings]

    def check(self, mask: np.ndarray) -> None:
        for row in np.unique(np.asarray(mask, dtype=bool).reshape(-1, self.model.num_modalities), axis=0):
            if not row.any():
                continue
            gram = sum(g for g, keep in zip(self._grams, row) if keep)
            off = np.abs(gram - np.diag(np.diag(gram))).max()
            if off > self.tolerance * max(1.0, np.abs(np.diag(gram)).max()):
                members = [int(i) for i in np.flatnonzero(row)]
                raise ValueError(f"posterior for modalities {members} is not diagonal; analytic encoder is inexact")

    def init(self, rng=None) -> dict:
        p = {"post.log_sigma": np.array(np.log(self.model.sigma))}
        for s, (w, b) in enumerate(zip(self.model.loadings, self.model.biases)):
            p[f"post.W{s}"] = w.copy()
            p[f"post.b{s}"] = b.copy()
        return p

    def features(self, x: Sequence, params: Mapping) -> FeatureSet:
        return _RawFeatures(list(x), np.ones((np.shape(x[0])[0], self.model.num_modalities), dtype=bool))

    def distribution(self, feats, mask, params: Mapping) -> DiagGaussianParams:
        mask = np.asarray(mask, dtype=bool)
        self.check(mask)
        x = feats.values
        inv_var = ad.exp(-2.0 * ad.as_tensor(params["post.log_sigma"])) * (1.0 / self.beta)
        prec = None
        proj = None
        for s in range(self.model.num_modalities):
            w = ad.as_tensor(params[f"post.W{s}"])
            present = mask[:, s : s + 1]
            col_norm = ad.sum_(ad.square(w), axis=0)
            p_s = ad.where(present, ad.broadcast_to(col_norm, (mask.shape[0], w.shape[1])), 0.0)
            r_s = ad.where(present, ad.matmul(ad.as_tensor(x[s]) - params[f"post.b{s}"], w), 0.0)
            prec = p_s if prec is None else prec + p_s
            proj = r_s if proj is None else proj + r_s
        prec = 1.0 + prec * inv_var
        mean = proj * inv_var / prec
        return DiagGaussianParams(mean, -0.5 * ad.log(prec))

    def exact(self, x: Sequence, subset) -> FullGaussian:
        return exact_posterior(self.model, x, subset, self.beta)


@dataclass(frozen=True)
class _RawFeatures:
    values: list
    present: np.ndarray
