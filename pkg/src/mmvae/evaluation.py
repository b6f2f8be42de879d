"""Metrics: importance-sampled likelihoods, rate/distortion, MCC, latent accuracy, coherence."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .aggregation import MaskSubset
from .linalg import inverse_sqrt, jacobi_eigh, singular_values
from .model import GenerativeModel, decode_sample, prior_distribution, prior_log_prob
from .objectives import (
    TrainState,
    _batch_mask,
    _observed,
    conditional_bound,
    log_prob,
    marginal_bound,
    mixture_bound,
    optimizer_step,
    sample_from,
)

CCA_RIDGE = 1e-6
CCA_CONDITION = 1e-10


# ---------------------------------------------------------------------------
# importance sampling


@dataclass
class ISEstimate:
    """Per-point estimates of log p(x_S); ``log_weights`` has shape (K, B)."""

    estimate: np.ndarray
    standard_error: np.ndarray
    log_weights: np.ndarray


def _proposal_draws(x, subset, model, encoder, params, k, rng, observed):
    b, m = int(np.shape(x[0])[0]), model.num_modalities
    mask = _batch_mask(subset, b, m) & _observed(observed, b, m)
    q = encoder.distribution(encoder.features(x, params), mask, params)
    eps = rng.standard_normal((k, b, model.latent_dim))
    u = rng.random((k, b))
    z = sample_from(q, eps, u)
    recon, _ = model.reconstruction(x, z, mask, params)
    return mask, recon.value, log_prob(z, q).value, prior_log_prob(z, model.prior, params).value


def is_log_likelihood(x: Sequence, subset, model: GenerativeModel, encoder, params: Mapping, k: int,
                      rng: np.random.Generator, observed=None) -> ISEstimate:
    """log (1/K) sum_k p(x_S, z_k) / q(z_k | x_S) with z_k ~ q(. | x_S).

    The standard error is the delta-method value std(w) / (sqrt(K) mean(w))
    for the normalised weights ``w``; it is NaN for ``K = 1``.
    """
    if k < 1:
        raise ValueError("need at least one importance sample")
    mask, recon, log_q, log_p = _proposal_draws(x, subset, model, encoder, params, k, rng, observed)
    log_w = recon - (log_q - log_p)
    log_w = np.where(mask.any(axis=-1), log_w, 0.0)
    top = log_w.max(axis=0)
    w = np.exp(log_w - top)
    mean_w = w.mean(axis=0)
    est = top + np.log(mean_w)
    if k > 1:
        se = w.std(axis=0, ddof=1) / (np.sqrt(k) * mean_w)
    else:
        se = np.full(est.shape, np.nan)
    return ISEstimate(est, se, log_w)


def single_sample_elbo(x: Sequence, subset, model: GenerativeModel, encoder, params: Mapping,
                       rng: np.random.Generator, observed=None) -> np.ndarray:
    """log p(x_S | z) - (log q(z | x_S) - log p(z)) at one draw; consumes ``rng`` like K = 1 sampling."""
    mask, recon, log_q, log_p = _proposal_draws(x, subset, model, encoder, params, 1, rng, observed)
    return np.where(mask.any(axis=-1), recon - (log_q - log_p), 0.0)[0]


def conditional_is_log_likelihood(x, subset, model, encoder, params, k, rng, observed=None) -> np.ndarray:
    """log p(x_C | x_S) estimated as the difference of two importance-sampled marginals."""
    b, m = int(np.shape(x[0])[0]), model.num_modalities
    full = np.ones((b, m), dtype=bool)
    joint = is_log_likelihood(x, full, model, encoder, params, k, rng, observed).estimate
    part = is_log_likelihood(x, subset, model, encoder, params, k, rng, observed).estimate
    return joint - part


def relative_llh_gap(llh_reference: float, llh_model: float) -> float:
    return float((llh_reference - llh_model) / abs(llh_reference))


# ---------------------------------------------------------------------------
# rates and distortions


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")


@dataclass
class SubsetRates:
    subset: tuple
    distortion: float
    rate: float
    cross_distortion: float
    conditional_distortion: float
    cross_rate: float
    marginal_total: float
    conditional_total: float
    se_marginal_sum: float
    se_conditional_sum: float
    entropy: float | None = None
    conditional_entropy: float | None = None

    def marginal_sandwich(self) -> float | None:
        """R_S - (H_S - D_S), non-negative up to MC error."""
        return None if self.entropy is None else self.rate - (self.entropy - self.distortion)

    def conditional_sandwich(self) -> float | None:
        if self.conditional_entropy is None:
            return None
        return self.cross_rate - (self.conditional_entropy - self.conditional_distortion)


@dataclass
class RateDistortionReport:
    full_distortion: float
    full_rate: float
    subsets: list
    beta: float
    n_points: int
    mc_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self) -> list:
        return [asdict(r) for r in self.subsets]


def rate_distortion_report(x: Sequence, model: GenerativeModel, encoder, params: Mapping, subsets: Sequence,
                           beta: float, rng: np.random.Generator, n: int = 1, oracle=None) -> RateDistortionReport:
    """Dataset averages of D_S, R_S, D^c, D_C and R_C for each subset.

    Bounds are evaluated in the order full set, then per subset marginal,
    conditional and mixture, all from ``rng``. With a linear ``oracle`` the
    analytic entropies H_S and H(x_C | x_S) are attached for the sandwich
    checks.
    """
    from .linear_oracle import conditional_entropy, marginal_entropy

    m = model.num_modalities
    full = marginal_bound(x, np.ones(m, dtype=bool), model, encoder, params, beta, rng, n)
    rows = []
    for subset in subsets:
        mask = subset.as_array() if isinstance(subset, MaskSubset) else np.asarray(subset, dtype=bool)
        members = tuple(int(i) for i in np.flatnonzero(mask))
        marg = marginal_bound(x, mask, model, encoder, params, beta, rng, n)
        cond = conditional_bound(x, mask, model, encoder, params, beta, rng, n)
        mix = mixture_bound(x, mask, model, encoder, params, beta, rng, n)
        d_s = -sum(marg.reconstruction.values())
        r_s = sum(marg.rates.values())
        d_c = -sum(cond.reconstruction.values())
        r_c = sum(cond.rates.values())
        cross = -sum(v for s, v in mix.per_modality.items() if not mask[s]) if (~mask).any() else np.zeros_like(d_s)
        row = SubsetRates(
            members,
            _mean_se(d_s)[0], _mean_se(r_s)[0], _mean_se(cross)[0], _mean_se(d_c)[0], _mean_se(r_c)[0],
            _mean_se(marg.total)[0], _mean_se(cond.total)[0],
            _mean_se(d_s + r_s)[1], _mean_se(d_c + r_c)[1],
        )
        if oracle is not None:
            row.entropy = marginal_entropy(oracle, list(members))
            row.conditional_entropy = conditional_entropy(oracle, list(members))
        rows.append(row)
    return RateDistortionReport(
        float(-sum(full.reconstruction.values()).mean()), float(sum(full.rates.values()).mean()),
        rows, float(beta), int(np.shape(x[0])[0]), int(n),
    )


# ---------------------------------------------------------------------------
# mean canonical correlation


@dataclass
class MCCResult:
    value: float
    correlations: np.ndarray
    regularized: bool


def _standardize(a: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=0)
    sd = a.std(axis=0)
    return a / np.where(sd > 0, sd, 1.0)


def mcc(true_z, encoded_z) -> MCCResult:
    """Mean of the canonical correlations between two latent samples.

    Both blocks are standardised and whitened with Jacobi-based inverse
    square roots. A ridge of ``CCA_RIDGE`` is added to a block whose
    covariance is numerically singular, and ``regularized`` is set.
    """
    a = np.asarray(true_z, dtype=np.float64)
    b = np.asarray(encoded_z, dtype=np.float64)
    if a.ndim != 2 or b.shape != a.shape:
        raise ValueError("mcc expects two N x D arrays of the same shape")
    n, d = a.shape
    if n <= d:
        raise ValueError("mcc needs more samples than dimensions")
    a, b = _standardize(a), _standardize(b)
    caa, cbb, cab = a.T @ a / n, b.T @ b / n, a.T @ b / n
    flagged = False
    whiten = []
    for c in (caa, cbb):
        vals, _ = jacobi_eigh(c)
        ridge = 0.0
        if vals[-1] <= CCA_CONDITION * max(vals[0], 1e-300):
            ridge, flagged = CCA_RIDGE, True
        whiten.append(inverse_sqrt(c, ridge))
    corr = singular_values(whiten[0] @ cab @ whiten[1])
    corr = np.clip(corr, 0.0, 1.0)
    return MCCResult(float(corr.mean()), corr, flagged)


def encoded_latents(x: Sequence, model: GenerativeModel, encoder, params: Mapping, rng: np.random.Generator,
                    subset=None, observed=None, sample: bool = True) -> np.ndarray:
    """One draw (or the mean) of q(z | x_S) per point; ``subset`` defaults to every observed modality."""
    b, m = int(np.shape(x[0])[0]), model.num_modalities
    mask = _observed(observed, b, m)
    if subset is not None:
        mask = mask & _batch_mask(subset, b, m)
    q = encoder.distribution(encoder.features(x, params), mask, params)
    eps = rng.standard_normal((b, model.latent_dim))
    u = rng.random(b)
    if sample:
        return sample_from(q, eps, u).value
    if hasattr(q, "log_weights"):
        w = np.exp(q.log_weights.value)
        return np.einsum("bk,bkd->bd", w, q.components.mean.value)
    return np.asarray(q.mean.value)


# ---------------------------------------------------------------------------
# linear classifiers


@dataclass
class LinearClassifier:
    weights: np.ndarray
    bias: np.ndarray
    shift: np.ndarray
    scale: np.ndarray

    def logits(self, features) -> np.ndarray:
        f = (np.asarray(features, dtype=np.float64) - self.shift) / self.scale
        return f @ self.weights + self.bias

    def __call__(self, features) -> np.ndarray:
        return np.argmax(self.logits(features), axis=-1)


def fit_linear_classifier(features, labels, num_classes: int | None = None, steps: int = 500,
                          lr: float = 0.05, seed: int = 0, batch_size: int | None = None) -> LinearClassifier:
    """Multinomial logistic regression fitted with the package's autodiff and Adam."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.intp)
    if np.unique(y).size < 2:
        raise ValueError("classifier needs at least two classes in the training labels")
    k = int(y.max()) + 1 if num_classes is None else int(num_classes)
    shift = f.mean(axis=0)
    scale = np.where(f.std(axis=0) > 0, f.std(axis=0), 1.0)
    f = (f - shift) / scale
    rng = np.random.default_rng(seed)
    params = {"W": np.zeros((f.shape[1], k)), "b": np.zeros(k)}
    state = TrainState.create(params, lr, lr, steps)
    n = f.shape[0]
    for _ in range(steps):
        idx = np.arange(n) if batch_size is None or batch_size >= n else rng.choice(n, batch_size, replace=False)
        with ad.Tape() as tape:
            p = tape.watch_all(state.params)
            logits = ad.matmul(f[idx], p["W"]) + p["b"]
            picked = ad.take_along_axis(ad.log_softmax(logits, axis=-1), y[idx][:, None], axis=-1)
            loss = ad.neg(ad.mean(picked))
            grads = tape.gradient(loss, p)
        state = optimizer_step(state, grads)
    return LinearClassifier(state.params["W"], state.params["b"], shift, scale)


def latent_classification_accuracy(train_z, train_y, test_z, test_y, steps: int = 500, lr: float = 0.05,
                                   seed: int = 0) -> float:
    clf = fit_linear_classifier(train_z, train_y, steps=steps, lr=lr, seed=seed)
    return float(np.mean(clf(test_z) == np.asarray(test_y).astype(np.intp)))


# ---------------------------------------------------------------------------
# coherence


def label_classifier(x_hat: np.ndarray) -> np.ndarray:
    """Classifier for a decoded label modality: the decoded class index itself."""
    return np.rint(np.asarray(x_hat)[..., 0]).astype(np.intp)


def coherence(x: Sequence, labels, subset, target: int, model: GenerativeModel, encoder, params: Mapping,
              classifiers: Mapping[int, Callable], rng: np.random.Generator, deterministic: bool = True,
              encoder_is_prior: bool = False) -> float:
    """Fraction of points whose modality ``target``, generated from z ~ q(z | x_S), is classified as the label.

    With ``encoder_is_prior`` the latent is drawn from the prior instead,
    which gives the chance-level reference.
    """
    if target not in classifiers:
        raise KeyError(f"no classifier for modality {target}")
    labels = np.asarray(labels).astype(np.intp)
    dec = model.decoders[target]
    if dec.kind == "categorical" and dec.out_dim == 1:
        return 1.0
    b = labels.shape[0]
    if encoder_is_prior:
        prior = prior_distribution(model.prior, params)
        eps = rng.standard_normal((b, model.latent_dim))
        u = rng.random(b)
        z = sample_from(prior, eps, u).value
    else:
        z = encoded_latents(x, model, encoder, params, rng, subset=subset, sample=True)
    x_hat = decode_sample(model.decoder_input(z, target), dec, params, rng, deterministic=deterministic)
    return float(np.mean(classifiers[target](x_hat) == labels))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)

    def add(self, name: str, value) -> None:
        self.values[name] = value

    def skip(self, name: str, reason: str) -> None:
        self.skipped[name] = reason

    def to_dict(self) -> dict:
        return {"metrics": self.values, "skipped": self.skipped}
