import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmvae.aggregation import EncoderSpec, LearnedEncoder
from mmvae.evaluation import (
    MetricsReport,
    coherence,
    conditional_is_log_likelihood,
    encoded_latents,
    fit_linear_classifier,
    is_log_likelihood,
    label_classifier,
    latent_classification_accuracy,
    mcc,
    rate_distortion_report,
    relative_llh_gap,
    single_sample_elbo,
)
from mmvae.linear_oracle import AnalyticEncoder, exact_conditional_llh, exact_marginal_llh, exact_posterior
from mmvae.model import DecoderSpec, GenerativeModel, ModalitySpec, PriorSpec
from oracles import linear_setup, mask


class TestImportanceSampling:
    @pytest.mark.parametrize("k", (1, 10))
    def test_exact_proposal_gives_exact_likelihood(self, k):
        s = linear_setup()
        for subset in (mask(3, [0]), mask(3, [1, 2]), mask(3, [0, 1, 2])):
            est = is_log_likelihood(s.data.values, subset, s.model, s.encoder, s.params, k,
                                    np.random.default_rng(42))
            np.testing.assert_allclose(est.estimate, exact_marginal_llh(s.oracle, s.data.values, subset),
                                       atol=1e-10)

    def test_single_sample_equals_elbo(self):
        s = linear_setup(beta=1.5)
        subset = mask(3, [0, 2])
        est = is_log_likelihood(s.data.values, subset, s.model, s.encoder, s.params, 1, np.random.default_rng(9))
        elbo = single_sample_elbo(s.data.values, subset, s.model, s.encoder, s.params, np.random.default_rng(9))
        np.testing.assert_array_equal(est.estimate, elbo)
        assert np.all(np.isnan(est.standard_error))

    def test_overdispersed_proposal_converges(self):
        s = linear_setup(n=5)
        enc = AnalyticEncoder(s.oracle, beta=1.5)
        est = is_log_likelihood(s.data.values, mask(3, [0, 1]), s.model, enc, s.params, 20_000,
                                np.random.default_rng(42))
        exact = exact_marginal_llh(s.oracle, s.data.values, mask(3, [0, 1]))
        assert np.all(np.abs(est.estimate - exact) < 4 * est.standard_error)

    def test_single_sample_is_lower_on_average(self):
        s = linear_setup(n=5)
        enc = AnalyticEncoder(s.oracle, beta=2.0)
        rng = np.random.default_rng(42)
        draws = np.array([single_sample_elbo(s.data.values, mask(3, [2]), s.model, enc, s.params, rng)
                          for _ in range(2000)])
        assert np.all(draws.mean(axis=0) < exact_marginal_llh(s.oracle, s.data.values, mask(3, [2])))

    def test_exact_conditional(self):
        s = linear_setup()
        est = conditional_is_log_likelihood(s.data.values, mask(3, [1]), s.model, s.encoder, s.params, 3,
                                            np.random.default_rng(42))
        np.testing.assert_allclose(est, exact_conditional_llh(s.oracle, s.data.values, mask(3, [1])), atol=1e-10)

    def test_needs_a_sample(self):
        s = linear_setup()
        with pytest.raises(ValueError):
            is_log_likelihood(s.data.values, mask(3, [0]), s.model, s.encoder, s.params, 0, np.random.default_rng(42))

    def test_relative_gap(self):
        assert relative_llh_gap(-100.0, -101.0) == pytest.approx(0.01, abs=1e-15)
        assert relative_llh_gap(-50.0, -50.0) == 0.0


class TestRateDistortion:
    def test_exact_posterior_closes_marginal_sandwich(self):
        s = linear_setup(n=2000)
        subsets = [mask(3, [0]), mask(3, [0, 2])]
        report = rate_distortion_report(s.data.values, s.model, s.encoder, s.params, subsets, 1.0,
                                        np.random.default_rng(42), n=1, oracle=s.oracle)
        for row in report.subsets:
            assert abs(row.marginal_sandwich()) < 4 * row.se_marginal_sum

    def test_empty_and_full_rows(self):
        s = linear_setup(n=50)
        report = rate_distortion_report(s.data.values, s.model, s.encoder, s.params,
                                        [mask(3, []), mask(3, [0, 1, 2])], 1.0, np.random.default_rng(42))
        empty, full = report.subsets
        assert empty.subset == () and empty.distortion == 0.0 and empty.rate == 0.0
        assert full.conditional_distortion == 0.0 and full.cross_rate == 0.0 and full.cross_distortion == 0.0
        assert full.distortion == pytest.approx(report.full_distortion, rel=0.05)

    def test_without_oracle_no_sandwich(self):
        s = linear_setup(n=10)
        report = rate_distortion_report(s.data.values, s.model, s.encoder, s.params, [mask(3, [1])], 1.0,
                                        np.random.default_rng(42))
        assert report.subsets[0].marginal_sandwich() is None
        assert report.rows()[0]["subset"] == (1,)
        assert report.to_dict()["n_points"] == 10


class TestMCC:
    def test_identity_is_one(self):
        z = np.random.default_rng(42).standard_normal((1000, 3))
        result = mcc(z, z)
        assert result.value == pytest.approx(1.0, abs=1e-12)
        assert not result.regularized

    def test_affine_map(self):
        rng = np.random.default_rng(42)
        z = rng.standard_normal((1000, 4))
        a = rng.standard_normal((4, 4))
        assert 1.0 - mcc(z, z @ a + rng.standard_normal(4)).value < 1e-6

    def test_independent_noise(self):
        rng = np.random.default_rng(42)
        assert mcc(rng.standard_normal((5000, 3)), rng.standard_normal((5000, 3))).value < 0.1

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_invariant_to_column_permutation_and_scale(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((300, 3))
        e = z + 0.5 * rng.standard_normal((300, 3))
        base = mcc(z, e).value
        changed = mcc(z, e[:, rng.permutation(3)] * rng.uniform(0.1, 10.0, 3)).value
        assert changed == pytest.approx(base, abs=1e-10)
        assert 0.0 <= base <= 1.0

    def test_singular_block_is_regularized(self):
        rng = np.random.default_rng(42)
        z = rng.standard_normal((500, 2))
        result = mcc(z, np.column_stack([z[:, 0], z[:, 0]]))
        assert result.regularized
        assert np.isfinite(result.value)

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            mcc(np.zeros((10, 2)), np.zeros((10, 3)))
        with pytest.raises(ValueError):
            mcc(np.zeros((2, 2)), np.zeros((2, 2)))

    def test_encoded_means_are_posterior_means(self):
        s = linear_setup()
        means = encoded_latents(s.data.values, s.model, s.encoder, s.params, np.random.default_rng(42),
                                subset=mask(3, [1]), sample=False)
        exact = exact_posterior(s.oracle, [x[4] for x in s.data.values], [1])
        np.testing.assert_allclose(means[4], exact.mean, atol=1e-12)


class TestClassifiers:
    def test_separable_clusters(self):
        rng = np.random.default_rng(42)
        centres = np.array([[5.0, 0.0], [-5.0, 0.0], [0.0, 5.0]])
        y = rng.integers(0, 3, 600)
        z = centres[y] + 0.3 * rng.standard_normal((600, 2))
        assert latent_classification_accuracy(z[:400], y[:400], z[400:], y[400:]) == 1.0

    def test_uninformative_features_near_chance(self):
        rng = np.random.default_rng(42)
        z, y = rng.standard_normal((4000, 2)), rng.integers(0, 4, 4000)
        acc = latent_classification_accuracy(z[:2000], y[:2000], z[2000:], y[2000:])
        assert abs(acc - 0.25) < 4 * np.sqrt(0.25 * 0.75 / 2000)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            fit_linear_classifier(np.zeros((5, 2)), np.zeros(5))

    def test_label_classifier_reads_index(self):
        np.testing.assert_array_equal(label_classifier(np.array([[2.0], [0.0], [4.0]])), [2, 0, 4])


def label_model(k=4, strength=20.0):
    """Latent 2-D; modality 0 is a label whose encoder and decoder are hand-set to agree."""
    centres = 2.0 * np.stack([np.cos(2 * np.pi * np.arange(k) / k), np.sin(2 * np.pi * np.arange(k) / k)], 1)
    decs = [DecoderSpec(0, "categorical", k, hidden=()), DecoderSpec(1, "mlp-gaussian", 3, hidden=(4,))]
    model = GenerativeModel(PriorSpec("standard-gaussian", 2), decs,
                            [ModalitySpec("categorical", k), ModalitySpec("continuous", 3)])
    enc = LearnedEncoder(EncoderSpec("poe", 2, hidden=()), model)
    rng = np.random.default_rng(42)
    params = {**model.init(rng), **enc.init(rng)}
    params["enc0.0.W"] = np.column_stack([centres, np.full((k, 2), -3.0)])
    params["enc0.0.b"] = np.zeros(4)
    params["dec0.layer.0.W"] = strength * centres.T
    params["dec0.layer.0.b"] = -0.5 * strength * (centres**2).sum(1)
    return model, enc, params


class TestCoherence:
    def test_matched_encoder_decoder_is_coherent(self):
        model, enc, params = label_model()
        rng = np.random.default_rng(42)
        y = rng.integers(0, 4, 500)
        x = [y[:, None].astype(float), rng.standard_normal((500, 3))]
        value = coherence(x, y, mask(2, [0]), 0, model, enc, params, {0: label_classifier}, rng)
        assert value > 0.95

    def test_prior_draws_are_at_chance(self):
        model, enc, params = label_model(strength=0.0)
        params["dec0.layer.0.W"] = np.random.default_rng(3).standard_normal((2, 4))
        rng = np.random.default_rng(42)
        n = 20_000
        y = rng.integers(0, 4, n)
        x = [y[:, None].astype(float), np.zeros((n, 3))]
        value = coherence(x, y, mask(2, [0]), 0, model, enc, params, {0: label_classifier}, rng,
                          deterministic=False, encoder_is_prior=True)
        assert abs(value - 0.25) < 4 * np.sqrt(0.25 * 0.75 / n)

    def test_single_class_target_is_trivially_coherent(self):
        decs = [DecoderSpec(0, "categorical", 1, hidden=()), DecoderSpec(1, "mlp-gaussian", 3, hidden=(4,))]
        model = GenerativeModel(PriorSpec("standard-gaussian", 2), decs,
                                [ModalitySpec("categorical", 1), ModalitySpec("continuous", 3)])
        y = np.zeros(10)
        value = coherence([y[:, None], np.zeros((10, 3))], y, mask(2, [1]), 0, model, None, {},
                          {0: label_classifier}, np.random.default_rng(42))
        assert value == 1.0

    def test_missing_classifier(self):
        model, enc, params = label_model()
        with pytest.raises(KeyError):
            coherence([np.zeros((2, 1)), np.zeros((2, 3))], np.zeros(2), mask(2, [0]), 1, model, enc, params,
                      {0: label_classifier}, np.random.default_rng(42))


class TestMetricsReport:
    def test_values_and_skips(self):
        report = MetricsReport()
        report.add("mcc", 0.9)
        report.skip("rates", "posterior not diagonal")
        assert report.to_dict() == {"metrics": {"mcc": 0.9}, "skipped": {"rates": "posterior not diagonal"}}
