import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmvae import nn
from mmvae.model import (
    DecoderSpec,
    GenerativeModel,
    LatentLayout,
    ModalitySpec,
    PriorSpec,
    cluster_objective,
    decode_log_prob,
    decode_sample,
    decoder_output,
    optimal_cluster_posterior,
    prior_log_prob,
)
from oracles import WIDE_GRID, numpy_mlp, trapezoid


def mixture_prior_params(means, log_stds, logits):
    return {"prior.means": np.asarray(means, float), "prior.log_stds": np.asarray(log_stds, float),
            "prior.logits": np.asarray(logits, float)}


class TestPrior:
    def test_standard_at_origin(self):
        assert prior_log_prob(np.zeros(2), PriorSpec("standard-gaussian", 2)).value == pytest.approx(
            -np.log(2 * np.pi), abs=1e-15)

    def test_single_component_mixture_equals_standard(self):
        rng = np.random.default_rng(42)
        z = rng.standard_normal((5, 3))
        p = mixture_prior_params(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros(1))
        np.testing.assert_allclose(prior_log_prob(z, PriorSpec("gaussian-mixture", 3, 1), p).value,
                                   prior_log_prob(z, PriorSpec("standard-gaussian", 3)).value, atol=1e-14)

    def test_two_component_1d_matches_quadrature(self):
        p = mixture_prior_params([[-1.5], [2.0]], [[np.log(0.6)], [np.log(1.3)]], [0.4, -0.2])
        w = np.exp(p["prior.logits"]) / np.exp(p["prior.logits"]).sum()

        def dens(z):
            return sum(wk * np.exp(-0.5 * ((z - m) / s) ** 2) / (s * np.sqrt(2 * np.pi))
                       for wk, m, s in zip(w, (-1.5, 2.0), (0.6, 1.3)))

        norm = trapezoid(dens(WIDE_GRID), WIDE_GRID)
        spec = PriorSpec("gaussian-mixture", 1, 2)
        for z in (-3.0, -1.5, 0.0, 1.0, 3.5):
            assert prior_log_prob(np.array([z]), spec, p).value == pytest.approx(np.log(dens(z) / norm), abs=1e-10)

    def test_mixture_init_ranges(self):
        p = PriorSpec("gaussian-mixture", 3, 4).init(np.random.default_rng(42))
        assert np.all(np.abs(p["prior.means"]) <= 2.0)
        np.testing.assert_array_equal(p["prior.log_stds"], np.zeros((4, 3)))
        np.testing.assert_array_equal(p["prior.logits"], np.zeros(4))

    def test_standard_prior_has_no_state(self):
        assert PriorSpec("standard-gaussian", 3).init(np.random.default_rng(42)) == {}


class TestDecoders:
    def test_identity_linear_decoder_zero_residual(self):
        d = 4
        dec = DecoderSpec(0, "linear-gaussian", d)
        z = np.random.default_rng(42).standard_normal(d)
        value = decode_log_prob(z, z, dec, {"dec0.W": np.eye(d), "dec0.b": np.zeros(d)}).value
        assert value == pytest.approx(d * -0.5 * np.log(2 * np.pi), abs=1e-14)

    def test_equal_logits_give_log_k(self):
        k = 5
        dec = DecoderSpec(0, "categorical", k, hidden=(3,))
        params = nn.init_mlp(np.random.default_rng(42), "dec0.layer", [2, 3, k])
        params["dec0.layer.1.W"] = np.zeros((3, k))
        params["dec0.layer.1.b"] = np.zeros(k)
        value = decode_log_prob(np.array([[2.0]]), np.ones((1, 2)), dec, params).value
        assert value == pytest.approx([-np.log(k)], abs=1e-15)

    def test_mlp_gaussian_matches_density_formula(self):
        rng = np.random.default_rng(42)
        dec = DecoderSpec(0, "mlp-gaussian", 3, hidden=(6, 5), log_scale=np.log(0.7))
        params = dec.init(rng, 2)
        z, x = rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
        mean = numpy_mlp(params, "dec0.layer", z, 3)
        oracle = (-0.5 * ((x - mean) / 0.7) ** 2 - np.log(0.7) - 0.5 * np.log(2 * np.pi)).sum(-1)
        np.testing.assert_allclose(decode_log_prob(x, z, dec, params).value, oracle, atol=1e-10)

    def test_learned_scale_is_a_parameter(self):
        dec = DecoderSpec(0, "linear-gaussian", 2, log_scale=0.3, scale_mode="learned")
        params = dec.init(np.random.default_rng(42), 2)
        assert params["dec0.log_scale"] == pytest.approx(0.3)

    def test_class_index_out_of_range(self):
        dec = DecoderSpec(0, "categorical", 3, hidden=(4,))
        params = dec.init(np.random.default_rng(42), 2)
        with pytest.raises(ValueError):
            decode_log_prob(np.array([[3.0]]), np.zeros((1, 2)), dec, params)

    def test_non_finite_log_scale_rejected(self):
        with pytest.raises(ValueError):
            DecoderSpec(0, "mlp-gaussian", 2, log_scale=float("inf"))


class TestDecodeSample:
    def test_deterministic_gaussian_returns_mean(self):
        rng = np.random.default_rng(42)
        dec = DecoderSpec(0, "mlp-gaussian", 3, hidden=(5,))
        params = dec.init(rng, 2)
        z = rng.standard_normal((4, 2))
        np.testing.assert_array_equal(decode_sample(z, dec, params, deterministic=True),
                                      decoder_output(z, dec, params).value)

    def test_one_hot_logits_always_that_class(self):
        dec = DecoderSpec(0, "categorical", 4, hidden=(3,))
        params = dec.init(np.random.default_rng(42), 2)
        params["dec0.layer.1.W"] = np.zeros((3, 4))
        params["dec0.layer.1.b"] = np.array([0.0, 0.0, 50.0, 0.0])
        draws = decode_sample(np.zeros((1000, 2)), dec, params, np.random.default_rng(42))
        np.testing.assert_array_equal(draws, np.full((1000, 1), 2.0))

    def test_gaussian_sample_mean(self):
        rng = np.random.default_rng(42)
        dec = DecoderSpec(0, "mlp-gaussian", 2, hidden=(4,), log_scale=np.log(0.5))
        params = dec.init(rng, 2)
        z = np.broadcast_to(rng.standard_normal(2), (100_000, 2))
        x = decode_sample(z, dec, params, rng)
        mean = decoder_output(z[:1], dec, params).value[0]
        se = x.std(axis=0, ddof=1) / np.sqrt(len(x))
        assert np.all(np.abs(x.mean(axis=0) - mean) < 4 * se)


class TestClusterPosterior:
    def test_identical_components_uniform(self):
        p = mixture_prior_params(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros(4))
        q = optimal_cluster_posterior(np.array([0.3, -0.2]), PriorSpec("gaussian-mixture", 2, 4), p).value
        np.testing.assert_allclose(q, np.full(4, 0.25), atol=1e-15)

    def test_far_separated_components(self):
        p = mixture_prior_params([[0.0, 0.0], [20.0, 20.0], [-20.0, 20.0]], np.zeros((3, 2)), np.zeros(3))
        q = optimal_cluster_posterior(np.array([20.0, 20.0]), PriorSpec("gaussian-mixture", 2, 3), p).value
        assert q[1] > 0.999

    def test_optimal_factor_recovers_prior_log_prob(self):
        rng = np.random.default_rng(42)
        spec = PriorSpec("gaussian-mixture", 2, 5)
        p = spec.init(rng)
        p["prior.log_stds"] = 0.3 * rng.standard_normal((5, 2))
        p["prior.logits"] = rng.standard_normal(5)
        z = 2.0 * rng.standard_normal((50, 2))
        q = optimal_cluster_posterior(z, spec, p)
        for beta in (1.0, 0.5, 3.0):
            np.testing.assert_allclose(cluster_objective(q, z, spec, p, beta).value,
                                       beta * prior_log_prob(z, spec, p).value, atol=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_perturbed_factor_scores_no_higher(self, seed):
        rng = np.random.default_rng(seed)
        spec = PriorSpec("gaussian-mixture", 2, 3)
        p = spec.init(rng)
        z = rng.standard_normal(2)
        best = cluster_objective(optimal_cluster_posterior(z, spec, p), z, spec, p, 1.0).value
        other = rng.dirichlet(np.ones(3))
        assert cluster_objective(other, z, spec, p, 1.0).value <= best + 1e-12

    def test_standard_prior_rejected(self):
        with pytest.raises(ValueError):
            optimal_cluster_posterior(np.zeros(2), PriorSpec("standard-gaussian", 2), {})


class TestGenerativeModel:
    def _private_model(self):
        layout = LatentLayout(2, 3, 3)
        decs = [DecoderSpec(s, "mlp-gaussian", 4, hidden=(5,)) for s in range(3)]
        mods = [ModalitySpec("continuous", 4) for _ in range(3)]
        return GenerativeModel(PriorSpec("standard-gaussian", layout.total_dim), decs, mods, layout)

    def test_private_block_independence(self):
        model = self._private_model()
        rng = np.random.default_rng(42)
        params = model.init(rng)
        z = rng.standard_normal((6, model.latent_dim))
        x = rng.standard_normal((6, 4))
        base = model.modality_log_prob(x, z, 0, params).value
        perturbed = z.copy()
        for t in (1, 2):
            lo, hi = model.layout.private_slice(t)
            perturbed[:, lo:hi] += rng.standard_normal((6, hi - lo)) * 10
        np.testing.assert_array_equal(model.modality_log_prob(x, perturbed, 0, params).value, base)
        lo, hi = model.layout.private_slice(0)
        own = z.copy()
        own[:, lo:hi] += 1.0
        assert np.all(model.modality_log_prob(x, own, 0, params).value != base)

    def test_layout_split_join_round_trip(self):
        layout = LatentLayout(2, 3, 3)
        z = np.random.default_rng(42).standard_normal((4, layout.total_dim))
        shared, private = layout.split(z)
        assert private.shape == (4, 3, 3)
        np.testing.assert_array_equal(layout.join(shared, private).value, z)

    def test_mismatched_decoder_rejected(self):
        with pytest.raises(ValueError):
            GenerativeModel(PriorSpec("standard-gaussian", 2), [DecoderSpec(0, "categorical", 3)],
                            [ModalitySpec("continuous", 3)])

    def test_reconstruction_weights_select_modalities(self):
        rng = np.random.default_rng(42)
        decs = [DecoderSpec(s, "linear-gaussian", 3) for s in range(2)]
        model = GenerativeModel(PriorSpec("standard-gaussian", 2), decs, [ModalitySpec("continuous", 3)] * 2)
        params = model.init(rng)
        x = [rng.standard_normal((5, 3)) for _ in range(2)]
        z = rng.standard_normal((5, 2))
        weights = np.array([[1, 0], [0, 1], [1, 1], [0, 0], [1, 0]], dtype=bool)
        total, _ = model.reconstruction(x, z, weights, params)
        per = [model.modality_log_prob(x[s], z, s, params).value for s in range(2)]
        np.testing.assert_allclose(total.value, (weights * np.stack(per, -1)).sum(-1), atol=1e-14)

    def test_parameters_round_trip_through_json(self):
        model = self._private_model()
        params = model.init(np.random.default_rng(42))
        back, meta = nn.params_from_json(nn.params_to_json(params, tag="abc"))
        assert meta["tag"] == "abc"
        assert set(back) == set(params)
        for k in params:
            np.testing.assert_array_equal(back[k], params[k])
