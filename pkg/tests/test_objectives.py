import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmvae.aggregation import EncoderSpec, LearnedEncoder, MaskSubset
from mmvae.distributions import diag_log_prob, diag_sample, kl_diag
from mmvae.linear_oracle import exact_marginal_llh
from mmvae.model import DecoderSpec, GenerativeModel, LatentLayout, ModalitySpec, PriorSpec
from mmvae.objectives import (
    ObjectiveConfig,
    TrainState,
    augmented_objective_step,
    conditional_bound,
    cosine_lr,
    draw_step_noise,
    element_rng,
    marginal_bound,
    mask_from_uniforms,
    masked_objective_loss,
    masked_objective_step,
    mixture_bound,
    optimizer_step,
    private_kl_terms,
    private_objective_step,
    sample_mask,
    tc_bound,
)
from oracles import linear_setup, mask

BOUNDS = (marginal_bound, conditional_bound, tc_bound, mixture_bound)


def learned_setup(scheme="sum-pooling", prior=None, m=3, layout=None, private_dim=0, seed=42):
    rng = np.random.default_rng(seed)
    latent = layout.total_dim if layout is not None else 2
    prior = prior or PriorSpec("standard-gaussian", latent)
    decs = [DecoderSpec(s, "mlp-gaussian", 4, hidden=(6,)) for s in range(m)]
    model = GenerativeModel(prior, decs, [ModalitySpec("continuous", 4)] * m, layout)
    shared = 2 if layout is None else layout.shared_dim
    spec = EncoderSpec(scheme, latent, feature_dim=6, hidden=(8,), chi_hidden=(8,), rho_hidden=(8,),
                       pool_dim=8, attention_width=8, heads=2, blocks=1, ffn_hidden=8,
                       shared_dim=shared if private_dim else None, private_dim=private_dim)
    enc = LearnedEncoder(spec, model)
    params = {**model.init(rng), **enc.init(rng)}
    x = [rng.standard_normal((6, 4)) for _ in range(m)]
    return model, enc, params, x


def step_noise(m, shared, private, config, batch=6, seed=42, epoch=0):
    rngs = [element_rng(seed, epoch, i) for i in range(batch)]
    return draw_step_noise(rngs, m, shared, private, config)


class TestMaskSampler:
    def test_empty_and_full_probability(self):
        rng = np.random.default_rng(42)
        m, n = 3, 100_000
        draws = np.array([sample_mask(rng, m).bits for _ in range(n)])
        size = draws.sum(axis=1)
        for frac in ((size == 0).mean(), (size == m).mean()):
            p = 1 / (m + 1)
            assert abs(frac - p) < 4 * np.sqrt(p * (1 - p) / n)

    def test_gamma_extremes(self):
        rng = np.random.default_rng(42)
        assert all(len(sample_mask(rng, 5, gamma=0.0)) == 0 for _ in range(100))
        assert all(len(sample_mask(rng, 5, gamma=1.0)) == 5 for _ in range(100))

    def test_singleton_and_fixed_samplers(self):
        u = np.zeros(4)
        assert mask_from_uniforms("uniform-singletons", 0.6, u).tolist() == [False, False, True, False]
        assert mask_from_uniforms("fixed-subset", 0.1, u, (1, 3)).tolist() == [False, True, False, True]

    def test_element_noise_is_order_free(self):
        config = ObjectiveConfig()
        full = step_noise(3, 2, 0, config, batch=6)
        single = draw_step_noise([element_rng(42, 0, 4)], 3, 2, 0, config)
        np.testing.assert_array_equal(full.eps_m[4], single.eps_m[0])
        np.testing.assert_array_equal(full.mask[4], single.mask[0])

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(bound="elbo")
        with pytest.raises(ValueError):
            ObjectiveConfig(beta=0.0)
        assert ObjectiveConfig(bound="tc").sampler == "uniform-singletons"


class TestBoundEstimates:
    def test_empty_subset_marginal_is_zero(self):
        s = linear_setup()
        est = marginal_bound(s.data.values, MaskSubset.empty(3), s.model, s.encoder, s.params, 1.0,
                             np.random.default_rng(42))
        np.testing.assert_array_equal(est.total, np.zeros(20))

    def test_full_subset_conditional_is_zero(self):
        s = linear_setup()
        est = conditional_bound(s.data.values, MaskSubset.full(3), s.model, s.encoder, s.params, 1.0,
                                np.random.default_rng(42))
        np.testing.assert_array_equal(est.total, np.zeros(20))

    @pytest.mark.parametrize("bound", BOUNDS)
    def test_total_is_sum_of_terms(self, bound):
        s = linear_setup()
        est = bound(s.data.values, mask(3, [0, 2]), s.model, s.encoder, s.params, 0.7,
                    np.random.default_rng(42), n=3)
        np.testing.assert_array_equal(est.total, est.term_sum())

    def test_exact_posterior_bound_is_tight_on_average(self):
        s = linear_setup(n=4)
        subset = mask(3, [0, 1])
        est = marginal_bound(s.data.values, subset, s.model, s.encoder, s.params, 1.0,
                             np.random.default_rng(42), n=4000)
        exact = exact_marginal_llh(s.oracle, s.data.values, subset)
        assert np.all(np.abs(est.total - exact) < 4 * est.standard_error)

    def test_tc_bound_by_hand(self):
        s = linear_setup(n=5)
        x, subset = s.data.values, mask(3, [1])
        est = tc_bound(x, subset, s.model, s.encoder, s.params, 1.3, np.random.default_rng(42), n=2)
        rng = np.random.default_rng(42)
        eps = rng.standard_normal((2, 5, 5))
        feats = s.encoder.features(x, s.params)
        q_m = s.encoder.distribution(feats, np.ones((5, 3), bool), s.params)
        q_s = s.encoder.distribution(feats, np.broadcast_to(subset, (5, 3)), s.params)
        z = q_m.mean.value + np.exp(q_m.log_std.value) * eps
        recon = sum(s.model.modality_log_prob(x[k], z, k, s.params).value for k in range(3)).mean(0)
        expected = recon - 1.3 * kl_diag(q_m, q_s).value
        np.testing.assert_allclose(est.total, expected, atol=1e-12)

    def test_small_beta_leaves_reconstruction(self):
        s = linear_setup()
        est = mixture_bound(s.data.values, mask(3, [2]), s.model, s.encoder, s.params, 1e-12,
                            np.random.default_rng(42))
        np.testing.assert_allclose(est.total, est.reconstruction["M"], atol=1e-9)

    def test_missing_modality_matches_subset(self):
        s = linear_setup()
        observed = np.ones((20, 3), bool)
        observed[:, 1] = False
        with_missing = marginal_bound(s.data.values, MaskSubset.full(3), s.model, s.encoder, s.params, 1.0,
                                      np.random.default_rng(42), observed=observed)
        subset_only = marginal_bound(s.data.values, mask(3, [0, 2]), s.model, s.encoder, s.params, 1.0,
                                     np.random.default_rng(42))
        np.testing.assert_array_equal(with_missing.total, subset_only.total)


class TestMaskedObjective:
    def test_empty_subset_is_full_elbo(self):
        model, enc, params, x = learned_setup()
        config = ObjectiveConfig()
        noise = step_noise(3, 2, 0, config)
        noise.mask[:] = False
        loss, _ = masked_objective_loss(x, model, enc, params, config, noise)
        feats = enc.features(x, params)
        q = enc.distribution(feats, np.ones((6, 3), bool), params)
        z = diag_sample(q, noise.eps_m).value
        recon = sum(model.modality_log_prob(x[k], z, k, params).value for k in range(3))
        rate = diag_log_prob(z, q).value - (-0.5 * z**2 - 0.5 * np.log(2 * np.pi)).sum(-1)
        assert loss.value == pytest.approx(-(recon - rate).mean(), abs=1e-12)

    def test_stl_changes_gradients_not_values(self):
        model, enc, params, x = learned_setup()
        stl, plain = ObjectiveConfig(stl=True), ObjectiveConfig(stl=False)
        noise = step_noise(3, 2, 0, stl)
        a = masked_objective_step(x, model, enc, params, stl, noise=noise)
        b = masked_objective_step(x, model, enc, params, plain, noise=noise)
        assert a.loss == b.loss
        assert any(not np.allclose(a.grads[k], b.grads[k]) for k in a.grads if k.startswith("agg"))

    def test_grads_cover_all_parameters(self):
        model, enc, params, x = learned_setup()
        result = masked_objective_step(x, model, enc, params, ObjectiveConfig(), np.random.default_rng(42))
        assert set(result.grads) == set(params)
        assert all(np.all(np.isfinite(g)) for g in result.grads.values())

    @given(st.integers(0, 10_000))
    @settings(max_examples=10, deadline=None)
    def test_missing_values_never_reach_the_step(self, seed):
        model, enc, params, x = learned_setup()
        rng = np.random.default_rng(seed)
        observed = rng.random((6, 3)) < 0.6
        observed[:, 0] = True
        config = ObjectiveConfig()
        noise = step_noise(3, 2, 0, config, seed=seed)
        zeroed = [np.where(observed[:, s : s + 1], x[s], 0.0) for s in range(3)]
        garbage = [np.where(observed[:, s : s + 1], x[s], 1e3) for s in range(3)]
        a = masked_objective_step(zeroed, model, enc, params, config, noise=noise, observed=observed)
        b = masked_objective_step(garbage, model, enc, params, config, noise=noise, observed=observed)
        assert a.loss == b.loss
        for k in a.grads:
            np.testing.assert_array_equal(a.grads[k], b.grads[k])

    def test_single_component_augmented_equals_masked(self):
        mix_prior = PriorSpec("gaussian-mixture", 2, 1)
        model, enc, params, x = learned_setup(prior=mix_prior)
        params["prior.means"] = np.zeros((1, 2))
        std_model, std_enc, _, _ = learned_setup()
        config = ObjectiveConfig(bound="masked-augmented-mixture-prior")
        noise = step_noise(3, 2, 0, config)
        a = augmented_objective_step(x, model, enc, params, config, noise=noise)
        std_params = {k: v for k, v in params.items() if not k.startswith("prior.")}
        b = masked_objective_step(x, std_model, std_enc, std_params, ObjectiveConfig(), noise=noise)
        assert a.loss == pytest.approx(b.loss, abs=1e-12)
        for k in std_params:
            np.testing.assert_allclose(a.grads[k], b.grads[k], atol=1e-12)

    def test_augmented_needs_mixture_prior(self):
        model, enc, params, x = learned_setup()
        with pytest.raises(ValueError):
            augmented_objective_step(x, model, enc, params, ObjectiveConfig(), np.random.default_rng(42))


class TestPrivateObjective:
    def test_zero_private_dim_reduces_to_masked(self):
        layout = LatentLayout(2, 0, 3)
        model, enc, params, x = learned_setup(layout=layout)
        plain_model, plain_enc, _, _ = learned_setup()
        config = ObjectiveConfig(private=True)
        noise = step_noise(3, 2, 0, config)
        a = private_objective_step(x, model, enc, params, config, noise=noise)
        b = masked_objective_step(x, plain_model, plain_enc, params, ObjectiveConfig(), noise=noise)
        assert a.loss == pytest.approx(b.loss, abs=1e-12)
        for k in params:
            np.testing.assert_allclose(a.grads[k], b.grads[k], atol=1e-12)

    @pytest.mark.parametrize("scheme", ("poe", "sum-pooling", "self-attention"))
    def test_kl_decomposition(self, scheme):
        layout = LatentLayout(2, 3, 3)
        model, enc, params, x = learned_setup(scheme, layout=layout, private_dim=3)
        rng = np.random.default_rng(42)
        mask_s = rng.random((6, 3)) < 0.5
        observed = np.ones((6, 3), bool)
        observed[0, 2] = False
        mask_s &= observed
        feats = enc.features(x, params)
        q_m = enc.distribution(feats, observed, params)
        q_s = enc.distribution(feats, mask_s, params)
        z_shared = diag_sample(q_m, rng.standard_normal((6, 2))).value
        bundle_m = enc.private(feats, observed, z_shared, q_m, params)
        bundle_s = enc.private(feats, mask_s, z_shared, q_s, params)
        z_priv = diag_sample(bundle_m.private, rng.standard_normal((6, 3, 3))).value
        assembled, decomposed = private_kl_terms(z_shared, z_priv, q_m, q_s, bundle_m, bundle_s, mask_s, observed)
        np.testing.assert_allclose(assembled, decomposed, atol=1e-10)

    def test_private_step_runs_and_is_finite(self):
        layout = LatentLayout(2, 3, 3)
        model, enc, params, x = learned_setup(layout=layout, private_dim=3)
        result = private_objective_step(x, model, enc, params, ObjectiveConfig(private=True),
                                        np.random.default_rng(42))
        assert np.isfinite(result.loss)
        assert set(result.grads) == set(params)

    def test_private_step_needs_layout(self):
        model, enc, params, x = learned_setup()
        with pytest.raises(ValueError):
            private_objective_step(x, model, enc, params, ObjectiveConfig(private=True), np.random.default_rng(42))


class TestOptimizer:
    def test_zero_gradient_leaves_parameters(self):
        params = {"w": np.random.default_rng(42).standard_normal(3)}
        state = optimizer_step(TrainState.create(params, 1e-2, 1e-3, 10), {"w": np.zeros(3)})
        np.testing.assert_array_equal(state.params["w"], params["w"])
        assert state.step == 1

    def test_schedule_endpoints(self):
        assert cosine_lr(0, 5e-4, 1e-4, 100) == pytest.approx(5e-4, abs=1e-18)
        assert cosine_lr(100, 5e-4, 1e-4, 100) == pytest.approx(1e-4, abs=1e-18)
        assert cosine_lr(50, 5e-4, 1e-4, 100) == pytest.approx(3e-4, abs=1e-18)

    def test_quadratic_converges(self):
        state = TrainState.create({"x": np.array([1.0, -2.0, 3.0])}, 0.1, 1e-4, 500)
        for _ in range(500):
            state = optimizer_step(state, {"x": state.params["x"]})
        assert np.all(np.abs(state.params["x"]) < 1e-3)

    def test_first_step_moves_by_learning_rate(self):
        state = optimizer_step(TrainState.create({"x": np.array([1.0, -1.0])}, 0.01, 0.001, 10),
                               {"x": np.array([0.5, -3.0])})
        np.testing.assert_allclose(state.params["x"], [0.99, -0.99], atol=1e-8)

    def test_mismatched_keys(self):
        state = TrainState.create({"a": np.zeros(2)})
        with pytest.raises(KeyError):
            optimizer_step(state, {"b": np.zeros(2)})
