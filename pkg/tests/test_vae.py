import math

import numpy as np
import pytest
from scipy.special import expit, logsumexp
from scipy.stats import norm

from framework.errors import ContractError, ShapeError, ValidationError
from framework.mlp import mlp_forward
from framework.params import ParamVector
from framework.rng import RngStream
from models.config_models import ArchitectureConfig, LossConfig
from services.vae_service import (
    EncoderOutput,
    VaeModel,
    bernoulli_log_likelihood,
    beta_vae_objective,
    decode,
    encode,
    evaluate_reconstruction,
    latent_kl,
    recon_scale,
    reconstruction_loss,
    reconstruction_nll,
    reparameterise,
    sample_latent,
    vae_loss_and_grads,
)
from tests.conftest import random_binary, relative_error

P_MIN = 5e-3


def _saturated_decoder(model: VaeModel, logits: np.ndarray) -> VaeModel:
    """Decoder whose output ignores z: zero weights, last-layer bias = `logits`."""
    theta = model.theta.zeros_like()
    w, _ = theta.layers[-1]
    theta.layers[-1] = (w, np.asarray(logits, dtype=np.float64))
    return model.with_params(model.phi, ParamVector(theta.layers))


class TestEncode:
    def test_zero_encoder(self, tiny_arch, binary_batch):
        enc = encode(VaeModel.build(tiny_arch, "zero"), binary_batch)
        np.testing.assert_array_equal(enc.mu, 0.0)
        np.testing.assert_array_equal(enc.log_sigma, 0.0)

    def test_splits_network_output(self, tiny_model, binary_batch):
        enc = encode(tiny_model, binary_batch)
        out, _ = mlp_forward(tiny_model.encoder_config, tiny_model.phi, binary_batch)
        np.testing.assert_array_equal(enc.mu, out[:, :2])
        np.testing.assert_array_equal(enc.log_sigma, out[:, 2:])

    def test_identical_rows(self, tiny_model):
        x = np.tile(random_binary(np.random.default_rng(0), 1), (3, 1))
        enc = encode(tiny_model, x)
        np.testing.assert_array_equal(enc.mu[0], enc.mu[2])

    def test_strict_mode_rejects_grey_pixels(self, tiny_model):
        x = np.full((1, 16), 0.5)
        encode(tiny_model, x)
        with pytest.raises(ValidationError):
            encode(tiny_model, x, strict=True)

    def test_wrong_width(self, tiny_model):
        with pytest.raises(ShapeError):
            encode(tiny_model, np.zeros((2, 15)))


class TestSampleLatent:
    def test_definition(self):
        enc = EncoderOutput(mu=np.array([[1.0, -2.0]]), log_sigma=np.array([[0.5, -1.0]]))
        eps = np.array([[0.3, -1.2]])
        np.testing.assert_allclose(reparameterise(enc, eps) - enc.mu, np.exp(enc.log_sigma) * eps, rtol=1e-15)

    def test_degenerate_sigma(self):
        enc = EncoderOutput(mu=np.array([[0.25, 4.0]]), log_sigma=np.full((1, 2), -30.0))
        z = sample_latent(enc, np.random.default_rng(0))
        np.testing.assert_allclose(z, enc.mu, atol=1e-12)

    def test_variance(self):
        enc = EncoderOutput(mu=np.zeros((100_000, 1)), log_sigma=np.full((100_000, 1), math.log(2.0)))
        z = sample_latent(enc, RngStream(0).generator("latent", 0))
        assert z.var() == pytest.approx(4.0, rel=0.02)


class TestDecode:
    def test_zero_decoder(self, tiny_arch):
        omega = decode(VaeModel.build(tiny_arch, "zero"), np.ones((3, 2)), P_MIN)
        np.testing.assert_array_equal(omega, 0.5)

    def test_clamp_binds(self, tiny_model):
        model = _saturated_decoder(tiny_model, np.full(16, 30.0))
        omega = decode(model, np.zeros((1, 2)), P_MIN)
        np.testing.assert_array_equal(omega, 1.0 - P_MIN)

    def test_unclamped_entries_match_sigmoid(self, tiny_model):
        z = np.random.default_rng(1).normal(size=(5, 2))
        logits, _ = mlp_forward(tiny_model.decoder_config.model_copy(update={"output_activation": "identity"}), tiny_model.theta, z)
        expected = expit(logits)
        omega = decode(tiny_model, z, P_MIN)
        inside = (expected > P_MIN) & (expected < 1 - P_MIN)
        np.testing.assert_allclose(omega[inside], expected[inside], rtol=1e-14)
        assert np.all((omega >= P_MIN) & (omega <= 1 - P_MIN))


class TestBernoulliLikelihood:
    def test_best_and_worst_case(self):
        x = np.ones((1, 10))
        assert bernoulli_log_likelihood(x, np.full((1, 10), 1 - P_MIN), P_MIN)[0] == pytest.approx(10 * math.log(1 - P_MIN))
        assert bernoulli_log_likelihood(x, np.full((1, 10), P_MIN), P_MIN)[0] == pytest.approx(10 * math.log(P_MIN))

    def test_direct_summation(self):
        rng = np.random.default_rng(4)
        x = random_binary(rng, 3, 20)
        omega = rng.uniform(P_MIN, 1 - P_MIN, size=(3, 20))
        expected = [sum(math.log(w) if xi else math.log(1 - w) for xi, w in zip(xr, wr)) for xr, wr in zip(x, omega)]
        np.testing.assert_allclose(bernoulli_log_likelihood(x, omega, P_MIN), expected, rtol=1e-12)

    def test_outside_clamp(self):
        with pytest.raises(ContractError):
            bernoulli_log_likelihood(np.ones((1, 2)), np.array([[0.999, 0.5]]), P_MIN)


class TestReconstructionLoss:
    def test_zero_decoder_is_log2_over_scale(self, tiny_arch, binary_batch, loss_config):
        loss = reconstruction_loss(VaeModel.build(tiny_arch, "zero"), binary_batch, loss_config, np.random.default_rng(0))
        np.testing.assert_allclose(loss, math.log(2) / math.log(1 / P_MIN))
        assert loss[0] == pytest.approx(0.1308, abs=1e-4)

    def test_perfect_reconstruction(self, tiny_model, loss_config):
        x = random_binary(np.random.default_rng(2), 1)
        model = _saturated_decoder(tiny_model, np.where(x[0] == 1, 30.0, -30.0))
        loss = reconstruction_loss(model, x, loss_config, np.random.default_rng(0))
        assert loss[0] == pytest.approx(math.log(1 / (1 - P_MIN)) / math.log(1 / P_MIN))
        assert loss[0] == pytest.approx(9.46e-4, abs=1e-6)

    def test_maximally_wrong(self, tiny_model, loss_config):
        x = random_binary(np.random.default_rng(2), 1)
        model = _saturated_decoder(tiny_model, np.where(x[0] == 1, -30.0, 30.0))
        loss = reconstruction_loss(model, x, loss_config, np.random.default_rng(0))
        assert loss[0] == pytest.approx(1.0, abs=1e-12)
        assert loss[0] <= 1.0

    def test_bounded_on_random_models(self, tiny_arch, loss_config):
        rng = np.random.default_rng(8)
        for i in range(200):
            model = VaeModel.build(tiny_arch, "clamped_normal", rng)
            model = model.with_params(model.phi.scaled(rng.uniform(0, 20)), model.theta.scaled(rng.uniform(0, 20)))
            loss = reconstruction_loss(model, random_binary(rng, 5), loss_config, rng)
            assert np.all((loss >= 0.0) & (loss <= 1.0))

    def test_nll_and_loss_share_scale(self, tiny_model, binary_batch, loss_config):
        nll = reconstruction_nll(tiny_model, binary_batch, loss_config, RngStream(0).generator("latent", 0))
        loss = reconstruction_loss(tiny_model, binary_batch, loss_config, RngStream(0).generator("latent", 0))
        np.testing.assert_allclose(loss, nll / recon_scale(16, P_MIN))

    def test_evaluate_reconstruction(self, tiny_model, tiny_dataset, loss_config):
        summary = evaluate_reconstruction(tiny_model, tiny_dataset.examples, loss_config, np.random.default_rng(0), batch_size=7)
        assert summary.count == tiny_dataset.count
        assert summary.bounded_mean == pytest.approx(summary.raw_mean / recon_scale(16, P_MIN))
        assert summary.bounded_std_error > 0

    def test_evaluate_empty(self, tiny_model, loss_config):
        with pytest.raises(ContractError):
            evaluate_reconstruction(tiny_model, np.zeros((0, 16)), loss_config, np.random.default_rng(0))


class TestLatentKl:
    def test_standard_normal(self):
        assert latent_kl(EncoderOutput(mu=np.zeros((1, 3)), log_sigma=np.zeros((1, 3))))[0] == 0.0

    def test_unit_shift(self):
        assert latent_kl(EncoderOutput(mu=np.ones((1, 1)), log_sigma=np.zeros((1, 1))))[0] == pytest.approx(0.5)

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        enc = EncoderOutput(mu=rng.normal(size=(1000, 4)), log_sigma=rng.normal(size=(1000, 4)))
        assert np.all(latent_kl(enc) >= 0.0)

    @pytest.mark.slow
    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            mu, log_sigma = rng.normal(size=3), rng.normal(scale=0.5, size=3)
            sigma = np.exp(log_sigma)
            z = mu + sigma * rng.standard_normal((1_000_000, 3))
            log_ratio = norm.logpdf(z, mu, sigma).sum(axis=1) - norm.logpdf(z).sum(axis=1)
            exact = latent_kl(EncoderOutput(mu=mu[None], log_sigma=log_sigma[None]))[0]
            assert log_ratio.mean() == pytest.approx(exact, rel=0.02, abs=2e-3)


class TestBetaVaeObjective:
    def test_beta_zero_is_reconstruction(self, tiny_model, binary_batch, loss_config):
        out = beta_vae_objective(tiny_model, binary_batch, 0.0, loss_config, RngStream(0).generator("latent", 0))
        assert out.loss == pytest.approx(out.recon_nll)

    def test_affine_in_beta(self, tiny_model, binary_batch, loss_config):
        values = [
            beta_vae_objective(tiny_model, binary_batch, b, loss_config, RngStream(0).generator("latent", 0)).loss
            for b in (0.0, 0.5, 1.0)
        ]
        assert values[0] < values[1] < values[2]
        assert values[1] == pytest.approx(0.5 * (values[0] + values[2]))

    def test_negative_beta(self, tiny_model, binary_batch, loss_config):
        with pytest.raises(ContractError):
            beta_vae_objective(tiny_model, binary_batch, -1.0, loss_config, np.random.default_rng(0))

    @pytest.mark.parametrize("seed", range(100))
    @pytest.mark.parametrize("scale", [1.0, 1.0 / recon_scale(16, P_MIN)])
    def test_gradients_match_finite_differences(self, tiny_arch, seed, scale):
        rng = np.random.default_rng(seed)
        model = VaeModel.build(tiny_arch, "clamped_normal", rng)
        x = random_binary(rng, 4)
        config = LossConfig(p_min=P_MIN, mc_samples=2)

        def run(m):
            return vae_loss_and_grads(m, x, 0.7, config, RngStream(seed).generator("latent", 0), scale=scale)

        out = run(model)
        analytic = np.concatenate([out.grad_phi.flat(), out.grad_theta.flat()])
        numeric = np.zeros_like(analytic)
        n_phi = model.phi.total_count
        base = np.concatenate([model.phi.flat(), model.theta.flat()])
        h = 1e-6
        for i in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                shifted = base.copy()
                shifted[i] += sign * h
                m = model.with_params(
                    ParamVector.from_flat(model.phi, shifted[:n_phi]), ParamVector.from_flat(model.theta, shifted[n_phi:])
                )
                vals.append(run(m).loss)
            numeric[i] = (vals[0] - vals[1]) / (2 * h)
        assert relative_error(analytic, numeric) < 1e-4

    @pytest.mark.slow
    def test_negative_elbo_upper_bounds_nll(self):
        """Importance-sampled -log p(x) on a 2-pixel problem never exceeds the beta=1 objective."""
        arch = ArchitectureConfig(input_dim=2, latent_dim=1, hidden_widths=[4])
        rng = np.random.default_rng(0)
        model = VaeModel.build(arch, "clamped_normal", rng)
        config = LossConfig(p_min=P_MIN, mc_samples=20_000)
        for pattern in ([0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]):
            x = np.array([pattern])
            neg_elbo = beta_vae_objective(model, x, 1.0, config, rng).loss
            enc = encode(model, x)
            z = enc.mu[0] + enc.sigma[0] * rng.standard_normal((50_000, 1))
            log_w = (
                bernoulli_log_likelihood(np.repeat(x, len(z), axis=0), decode(model, z, P_MIN), P_MIN)
                + norm.logpdf(z[:, 0])
                - norm.logpdf(z[:, 0], enc.mu[0, 0], enc.sigma[0, 0])
            )
            neg_log_px = -(logsumexp(log_w) - math.log(len(z)))
            assert neg_elbo >= neg_log_px - 0.02
