"""PAC-Bayes training objectives over (phi, theta, rho_phi, rho_theta)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from framework.errors import ContractError
from framework.params import ParamVector
from framework.rng import gaussian_sample
from models.config_models import LossConfig, PacBayesConfig
from services.vae_service import VaeModel, recon_scale, vae_loss_and_grads


@dataclass(eq=False)
class WeightPrior:
    phi0: ParamVector
    theta0: ParamVector
    sigma_phi: float
    sigma_theta: float

    def __post_init__(self):
        if self.sigma_phi <= 0 or self.sigma_theta <= 0:
            raise ContractError("prior standard deviations must be positive")

    def check_model(self, model: VaeModel) -> None:
        self.phi0.check_layout(model.phi)
        self.theta0.check_layout(model.theta)


@dataclass
class PosteriorScale:
    """Log standard deviations of the training-time weight posterior; s = exp(rho)."""

    rho_phi: float
    rho_theta: float

    @property
    def s_phi(self) -> float:
        return math.exp(self.rho_phi)

    @property
    def s_theta(self) -> float:
        return math.exp(self.rho_theta)

    @classmethod
    def half_prior(cls, prior: WeightPrior) -> "PosteriorScale":
        return cls(rho_phi=math.log(prior.sigma_phi / 2.0), rho_theta=math.log(prior.sigma_theta / 2.0))


@dataclass
class PacBayesObjective:
    value: float
    recon_bounded: float
    recon_nll: float
    penalty_phi: float
    penalty_theta: float
    grad_phi: ParamVector
    grad_theta: ParamVector
    grad_rho_phi: float
    grad_rho_theta: float


def confidence_term(n: int, delta: float) -> float:
    """log(2 sqrt(n) / delta)."""
    if n < 1 or not 0.0 < delta < 1.0:
        raise ContractError(f"need n >= 1 and delta in (0, 1), got n={n}, delta={delta}")
    return math.log(2.0 * math.sqrt(n) / delta)


def gaussian_weight_kl(center: ParamVector, prior_center: ParamVector, sigma2: float, s2: float) -> float:
    """KL(N(center, s2 I) || N(prior_center, sigma2 I))."""
    if sigma2 <= 0 or s2 <= 0:
        raise ContractError(f"variances must be positive, got sigma2={sigma2}, s2={s2}")
    n_params = center.total_count
    distance = center.squared_distance(prior_center)
    return distance / (2.0 * sigma2) + 0.5 * n_params * (s2 / sigma2 + math.log(sigma2 / s2) - 1.0)


def _gaussian_weight_kl_grads(
    center: ParamVector, prior_center: ParamVector, sigma2: float, s2: float
) -> Tuple[ParamVector, float]:
    """d KL / d center and d KL / d rho, with s2 = exp(2 rho)."""
    grad_center = center.sub(prior_center).scaled(1.0 / sigma2)
    grad_rho = center.total_count * (s2 / sigma2 - 1.0)
    return grad_center, grad_rho


def perturb_weights(
    params: ParamVector, s: float, rng: np.random.Generator
) -> Tuple[ParamVector, ParamVector]:
    """w + s * eps with eps ~ N(0, I); returns the noisy weights and the standard-normal eps."""
    if s <= 0:
        raise ContractError(f"noise scale must be positive, got {s}")
    eps = ParamVector([(gaussian_sample(rng, w.shape), gaussian_sample(rng, b.shape)) for w, b in params.layers])
    return params.add_scaled(eps, s), eps


def _stochastic_recon(
    model: VaeModel,
    scales: PosteriorScale,
    batch: np.ndarray,
    loss_config: LossConfig,
    noise_samples: int,
    weight_rng: np.random.Generator,
    latent_rng: np.random.Generator,
    dropout_rate: float,
    dropout_rng: Optional[np.random.Generator],
):
    """Bounded batch loss at perturbed weights, averaged over weight-noise draws, with gradients."""
    scale = 1.0 / recon_scale(model.input_dim, loss_config.p_min)
    s_phi, s_theta = scales.s_phi, scales.s_theta
    value = nll = 0.0
    grad_phi = model.phi.zeros_like()
    grad_theta = model.theta.zeros_like()
    grad_rho_phi = grad_rho_theta = 0.0
    for _ in range(noise_samples):
        phi_tilde, eps_phi = perturb_weights(model.phi, s_phi, weight_rng)
        theta_tilde, eps_theta = perturb_weights(model.theta, s_theta, weight_rng)
        out = vae_loss_and_grads(
            model.with_params(phi_tilde, theta_tilde),
            batch,
            0.0,
            loss_config,
            latent_rng,
            scale=scale,
            dropout_rate=dropout_rate,
            dropout_rng=dropout_rng,
        )
        value += out.loss
        nll += out.recon_nll
        grad_phi = grad_phi.add_scaled(out.grad_phi, 1.0)
        grad_theta = grad_theta.add_scaled(out.grad_theta, 1.0)
        # d/d rho of loss(w + exp(rho) eps) = s * <grad, eps>
        grad_rho_phi += s_phi * out.grad_phi.dot(eps_phi)
        grad_rho_theta += s_theta * out.grad_theta.dot(eps_theta)
    m = float(noise_samples)
    return (
        value / m,
        nll / m,
        grad_phi.scaled(1.0 / m),
        grad_theta.scaled(1.0 / m),
        grad_rho_phi / m,
        grad_rho_theta / m,
    )


def mcallester_penalty(
    center: ParamVector,
    prior_center: ParamVector,
    sigma: float,
    rho: float,
    n: int,
    delta: float,
    kl_attenuation: float = 1.0,
) -> Tuple[float, ParamVector, float]:
    """sqrt(lambda * KL / (2n) + log(2 sqrt(n)/delta) / (2n)) for one network, with gradients.

    KL / (2n) expands to ||w - w0||^2 / (4 sigma^2 n) + N (s^2/sigma^2 + log(sigma^2/s^2) - 1) / (4n).
    The confidence term is not attenuated.
    """
    sigma2, s2 = sigma**2, math.exp(2.0 * rho)
    kl = gaussian_weight_kl(center, prior_center, sigma2, s2)
    inside = kl_attenuation * kl / (2.0 * n) + confidence_term(n, delta) / (2.0 * n)
    if inside < 0:
        raise ContractError("negative argument under the McAllester square root")
    root = math.sqrt(inside)
    grad_center, grad_rho = _gaussian_weight_kl_grads(center, prior_center, sigma2, s2)
    factor = kl_attenuation / (2.0 * n) / (2.0 * root)
    return root, grad_center.scaled(factor), grad_rho * factor


def mcallester_objective(
    model: VaeModel,
    prior: WeightPrior,
    scales: PosteriorScale,
    batch: np.ndarray,
    config: PacBayesConfig,
    loss_config: LossConfig,
    weight_rng: np.random.Generator,
    latent_rng: np.random.Generator,
    dropout_rate: float = 0.0,
    dropout_rng: Optional[np.random.Generator] = None,
) -> PacBayesObjective:
    """Stochastic bounded loss plus the two McAllester square-root penalties."""
    prior.check_model(model)
    recon, nll, g_phi, g_theta, g_rho_phi, g_rho_theta = _stochastic_recon(
        model, scales, batch, loss_config, config.weight_noise_samples,
        weight_rng, latent_rng, dropout_rate, dropout_rng,
    )
    lam, n, delta = config.kl_attenuation, config.n_bound, config.delta
    pen_phi, pg_phi, pg_rho_phi = mcallester_penalty(model.phi, prior.phi0, prior.sigma_phi, scales.rho_phi, n, delta, lam)
    pen_theta, pg_theta, pg_rho_theta = mcallester_penalty(
        model.theta, prior.theta0, prior.sigma_theta, scales.rho_theta, n, delta, lam
    )
    return PacBayesObjective(
        value=recon + pen_phi + pen_theta,
        recon_bounded=recon,
        recon_nll=nll,
        penalty_phi=pen_phi,
        penalty_theta=pen_theta,
        grad_phi=g_phi.add_scaled(pg_phi, 1.0),
        grad_theta=g_theta.add_scaled(pg_theta, 1.0),
        grad_rho_phi=g_rho_phi + pg_rho_phi,
        grad_rho_theta=g_rho_theta + pg_rho_theta,
    )


def quadratic_value(recon: float, budget: float) -> float:
    """(sqrt(B) + sqrt(R + B))^2."""
    if recon + budget < 0 or budget < 0:
        raise ContractError("negative argument under the quadratic-bound square roots")
    return (math.sqrt(budget) + math.sqrt(recon + budget)) ** 2


def quadratic_objective(
    model: VaeModel,
    prior: WeightPrior,
    scales: PosteriorScale,
    batch: np.ndarray,
    config: PacBayesConfig,
    loss_config: LossConfig,
    weight_rng: np.random.Generator,
    latent_rng: np.random.Generator,
    dropout_rate: float = 0.0,
    dropout_rng: Optional[np.random.Generator] = None,
) -> PacBayesObjective:
    """(sqrt(B) + sqrt(R + B))^2 with B = (lambda * KL_total + log(2 sqrt(n)/delta)) / (2n)."""
    prior.check_model(model)
    recon, nll, g_phi, g_theta, g_rho_phi, g_rho_theta = _stochastic_recon(
        model, scales, batch, loss_config, config.weight_noise_samples,
        weight_rng, latent_rng, dropout_rate, dropout_rng,
    )
    lam, n = config.kl_attenuation, config.n_bound
    sigma2_phi, sigma2_theta = prior.sigma_phi**2, prior.sigma_theta**2
    s2_phi, s2_theta = math.exp(2.0 * scales.rho_phi), math.exp(2.0 * scales.rho_theta)
    kl_phi = gaussian_weight_kl(model.phi, prior.phi0, sigma2_phi, s2_phi)
    kl_theta = gaussian_weight_kl(model.theta, prior.theta0, sigma2_theta, s2_theta)
    budget = (lam * (kl_phi + kl_theta) + confidence_term(n, config.delta)) / (2.0 * n)
    value = quadratic_value(recon, budget)

    root_b, root_rb = math.sqrt(budget), math.sqrt(recon + budget)
    d_recon = (root_b + root_rb) / root_rb
    d_budget = (root_b + root_rb) * (1.0 / root_b + 1.0 / root_rb)
    d_kl = d_budget * lam / (2.0 * n)
    kg_phi, kg_rho_phi = _gaussian_weight_kl_grads(model.phi, prior.phi0, sigma2_phi, s2_phi)
    kg_theta, kg_rho_theta = _gaussian_weight_kl_grads(model.theta, prior.theta0, sigma2_theta, s2_theta)

    return PacBayesObjective(
        value=value,
        recon_bounded=recon,
        recon_nll=nll,
        penalty_phi=lam * kl_phi / (2.0 * n),
        penalty_theta=lam * kl_theta / (2.0 * n),
        grad_phi=g_phi.scaled(d_recon).add_scaled(kg_phi, d_kl),
        grad_theta=g_theta.scaled(d_recon).add_scaled(kg_theta, d_kl),
        grad_rho_phi=d_recon * g_rho_phi + d_kl * kg_rho_phi,
        grad_rho_theta=d_recon * g_rho_theta + d_kl * kg_rho_theta,
    )


def pacbayes_objective(kind: str, *args, **kwargs) -> PacBayesObjective:
    if kind == "mcallester":
        return mcallester_objective(*args, **kwargs)
    if kind == "quadratic":
        return quadratic_objective(*args, **kwargs)
    raise ContractError(f"unknown bound kind {kind!r}")
