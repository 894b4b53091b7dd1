"""Risk certificates: binary kl, its upper inverse, and the derandomised budgets."""
from __future__ import annotations

import logging
import math
from typing import Literal, Optional, Tuple

import numpy as np
from scipy.optimize import bisect
from scipy.special import rel_entr

from framework.errors import ContractError
from framework.params import ParamVector
from framework.rng import RngStream
from models.config_models import LossConfig
from models.report_models import Certificate, RandomisedBoundReport
from services.data_service import ImageDataset
from services.objective_service import (
    PosteriorScale,
    WeightPrior,
    confidence_term,
    gaussian_weight_kl,
    perturb_weights,
    quadratic_value,
)
from services.vae_service import VaeModel, evaluate_reconstruction, recon_scale

logger = logging.getLogger(__name__)

KL_INVERSE_XTOL = 1e-9
KL_INVERSE_RESIDUAL = 1e-8
MIN_POSTERIOR_SCALE = 1e-8


def binary_kl(q: float, p: float) -> float:
    """kl(q || p) between Bernoulli(q) and Bernoulli(p), with 0 log 0 = 0."""
    if not 0.0 <= q <= 1.0 or not 0.0 <= p <= 1.0:
        raise ContractError(f"binary kl needs q, p in [0, 1], got q={q}, p={p}")
    total = float(rel_entr(q, p) + rel_entr(1.0 - q, 1.0 - p))
    return max(total, 0.0)


def _kl_at_tail(p: float, t: float) -> float:
    """kl(p || q) with q = 1 - exp(-t), evaluated without forming 1 - q."""
    value = (1.0 - p) * t
    if p > 0.0:
        value += p * (math.log(p) - math.log(-math.expm1(-t)))
    if p < 1.0:
        value += (1.0 - p) * math.log1p(-p)
    return value


def kl_inverse(p: float, c: float, xtol: float = KL_INVERSE_XTOL) -> float:
    """sup{q in [p, 1] : kl(p || q) <= c}, by bisection.

    The root is bracketed in t = -log(1 - q), where kl(p || .) has slope at most 1,
    so an `xtol` bracket in t also bounds the kl residual.
    """
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"kl inverse needs p in [0, 1], got {p}")
    if c < 0 or math.isnan(c):
        raise ContractError(f"kl inverse needs a non-negative budget, got {c}")
    if c == 0.0 or p == 1.0:
        return 1.0 if p == 1.0 else p
    if math.isinf(c):
        return 1.0
    if p == 0.0:
        return -math.expm1(-c)

    lo = -math.log1p(-p)
    if _kl_at_tail(p, lo) >= c:
        return p
    # largest t whose q = 1 - exp(-t) is still a float below 1
    t_max = -math.log1p(-float(np.nextafter(1.0, 0.0)))
    if _kl_at_tail(p, t_max) <= c:
        return 1.0
    hi = min(lo + 1.0, t_max)
    while _kl_at_tail(p, hi) <= c:
        hi = min(lo + 2.0 * (hi - lo), t_max)
    t = bisect(lambda s: _kl_at_tail(p, s) - c, lo, hi, xtol=xtol)
    # round up: the returned q is never below the exact inverse
    q = max(p, float(np.nextafter(-math.expm1(-(t + 2.0 * xtol)), 1.0)))
    # within ~1e-8 of 1 a single ulp of q moves kl past the tolerance
    if q >= 1.0 or binary_kl(p, q) - c > KL_INVERSE_RESIDUAL:
        return 1.0
    return q


# ======================================================
# Budgets
# ======================================================
def derandomised_budget(
    phi: ParamVector,
    theta: ParamVector,
    prior: WeightPrior,
    eps_phi: ParamVector,
    eps_theta: ParamVector,
    n: int,
    delta: float,
) -> float:
    """Right-hand side of the single-draw bound, before flooring.

    `eps_*` are the actual perturbations (drawn with the prior's sigma).
    """
    sig2_phi, sig2_theta = prior.sigma_phi**2, prior.sigma_theta**2
    shift_phi = phi.sub(prior.phi0).add_scaled(eps_phi, 1.0)
    shift_theta = theta.sub(prior.theta0).add_scaled(eps_theta, 1.0)
    term_phi = (shift_phi.squared_norm() - eps_phi.squared_norm()) / (2.0 * sig2_phi * n)
    term_theta = (shift_theta.squared_norm() - eps_theta.squared_norm()) / (2.0 * sig2_theta * n)
    return term_phi + term_theta + confidence_term(n, delta) / n


def noise_free_budget_from_distances(
    sq_dist_phi: float, sq_dist_theta: float, sigma_phi: float, sigma_theta: float, n: int, delta: float
) -> float:
    """||phi - phi0||^2/(2 sigma_phi^2 n) + ||theta - theta0||^2/(2 sigma_theta^2 n) + log(2 sqrt(n)/delta)/(2n)."""
    if sq_dist_phi < 0 or sq_dist_theta < 0:
        raise ContractError("squared distances must be non-negative")
    return (
        sq_dist_phi / (2.0 * sigma_phi**2 * n)
        + sq_dist_theta / (2.0 * sigma_theta**2 * n)
        + confidence_term(n, delta) / (2.0 * n)
    )


def noise_free_budget(phi: ParamVector, theta: ParamVector, prior: WeightPrior, n: int, delta: float) -> float:
    return noise_free_budget_from_distances(
        phi.squared_distance(prior.phi0),
        theta.squared_distance(prior.theta0),
        prior.sigma_phi,
        prior.sigma_theta,
        n,
        delta,
    )


def draw_certificate_noise(
    model: VaeModel, prior: WeightPrior, noise_seed: int
) -> Tuple[ParamVector, ParamVector]:
    """(eps_phi, eps_theta) ~ N(0, sigma^2 I), fully determined by `noise_seed`."""
    rng = RngStream(noise_seed).generator("certificate", 0)
    _, eps_phi = perturb_weights(model.phi, 1.0, rng)
    _, eps_theta = perturb_weights(model.theta, 1.0, rng)
    return eps_phi.scaled(prior.sigma_phi), eps_theta.scaled(prior.sigma_theta)


def _make_certificate(
    kind: str,
    mode: str,
    empirical: float,
    std_error: float,
    budget: float,
    n: int,
    delta: float,
    prior: WeightPrior,
    scale: float,
    noise_seed: int,
    checkpoint_hash: Optional[str],
) -> Certificate:
    floored = max(budget, 0.0)
    risk = kl_inverse(empirical, floored)
    return Certificate(
        kind=kind,
        mode=mode,
        empirical_loss=empirical,
        empirical_std_error=std_error,
        raw_budget=budget,
        kl_budget=floored,
        risk_bound=risk,
        risk_bound_rescaled_nats_per_image=risk * scale,
        n=n,
        delta=delta,
        sigma_phi=prior.sigma_phi,
        sigma_theta=prior.sigma_theta,
        noise_seed=noise_seed,
        checkpoint_hash=checkpoint_hash,
    )


def evaluate_certificate(
    model: VaeModel,
    prior: WeightPrior,
    bound_set: ImageDataset,
    loss_config: LossConfig,
    delta: float,
    noise_seed: int,
    mode: Literal["perturbed", "small_noise_approx"] = "perturbed",
    batch_size: int = 500,
    checkpoint_hash: Optional[str] = None,
) -> Certificate:
    """Derandomised certificate from one certificate-seeded weight perturbation."""
    if bound_set is None or bound_set.count == 0:
        raise ContractError("certificate needs a non-empty bound set")
    prior.check_model(model)
    n = bound_set.count
    eps_phi, eps_theta = draw_certificate_noise(model, prior, noise_seed)
    if mode == "perturbed":
        evaluated = model.with_params(model.phi.add_scaled(eps_phi, 1.0), model.theta.add_scaled(eps_theta, 1.0))
    elif mode == "small_noise_approx":
        evaluated = model
    else:
        raise ContractError(f"unknown certificate mode {mode!r}")
    latent_rng = RngStream(noise_seed).generator("latent", 0)
    summary = evaluate_reconstruction(evaluated, bound_set.examples, loss_config, latent_rng, batch_size)
    budget = derandomised_budget(model.phi, model.theta, prior, eps_phi, eps_theta, n, delta)
    cert = _make_certificate(
        "derandomised", mode, summary.bounded_mean, summary.bounded_std_error, budget, n, delta, prior,
        recon_scale(model.input_dim, loss_config.p_min), noise_seed, checkpoint_hash,
    )
    logger.info(
        "certificate derandomised/%s: R_hat=%.5f budget=%.6f bound=%.5f (n=%d, delta=%g)",
        mode, cert.empirical_loss, cert.kl_budget, cert.risk_bound, n, delta,
    )
    return cert


def noise_free_certificate(
    model: VaeModel,
    prior: WeightPrior,
    perturbed: Certificate,
    loss_config: LossConfig,
) -> Certificate:
    """Same empirical term as a perturbed-mode certificate, with the noise-free budget."""
    if perturbed.mode != "perturbed" or perturbed.kind != "derandomised":
        raise ContractError("noise-free certificate reuses a perturbed derandomised certificate")
    budget = noise_free_budget(model.phi, model.theta, prior, perturbed.n, perturbed.delta)
    cert = _make_certificate(
        "noise_free", "perturbed", perturbed.empirical_loss, perturbed.empirical_std_error, budget,
        perturbed.n, perturbed.delta, prior, recon_scale(model.input_dim, loss_config.p_min),
        perturbed.noise_seed, perturbed.checkpoint_hash,
    )
    logger.info("certificate noise_free: budget=%.6f bound=%.5f", cert.kl_budget, cert.risk_bound)
    return cert


def randomised_bound_report(
    model: VaeModel,
    prior: WeightPrior,
    scales: PosteriorScale,
    bound_set: ImageDataset,
    loss_config: LossConfig,
    delta: float,
    m_samples: int,
    streams: RngStream,
    batch_size: int = 500,
) -> RandomisedBoundReport:
    """Monte-Carlo evaluation of the averaged bounds at Q = N(phi, s^2 I) x N(theta, s^2 I).

    No correction for the Monte-Carlo error is applied, so the values are
    diagnostics rather than certificates.
    """
    if m_samples < 1:
        raise ContractError("randomised report needs at least one weight sample")
    n = bound_set.count
    s_phi, s_theta = scales.s_phi, scales.s_theta
    clamped = s_phi < MIN_POSTERIOR_SCALE or s_theta < MIN_POSTERIOR_SCALE
    if clamped:
        logger.warning("posterior scale below %g clamped for the randomised report", MIN_POSTERIOR_SCALE)
    s_phi, s_theta = max(s_phi, MIN_POSTERIOR_SCALE), max(s_theta, MIN_POSTERIOR_SCALE)

    losses = []
    for i in range(m_samples):
        weight_rng = streams.generator("weight", i)
        phi_tilde, _ = perturb_weights(model.phi, s_phi, weight_rng)
        theta_tilde, _ = perturb_weights(model.theta, s_theta, weight_rng)
        summary = evaluate_reconstruction(
            model.with_params(phi_tilde, theta_tilde),
            bound_set.examples,
            loss_config,
            streams.generator("latent", i),
            batch_size,
        )
        losses.append(summary.bounded_mean)
    empirical = float(np.mean(losses))

    kl = gaussian_weight_kl(model.phi, prior.phi0, prior.sigma_phi**2, s_phi**2) + gaussian_weight_kl(
        model.theta, prior.theta0, prior.sigma_theta**2, s_theta**2
    )
    conf = confidence_term(n, delta)
    budget = (kl + conf) / (2.0 * n)
    return RandomisedBoundReport(
        m_samples=m_samples,
        empirical_loss_mc=empirical,
        weight_kl=kl,
        n=n,
        delta=delta,
        s_phi=s_phi,
        s_theta=s_theta,
        s_clamped=clamped,
        mcallester_bound=empirical + math.sqrt(budget),
        quadratic_bound=quadratic_value(empirical, budget),
        kl_inverse_bound=kl_inverse(empirical, (kl + conf) / n),
    )
