"""Gaussian-encoder / clamped-Bernoulli-decoder VAE and its losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from framework.errors import ContractError, ShapeError, ValidationError
from framework.mlp import ForwardCache, init_params, mlp_backward, mlp_forward
from framework.params import ParamVector
from framework.rng import gaussian_sample
from models.config_models import ArchitectureConfig, LossConfig, MlpConfig

# numerical guard on the encoder's log-std head, not part of the model
LOG_SIGMA_MIN = -30.0
LOG_SIGMA_MAX = 10.0


@dataclass(eq=False)
class VaeModel:
    architecture: ArchitectureConfig
    phi: ParamVector
    theta: ParamVector

    @classmethod
    def build(
        cls,
        architecture: ArchitectureConfig,
        scheme: Literal["zero", "clamped_normal"] = "clamped_normal",
        rng: Optional[np.random.Generator] = None,
    ) -> "VaeModel":
        phi = init_params(architecture.encoder_config(), scheme, rng)
        theta = init_params(architecture.decoder_config(), scheme, rng)
        return cls(architecture, phi, theta)

    @property
    def encoder_config(self) -> MlpConfig:
        return self.architecture.encoder_config()

    @property
    def decoder_config(self) -> MlpConfig:
        return self.architecture.decoder_config()

    @property
    def latent_dim(self) -> int:
        return self.architecture.latent_dim

    @property
    def input_dim(self) -> int:
        return self.architecture.input_dim

    def with_params(self, phi: ParamVector, theta: ParamVector) -> "VaeModel":
        return VaeModel(self.architecture, phi, theta)

    def copy(self) -> "VaeModel":
        return VaeModel(self.architecture, self.phi.copy(), self.theta.copy())


@dataclass
class EncoderOutput:
    mu: np.ndarray
    log_sigma: np.ndarray
    # pre-clip log-std and forward cache, needed only for gradients
    raw_log_sigma: Optional[np.ndarray] = field(default=None, repr=False)
    cache: Optional[ForwardCache] = field(default=None, repr=False)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


@dataclass
class VaeObjective:
    loss: float
    grad_phi: ParamVector
    grad_theta: ParamVector
    recon_nll: float
    latent_kl: float


def recon_scale(input_dim: int, p_min: float) -> float:
    """D * log(1/p_min): the raw NLL of a clamp-saturated, maximally wrong reconstruction."""
    return input_dim * math.log(1.0 / p_min)


def _check_batch(x: np.ndarray, dim: int, strict: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"batch shape {x.shape} does not match input dimension {dim}")
    if strict and not np.all((x == 0.0) | (x == 1.0)):
        raise ValidationError("input contains non-binary values")
    return x


def encode(
    model: VaeModel,
    x: np.ndarray,
    strict: bool = False,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> EncoderOutput:
    x = _check_batch(x, model.input_dim, strict)
    out, cache = mlp_forward(
        model.encoder_config, model.phi, x, dropout_rate=dropout_rate, rng=rng, train_mode=dropout_rate > 0
    )
    d = model.latent_dim
    raw_log_sigma = out[:, d:]
    return EncoderOutput(
        mu=out[:, :d],
        log_sigma=np.clip(raw_log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX),
        raw_log_sigma=raw_log_sigma,
        cache=cache,
    )


def reparameterise(enc: EncoderOutput, eps: np.ndarray) -> np.ndarray:
    """z = mu + sigma * eps; `eps` may carry extra leading sample axes."""
    return enc.mu + enc.sigma * eps


def sample_latent(enc: EncoderOutput, rng: np.random.Generator) -> np.ndarray:
    return reparameterise(enc, gaussian_sample(rng, enc.mu.shape))


def _decode_forward(
    model: VaeModel,
    z: np.ndarray,
    p_min: float,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise ShapeError(f"latent batch shape {z.shape} does not match latent dimension {model.latent_dim}")
    raw, cache = mlp_forward(
        model.decoder_config, model.theta, z, dropout_rate=dropout_rate, rng=rng, train_mode=dropout_rate > 0
    )
    omega = np.clip(raw, p_min, 1.0 - p_min)
    active = (raw > p_min) & (raw < 1.0 - p_min)
    return omega, active, cache


def decode(model: VaeModel, z: np.ndarray, p_min: float) -> np.ndarray:
    """Bernoulli means, hard-clamped to [p_min, 1 - p_min]."""
    omega, _, _ = _decode_forward(model, z, p_min)
    return omega


def bernoulli_log_likelihood(x: np.ndarray, omega: np.ndarray, p_min: Optional[float] = None) -> np.ndarray:
    """Per-example sum_j x_j log w_j + (1 - x_j) log(1 - w_j)."""
    x = np.asarray(x, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if x.shape != omega.shape:
        raise ShapeError(f"data {x.shape} and decoder output {omega.shape} differ")
    lo, hi = (p_min, 1.0 - p_min) if p_min is not None else (0.0, 1.0)
    if np.any(omega < lo) or np.any(omega > hi) or (p_min is None and np.any((omega == 0.0) | (omega == 1.0))):
        raise ContractError(f"decoder output outside the clamp range [{lo}, {hi}]")
    return np.sum(x * np.log(omega) + (1.0 - x) * np.log1p(-omega), axis=-1)


def reconstruction_nll(
    model: VaeModel, x: np.ndarray, loss_config: LossConfig, rng: np.random.Generator
) -> np.ndarray:
    """Per-example -log p(x|z) in nats, averaged over `mc_samples` latent draws."""
    x = _check_batch(x, model.input_dim, strict=False)
    enc = encode(model, x)
    k = loss_config.mc_samples
    eps = gaussian_sample(rng, (k, *enc.mu.shape))
    z = reparameterise(enc, eps).reshape(k * x.shape[0], model.latent_dim)
    omega = decode(model, z, loss_config.p_min)
    loglik = bernoulli_log_likelihood(np.tile(x, (k, 1)), omega, loss_config.p_min)
    return -loglik.reshape(k, x.shape[0]).mean(axis=0)


def reconstruction_loss(
    model: VaeModel, x: np.ndarray, loss_config: LossConfig, rng: np.random.Generator
) -> np.ndarray:
    """Bounded per-example loss in [0, 1]: raw NLL divided by D log(1/p_min)."""
    nll = reconstruction_nll(model, x, loss_config, rng)
    # clip absorbs last-ulp rounding of the saturated sum
    return np.clip(nll / recon_scale(model.input_dim, loss_config.p_min), 0.0, 1.0)


def latent_kl(enc: EncoderOutput) -> np.ndarray:
    """Per-example KL(N(mu, sigma^2) || N(0, I))."""
    return 0.5 * np.sum(enc.mu**2 + np.exp(2.0 * enc.log_sigma) - 1.0 - 2.0 * enc.log_sigma, axis=-1)


def vae_loss_and_grads(
    model: VaeModel,
    x: np.ndarray,
    beta: float,
    loss_config: LossConfig,
    latent_rng: np.random.Generator,
    scale: float = 1.0,
    dropout_rate: float = 0.0,
    dropout_rng: Optional[np.random.Generator] = None,
) -> VaeObjective:
    """mean_i [scale * NLL_i + beta * KL_i] with exact gradients through the reparameterisation.

    `scale` = 1 gives the beta-VAE objective in nats; 1 / recon_scale gives the
    bounded reconstruction loss used by the PAC-Bayes objectives.
    """
    x = _check_batch(x, model.input_dim, strict=False)
    batch, d, k = x.shape[0], model.latent_dim, loss_config.mc_samples
    p_min = loss_config.p_min

    enc = encode(model, x, dropout_rate=dropout_rate, rng=dropout_rng)
    sigma = enc.sigma
    eps = gaussian_sample(latent_rng, (k, batch, d))
    z = reparameterise(enc, eps).reshape(k * batch, d)
    omega, active, dec_cache = _decode_forward(model, z, p_min, dropout_rate, dropout_rng)

    xt = np.tile(x, (k, 1))
    loglik = bernoulli_log_likelihood(xt, omega, p_min)
    nll = -loglik.reshape(k, batch).mean(axis=0)
    kl = latent_kl(enc)
    loss = float(np.mean(scale * nll + beta * kl))

    coef = -scale / (k * batch)
    d_omega = coef * (xt / omega - (1.0 - xt) / (1.0 - omega)) * active
    grad_theta, d_z = mlp_backward(dec_cache, d_omega)
    d_z = d_z.reshape(k, batch, d)

    d_mu = d_z.sum(axis=0) + beta * enc.mu / batch
    d_log_sigma = (d_z * sigma * eps).sum(axis=0) + beta * (sigma**2 - 1.0) / batch
    d_log_sigma *= (enc.raw_log_sigma > LOG_SIGMA_MIN) & (enc.raw_log_sigma < LOG_SIGMA_MAX)
    grad_phi, _ = mlp_backward(enc.cache, np.concatenate([d_mu, d_log_sigma], axis=1))

    return VaeObjective(
        loss=loss,
        grad_phi=grad_phi,
        grad_theta=grad_theta,
        recon_nll=float(nll.mean()),
        latent_kl=float(kl.mean()),
    )


def beta_vae_objective(
    model: VaeModel,
    batch: np.ndarray,
    beta: float,
    loss_config: LossConfig,
    rng: np.random.Generator,
    dropout_rate: float = 0.0,
    dropout_rng: Optional[np.random.Generator] = None,
) -> VaeObjective:
    """Negative ELBO with the rate term weighted by beta (beta = 1 is the plain VAE)."""
    if beta < 0:
        raise ContractError("beta must be non-negative")
    return vae_loss_and_grads(
        model, batch, beta, loss_config, rng, scale=1.0, dropout_rate=dropout_rate, dropout_rng=dropout_rng
    )


@dataclass
class ReconstructionSummary:
    count: int
    raw_mean: float
    bounded_mean: float
    bounded_std_error: float


def evaluate_reconstruction(
    model: VaeModel,
    examples: np.ndarray,
    loss_config: LossConfig,
    rng: np.random.Generator,
    batch_size: int = 500,
) -> ReconstructionSummary:
    """Mean raw NLL (nats/image) and mean bounded loss over a whole dataset."""
    if len(examples) == 0:
        raise ContractError("cannot evaluate reconstruction on an empty dataset")
    nll = np.concatenate(
        [
            reconstruction_nll(model, examples[start : start + batch_size], loss_config, rng)
            for start in range(0, len(examples), batch_size)
        ]
    )
    bounded = np.clip(nll / recon_scale(model.input_dim, loss_config.p_min), 0.0, 1.0)
    std_error = float(bounded.std(ddof=1) / math.sqrt(len(bounded))) if len(bounded) > 1 else 0.0
    return ReconstructionSummary(
        count=len(bounded),
        raw_mean=float(nll.mean()),
        bounded_mean=float(bounded.mean()),
        bounded_std_error=std_error,
    )
