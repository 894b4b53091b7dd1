"""Minibatch Adam loops for beta-VAE (prior learning, baselines) and PAC-Bayes posteriors."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from framework.errors import DivergenceError, NumericError
from framework.optim import AdamState, adam_step, adam_step_array
from framework.rng import RngStream
from models.config_models import LossConfig, PacBayesConfig
from models.report_models import EpochRecord
from services.data_service import ImageDataset, minibatches
from services.objective_service import PosteriorScale, WeightPrior, pacbayes_objective
from services.vae_service import VaeModel, beta_vae_objective, recon_scale

logger = logging.getLogger(__name__)

EpochCallback = Callable[[EpochRecord], None]


@dataclass
class TrainingResult:
    model: VaeModel
    scales: Optional[PosteriorScale] = None
    log: List[EpochRecord] = field(default_factory=list)

    def snapshot(self) -> "TrainingResult":
        scales = PosteriorScale(self.scales.rho_phi, self.scales.rho_theta) if self.scales else None
        return TrainingResult(self.model.copy(), scales, list(self.log))


class _EpochMeter:
    def __init__(self):
        self.totals: dict[str, float] = {}
        self.weight = 0

    def add(self, batch_size: int, **values: float) -> None:
        for key, value in values.items():
            self.totals[key] = self.totals.get(key, 0.0) + batch_size * value
        self.weight += batch_size

    def mean(self, key: str) -> float:
        return self.totals[key] / self.weight


def train_beta_vae(
    model: VaeModel,
    dataset: ImageDataset,
    beta: float,
    loss_config: LossConfig,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    streams: RngStream,
    dropout_rate: float = 0.0,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainingResult:
    """Minimise the beta-VAE objective; `model` is updated in place."""
    result = TrainingResult(model)
    phi_state = AdamState.for_params(model.phi, learning_rate)
    theta_state = AdamState.for_params(model.theta, learning_rate)
    scale = recon_scale(model.input_dim, loss_config.p_min)
    step = 0
    for epoch in range(epochs):
        last_good = result.snapshot()
        meter = _EpochMeter()
        for batch in minibatches(dataset, batch_size, streams.derive_seed("data", epoch)):
            out = beta_vae_objective(
                model,
                batch,
                beta,
                loss_config,
                streams.generator("latent", step),
                dropout_rate=dropout_rate,
                dropout_rng=streams.generator("dropout", step) if dropout_rate > 0 else None,
            )
            if not math.isfinite(out.loss):
                raise DivergenceError("non-finite beta-VAE objective", epoch, last_good)
            try:
                adam_step(model.phi, out.grad_phi, phi_state)
                adam_step(model.theta, out.grad_theta, theta_state)
            except NumericError as e:
                raise DivergenceError(str(e), epoch, last_good) from e
            meter.add(len(batch), objective=out.loss, recon=out.recon_nll, kl=out.latent_kl)
            step += 1
        record = EpochRecord(
            epoch=epoch,
            objective=meter.mean("objective"),
            recon_raw=meter.mean("recon"),
            recon_bounded=meter.mean("recon") / scale,
            latent_kl=meter.mean("kl"),
        )
        result.log.append(record)
        logger.info(
            "beta-VAE epoch %d: objective=%.4f recon=%.4f kl=%.4f",
            epoch, record.objective, record.recon_raw, record.latent_kl,
        )
        if on_epoch:
            on_epoch(record)
    return result


def train_posterior(
    model: VaeModel,
    prior: WeightPrior,
    config: PacBayesConfig,
    loss_config: LossConfig,
    dataset: ImageDataset,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    streams: RngStream,
    scales: Optional[PosteriorScale] = None,
    dropout_rate: float = 0.0,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainingResult:
    """Jointly learn (phi, theta, rho_phi, rho_theta) on the chosen PAC-Bayes objective.

    `model` should start at the prior centre; `scales` defaults to s = sigma / 2.
    """
    prior.check_model(model)
    scales = scales or PosteriorScale.half_prior(prior)
    result = TrainingResult(model, scales)
    rho = np.array([scales.rho_phi, scales.rho_theta])
    phi_state = AdamState.for_params(model.phi, learning_rate)
    theta_state = AdamState.for_params(model.theta, learning_rate)
    rho_state = AdamState.for_array(rho, learning_rate, name="rho")
    step = 0
    for epoch in range(epochs):
        last_good = result.snapshot()
        meter = _EpochMeter()
        for batch in minibatches(dataset, batch_size, streams.derive_seed("data", epoch)):
            out = pacbayes_objective(
                config.bound_kind,
                model,
                prior,
                result.scales,
                batch,
                config,
                loss_config,
                streams.generator("weight", step),
                streams.generator("latent", step),
                dropout_rate=dropout_rate,
                dropout_rng=streams.generator("dropout", step) if dropout_rate > 0 else None,
            )
            if not math.isfinite(out.value):
                raise DivergenceError(f"non-finite {config.bound_kind} objective", epoch, last_good)
            try:
                adam_step(model.phi, out.grad_phi, phi_state)
                adam_step(model.theta, out.grad_theta, theta_state)
                adam_step_array(rho, np.array([out.grad_rho_phi, out.grad_rho_theta]), rho_state)
            except NumericError as e:
                raise DivergenceError(str(e), epoch, last_good) from e
            result.scales = PosteriorScale(float(rho[0]), float(rho[1]))
            meter.add(
                len(batch),
                objective=out.value,
                recon_raw=out.recon_nll,
                recon_bounded=out.recon_bounded,
                penalty_phi=out.penalty_phi,
                penalty_theta=out.penalty_theta,
            )
            step += 1
        record = EpochRecord(
            epoch=epoch,
            objective=meter.mean("objective"),
            recon_raw=meter.mean("recon_raw"),
            recon_bounded=meter.mean("recon_bounded"),
            penalty_phi=meter.mean("penalty_phi"),
            penalty_theta=meter.mean("penalty_theta"),
            s_phi=result.scales.s_phi,
            s_theta=result.scales.s_theta,
        )
        result.log.append(record)
        logger.info(
            "%s epoch %d: objective=%.5f recon=%.4f penalties=(%.5f, %.5f) s=(%.3g, %.3g)",
            config.bound_kind, epoch, record.objective, record.recon_raw,
            record.penalty_phi, record.penalty_theta, record.s_phi, record.s_theta,
        )
        if on_epoch:
            on_epoch(record)
    return result
