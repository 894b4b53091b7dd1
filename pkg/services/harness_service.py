"""Three-step pipeline: learn a prior, train a posterior, certify it; plus grid sweeps."""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

from framework.errors import CheckpointMismatchError, ContractError, DivergenceError
from framework.rng import RngStream
from models.config_models import ExperimentConfig, LossConfig, PacBayesConfig
from models.report_models import ReconstructionStats, RunReport, SweepRow
from services.certificate_service import evaluate_certificate, noise_free_certificate, randomised_bound_report
from services.data_service import ImageDataset, load_image_set, split
from services.objective_service import PosteriorScale, WeightPrior
from services.training_service import TrainingResult, train_beta_vae, train_posterior
from services.vae_service import VaeModel, evaluate_reconstruction
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.config_loader import apply_overrides, config_hash, prior_hash
from utils.records import JsonLinesWriter, read_json, write_csv, write_json

logger = logging.getLogger(__name__)

# Indices into the "init" stream.
PRIOR_PHASE = 1
BASELINE_INIT = 2
# Index into the certificate stream for the randomised report.
RANDOMISED_REPORT = 1

# Latent-stream indices for the certificate-seeded evaluations.
TRAIN_EVAL = 1
TEST_EVAL = 2


@dataclass(frozen=True)
class RunPaths:
    out_dir: Path

    @property
    def prior_checkpoint(self) -> Path:
        return self.out_dir / "prior.ckpt"

    @property
    def prior_log(self) -> Path:
        return self.out_dir / "prior_log.jsonl"

    @property
    def posterior_checkpoint(self) -> Path:
        return self.out_dir / "posterior.ckpt"

    @property
    def train_log(self) -> Path:
        return self.out_dir / "train_log.jsonl"

    @property
    def certificates(self) -> Path:
        return self.out_dir / "certificates.jsonl"

    @property
    def report(self) -> Path:
        return self.out_dir / "report.json"


# ======================================================
# Data
# ======================================================
def load_training_data(config: ExperimentConfig) -> Tuple[ImageDataset, Optional[ImageDataset], ImageDataset]:
    """(full training set, prior split, bound split)."""
    if not config.data.train_images:
        raise ContractError("data.train_images is required for this command")
    full = load_image_set(config.data.train_images, config.data.train_limit, config.data.threshold, "train")
    if full.input_dim != config.architecture.input_dim:
        raise ContractError(
            f"images have D={full.input_dim}, architecture expects {config.architecture.input_dim}"
        )
    prior_set, bound_set = split(full, config.data.split_spec())
    return full, prior_set, bound_set


def load_test_data(config: ExperimentConfig) -> Optional[ImageDataset]:
    if not config.data.test_images:
        return None
    return load_image_set(config.data.test_images, config.data.test_limit, config.data.threshold, "test")


def _training_loss_config(config: ExperimentConfig) -> LossConfig:
    return config.training.loss_config()


def _certificate_loss_config(config: ExperimentConfig) -> LossConfig:
    return LossConfig(p_min=config.training.p_min, mc_samples=config.certificate.mc_samples)


# ======================================================
# Step 1: prior
# ======================================================
def cmd_train_prior(config: ExperimentConfig, out_dir: str | Path) -> Path:
    """Write the prior centre (phi0, theta0) for the configured scheme."""
    paths = RunPaths(Path(out_dir))
    streams = RngStream(config.seeds.master)
    scheme = config.prior.scheme
    arch = config.architecture

    if scheme == "zero":
        model = VaeModel.build(arch, "zero")
    elif scheme == "random":
        model = VaeModel.build(arch, "clamped_normal", streams.generator("init", 0))
    else:
        if not config.data.train_images:
            raise ContractError("beta_vae prior needs data.train_images")
        _, prior_set, _ = load_training_data(config)
        if prior_set is None:
            raise ContractError("beta_vae prior needs data.prior_fraction > 0")
        model = VaeModel.build(arch, "clamped_normal", streams.generator("init", 0))
        train_beta_vae(
            model,
            prior_set,
            config.prior.beta,
            _training_loss_config(config),
            config.prior.epochs,
            config.training.batch_size,
            config.training.learning_rate,
            RngStream(streams.derive_seed("init", PRIOR_PHASE)),
            dropout_rate=config.prior.dropout,
            on_epoch=JsonLinesWriter(paths.prior_log),
        )

    save_checkpoint(
        model,
        paths.prior_checkpoint,
        seed=config.seeds.master,
        config_hash=config_hash(config),
        extra={"role": "prior", "scheme": scheme, "prior_hash": prior_hash(config)},
    )
    logger.info("prior (%s) written to %s", scheme, paths.prior_checkpoint)
    return paths.prior_checkpoint


# ======================================================
# Step 2: posterior (or beta-VAE baseline)
# ======================================================
def _save_posterior(
    result: TrainingResult,
    config: ExperimentConfig,
    path: Path,
    prior_file_hash: Optional[str],
    **extra,
) -> None:
    fields = {
        "role": "posterior",
        "objective": config.training.objective,
        "sigma_phi": config.training.sigma_phi,
        "sigma_theta": config.training.sigma_theta,
        "prior_file_hash": prior_file_hash,
        "epochs_completed": len(result.log),
        **extra,
    }
    if result.scales is not None:
        fields["rho_phi"] = result.scales.rho_phi
        fields["rho_theta"] = result.scales.rho_theta
    save_checkpoint(result.model, path, seed=config.seeds.master, config_hash=config_hash(config), extra=fields)


def _train_baseline(
    config: ExperimentConfig, prior_model: VaeModel, train_set: ImageDataset, streams: RngStream, log: JsonLinesWriter
) -> TrainingResult:
    training = config.training
    if training.init == "clamped_normal":
        model = VaeModel.build(config.architecture, "clamped_normal", streams.generator("init", BASELINE_INIT))
    else:
        model = prior_model.copy()
    return train_beta_vae(
        model, train_set, training.beta, _training_loss_config(config), training.epochs,
        training.batch_size, training.learning_rate, streams,
        dropout_rate=training.dropout, on_epoch=log,
    )


def _train_pacbayes(
    config: ExperimentConfig,
    prior_model: VaeModel,
    train_set: ImageDataset,
    n_bound: int,
    streams: RngStream,
    log: JsonLinesWriter,
) -> TrainingResult:
    training = config.training
    prior = WeightPrior(prior_model.phi.copy(), prior_model.theta.copy(), training.sigma_phi, training.sigma_theta)
    pb_config = PacBayesConfig(
        delta=training.delta,
        n_bound=n_bound,
        bound_kind="mcallester" if training.objective == "pb_mcallester" else "quadratic",
        kl_attenuation=training.kl_attenuation,
        weight_noise_samples=training.weight_noise_samples,
    )
    return train_posterior(
        prior_model.copy(), prior, pb_config, _training_loss_config(config), train_set, training.epochs,
        training.batch_size, training.learning_rate, streams,
        dropout_rate=training.dropout, on_epoch=log,
    )


def cmd_train(config: ExperimentConfig, out_dir: str | Path, prior_path: Optional[str | Path] = None) -> Path:
    """Train from the prior centre; on divergence the last good state is checkpointed and the error re-raised."""
    paths = RunPaths(Path(out_dir))
    prior_ckpt = load_checkpoint(prior_path or paths.prior_checkpoint, config.architecture)
    full, _, bound_set = load_training_data(config)
    train_set = bound_set if config.training.posterior_data == "bound" else full
    streams = RngStream(config.seeds.master)
    log = JsonLinesWriter(paths.train_log)

    logger.info(
        "training %s on %d images (n_bound=%d, config %s)",
        config.training.objective, train_set.count, bound_set.count, config_hash(config)[:12],
    )
    try:
        if config.training.objective == "beta_vae":
            result = _train_baseline(config, prior_ckpt.model, train_set, streams, log)
        else:
            result = _train_pacbayes(config, prior_ckpt.model, train_set, bound_set.count, streams, log)
    except DivergenceError as e:
        logger.error("training diverged: %s; writing last good state", e)
        if e.last_good is not None:
            _save_posterior(
                e.last_good, config, paths.posterior_checkpoint, prior_ckpt.file_hash,
                diverged=True, diverged_epoch=e.epoch,
            )
        raise
    _save_posterior(result, config, paths.posterior_checkpoint, prior_ckpt.file_hash)
    return paths.posterior_checkpoint


# ======================================================
# Step 3: certificates and report
# ======================================================
def _stats(model: VaeModel, dataset: ImageDataset, loss_config: LossConfig, rng, batch_size: int) -> ReconstructionStats:
    summary = evaluate_reconstruction(model, dataset.examples, loss_config, rng, batch_size)
    return ReconstructionStats(
        count=summary.count,
        raw_nats_per_image=summary.raw_mean,
        bounded=summary.bounded_mean,
        bounded_std_error=summary.bounded_std_error,
    )


def cmd_certify(
    config: ExperimentConfig,
    out_dir: str | Path,
    posterior_path: Optional[str | Path] = None,
    prior_path: Optional[str | Path] = None,
) -> RunReport:
    started = time.perf_counter()
    paths = RunPaths(Path(out_dir))
    training = config.training
    posterior = load_checkpoint(posterior_path or paths.posterior_checkpoint, config.architecture)
    prior_ckpt = load_checkpoint(prior_path or paths.prior_checkpoint, config.architecture)

    recorded_prior = posterior.extra.get("prior_file_hash")
    if recorded_prior is not None and recorded_prior != prior_ckpt.file_hash:
        raise CheckpointMismatchError("posterior was trained against a different prior checkpoint")
    for key in ("sigma_phi", "sigma_theta"):
        if key in posterior.extra and posterior.extra[key] != getattr(training, key):
            raise CheckpointMismatchError(
                f"posterior was trained with {key}={posterior.extra[key]}, config says {getattr(training, key)}"
            )

    full, _, bound_set = load_training_data(config)
    train_set = bound_set if training.posterior_data == "bound" else full
    test_set = load_test_data(config)
    prior = WeightPrior(prior_ckpt.model.phi, prior_ckpt.model.theta, training.sigma_phi, training.sigma_theta)
    model = posterior.model
    loss_config = _certificate_loss_config(config)
    cert_cfg = config.certificate
    noise_seed = config.seeds.certificate_noise
    eval_streams = RngStream(noise_seed)

    perturbed = evaluate_certificate(
        model, prior, bound_set, loss_config, cert_cfg.delta, noise_seed,
        mode="perturbed", batch_size=cert_cfg.batch_size, checkpoint_hash=posterior.file_hash,
    )
    small_noise = evaluate_certificate(
        model, prior, bound_set, loss_config, cert_cfg.delta, noise_seed,
        mode="small_noise_approx", batch_size=cert_cfg.batch_size, checkpoint_hash=posterior.file_hash,
    )
    noise_free = noise_free_certificate(model, prior, perturbed, loss_config)

    randomised = None
    if cert_cfg.randomised_samples > 0:
        if "rho_phi" not in posterior.extra:
            logger.warning("randomised report skipped: checkpoint has no posterior scales")
        else:
            scales = PosteriorScale(posterior.extra["rho_phi"], posterior.extra["rho_theta"])
            randomised = randomised_bound_report(
                model, prior, scales, bound_set, loss_config, cert_cfg.delta, cert_cfg.randomised_samples,
                RngStream(eval_streams.derive_seed("certificate", RANDOMISED_REPORT)), cert_cfg.batch_size,
            )

    train_stats = _stats(model, train_set, loss_config, eval_streams.generator("latent", TRAIN_EVAL), cert_cfg.batch_size)
    test_stats = (
        _stats(model, test_set, loss_config, eval_streams.generator("latent", TEST_EVAL), cert_cfg.batch_size)
        if test_set is not None
        else None
    )

    certificates = [perturbed, small_noise, noise_free]
    report = RunReport(
        config_hash=config_hash(config),
        objective=training.objective,
        train=train_stats,
        test=test_stats,
        n_bound=bound_set.count,
        certificates=certificates,
        randomised=randomised,
        distance_phi=math.sqrt(model.phi.squared_distance(prior.phi0)),
        distance_theta=math.sqrt(model.theta.squared_distance(prior.theta0)),
        wall_clock_seconds=time.perf_counter() - started,
    )
    cert_log = JsonLinesWriter(paths.certificates)
    for cert in certificates:
        cert_log(cert)
    write_json(report, paths.report)
    logger.info(
        "certified %s: bound=%.5f (%.1f nats/image), train=%.3f test=%s",
        training.objective, perturbed.risk_bound, perturbed.risk_bound_rescaled_nats_per_image,
        train_stats.raw_nats_per_image, f"{test_stats.raw_nats_per_image:.3f}" if test_stats else "n/a",
    )
    return report


# ======================================================
# Sweeps
# ======================================================
def sweep_grid(config: ExperimentConfig) -> List[ExperimentConfig]:
    """Cartesian product of the [sweep] axes in a fixed order; absent axes keep the base value."""
    sweep = config.sweep
    axes = {
        "objective": sweep.objective,
        "prior_scheme": sweep.prior_scheme,
        "beta": sweep.beta,
        "sigma": sweep.sigma,
        "kl_attenuation": sweep.kl_attenuation,
        "seed": sweep.seeds,
    }
    if not any(axes.values()):
        raise ContractError("sweep grid is empty; set at least one [sweep] axis")
    values = [axis or [None] for axis in axes.values()]
    return [
        apply_overrides(
            config, objective=objective, prior_scheme=scheme, beta=beta,
            sigma=sigma, kl_attenuation=lam, seed=seed,
        )
        for objective, scheme, beta, sigma, lam, seed in itertools.product(*values)
    ]


def _row(index: int, config: ExperimentConfig, grid_size: int, report: Optional[RunReport], error: Optional[str]) -> SweepRow:
    row = SweepRow(
        row=index,
        config_hash=config_hash(config),
        status="ok" if report is not None else "failed",
        objective=config.training.objective,
        prior_scheme=config.prior.scheme,
        beta=config.training.beta,
        sigma=config.training.sigma_phi,
        kl_attenuation=config.training.kl_attenuation,
        seed=config.seeds.master,
        sigma_grid_size=grid_size,
        error=error,
    )
    if report is None:
        return row
    by_kind = {(c.kind, c.mode): c.risk_bound for c in report.certificates}
    return row.model_copy(
        update={
            "train_raw": report.train.raw_nats_per_image,
            "test_raw": report.test.raw_nats_per_image if report.test else None,
            "gap": report.generalisation_gap,
            "derandomised_bound": by_kind.get(("derandomised", "perturbed")),
            "small_noise_bound": by_kind.get(("derandomised", "small_noise_approx")),
            "noise_free_bound": by_kind.get(("noise_free", "perturbed")),
            "distance_phi": report.distance_phi,
        }
    )


def cmd_sweep(config: ExperimentConfig, out_dir: str | Path) -> List[SweepRow]:
    """One row per grid point, written to sweep.csv after every row.

    Rows whose report already exists under rows/<config hash> are reused;
    priors are cached under priors/<prior hash>. A failing row is recorded
    and the sweep moves on.
    """
    out_dir = Path(out_dir)
    grid = sweep_grid(config)
    sigma_grid_size = max(len(config.sweep.sigma), 1)
    table = out_dir / "sweep.csv"
    rows: List[SweepRow] = []

    for index, row_config in enumerate(grid):
        row_hash = config_hash(row_config)
        row_paths = RunPaths(out_dir / "rows" / row_hash[:16])
        report, error = None, None
        if row_paths.report.exists():
            logger.info("row %d (%s): reusing existing report", index, row_hash[:12])
            report = read_json(row_paths.report, RunReport)
        else:
            try:
                prior_dir = out_dir / "priors" / prior_hash(row_config)[:16]
                prior_path = RunPaths(prior_dir).prior_checkpoint
                if not prior_path.exists():
                    cmd_train_prior(row_config, prior_dir)
                cmd_train(row_config, row_paths.out_dir, prior_path)
                report = cmd_certify(row_config, row_paths.out_dir, prior_path=prior_path)
            except Exception as e:
                logger.exception("row %d (%s) failed", index, row_hash[:12])
                error = f"{type(e).__name__}: {e}"
        rows.append(_row(index, row_config, sigma_grid_size, report, error))
        write_csv(rows, table, SweepRow)
    logger.info("sweep finished: %d rows, %d failed", len(rows), sum(r.status == "failed" for r in rows))
    return rows
