import logging
from pathlib import Path
from typing import Optional

import click

from framework.errors import PacVaeError
from models.config_models import ExperimentConfig
from services.harness_service import cmd_certify, cmd_sweep, cmd_train, cmd_train_prior
from utils.config_loader import OUT_DIR, apply_overrides, config_hash, load_config, profile_path
from utils.log_config import configure_logging

logger = logging.getLogger(__name__)


def _options(func):
    """Options shared by every pipeline command."""
    decorators = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="TOML experiment profile (defaults to the desk-scale profile)."),
        click.option("--beta", type=float, default=None, help="Override prior.beta and training.beta."),
        click.option("--sigma", type=float, default=None, help="Override training.sigma_phi and sigma_theta."),
        click.option("--lambda", "kl_attenuation", type=float, default=None, help="Override training.kl_attenuation."),
        click.option("--objective", type=click.Choice(["beta_vae", "pb_mcallester", "pb_quadratic"]), default=None),
        click.option("--seed", type=int, default=None, help="Override seeds.master."),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), default=OUT_DIR, show_default=True),
    ]
    for decorator in reversed(decorators):
        func = decorator(func)
    return func


def _resolve(config_path, beta, sigma, kl_attenuation, objective, seed) -> ExperimentConfig:
    config = _run(
        lambda: apply_overrides(
            load_config(config_path or profile_path("desk")),
            beta=beta, sigma=sigma, kl_attenuation=kl_attenuation, objective=objective, seed=seed,
        )
    )
    logger.info("config %s (%s)", config_hash(config)[:12], config.name)
    return config


def _run(action):
    try:
        return action()
    except (PacVaeError, FileNotFoundError) as e:
        raise click.ClickException(f"{type(e).__name__}: {e}") from e


@click.group()
@click.option("--log-level", default=None, help="Overrides PACVAE_LOG_LEVEL.")
def cli(log_level: Optional[str]):
    """Learn priors, train PAC-Bayes VAEs and certify them."""
    configure_logging(log_level)


@cli.command("train-prior")
@_options
def train_prior(config_path, beta, sigma, kl_attenuation, objective, seed, out_dir):
    config = _resolve(config_path, beta, sigma, kl_attenuation, objective, seed)
    path = _run(lambda: cmd_train_prior(config, out_dir))
    click.echo(str(path))


@cli.command("train")
@_options
@click.option("--prior", "prior_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Prior checkpoint (defaults to <out>/prior.ckpt).")
def train(config_path, beta, sigma, kl_attenuation, objective, seed, out_dir, prior_path):
    config = _resolve(config_path, beta, sigma, kl_attenuation, objective, seed)
    path = _run(lambda: cmd_train(config, out_dir, prior_path))
    click.echo(str(path))


@cli.command("certify")
@_options
@click.option("--prior", "prior_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--posterior", "posterior_path", type=click.Path(exists=True, dir_okay=False), default=None)
def certify(config_path, beta, sigma, kl_attenuation, objective, seed, out_dir, prior_path, posterior_path):
    config = _resolve(config_path, beta, sigma, kl_attenuation, objective, seed)
    report = _run(lambda: cmd_certify(config, out_dir, posterior_path, prior_path))
    for cert in report.certificates:
        click.echo(
            f"{cert.kind:<13} {cert.mode:<19} R_hat={cert.empirical_loss:.5f} "
            f"bound={cert.risk_bound:.5f} ({cert.risk_bound_rescaled_nats_per_image:.1f} nats/image)"
        )
    if report.generalisation_gap is not None:
        click.echo(f"generalisation gap: {report.generalisation_gap:.3f} nats/image")


@cli.command("sweep")
@_options
def sweep(config_path, beta, sigma, kl_attenuation, objective, seed, out_dir):
    config = _resolve(config_path, beta, sigma, kl_attenuation, objective, seed)
    rows = _run(lambda: cmd_sweep(config, out_dir))
    failed = sum(r.status == "failed" for r in rows)
    click.echo(f"{len(rows)} rows written to {Path(out_dir) / 'sweep.csv'} ({failed} failed)")


@cli.command("serve")
@click.option("--host", default="0.0.0.0", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host: str, port: int):
    """Run the read-only certificate HTTP service."""
    import uvicorn

    uvicorn.run("main:app", host=host, port=port)


if __name__ == "__main__":
    cli()
