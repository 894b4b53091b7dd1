import os
from pathlib import Path

import numpy as np
import pytest

import services.harness_service as harness_service
from framework.errors import CheckpointMismatchError, ContractError, DivergenceError
from models.config_models import ExperimentConfig, SweepSection
from models.report_models import EpochRecord, RunReport, SweepRow
from services.harness_service import RunPaths, cmd_certify, cmd_sweep, cmd_train, cmd_train_prior, sweep_grid
from services.vae_service import recon_scale
from utils.checkpoint import load_checkpoint
from utils.config_loader import apply_overrides, load_config, prior_hash, profile_path
from utils.records import read_csv, read_json, read_json_lines


def _with(config: ExperimentConfig, section: str, **changes) -> ExperimentConfig:
    updated = getattr(config, section).model_copy(update=changes)
    return config.model_copy(update={section: updated})


def _pipeline(config: ExperimentConfig, out_dir: Path) -> RunReport:
    cmd_train_prior(config, out_dir)
    cmd_train(config, out_dir)
    return cmd_certify(config, out_dir)


class TestTrainPrior:
    def test_zero_prior(self, tiny_config, tmp_path):
        config = _with(tiny_config, "prior", scheme="zero")
        ckpt = load_checkpoint(cmd_train_prior(config, tmp_path))
        assert not ckpt.model.phi.flat().any()
        assert not ckpt.model.theta.flat().any()
        assert ckpt.extra["role"] == "prior"
        assert ckpt.extra["scheme"] == "zero"

    def test_random_prior_depends_only_on_seed(self, tiny_config, tmp_path):
        config = _with(tiny_config, "prior", scheme="random")
        a = load_checkpoint(cmd_train_prior(config, tmp_path / "a"))
        b = load_checkpoint(cmd_train_prior(config, tmp_path / "b"))
        c = load_checkpoint(cmd_train_prior(apply_overrides(config, seed=9), tmp_path / "c"))
        assert a.file_hash == b.file_hash
        assert not np.array_equal(a.model.phi.flat(), c.model.phi.flat())

    def test_beta_vae_prior_needs_images(self, tiny_config, tmp_path):
        config = _with(tiny_config, "data", train_images=None)
        with pytest.raises(ContractError):
            cmd_train_prior(config, tmp_path)

    def test_beta_vae_prior_needs_prior_split(self, tiny_config, tmp_path):
        config = _with(tiny_config, "data", prior_fraction=0.0)
        with pytest.raises(ContractError):
            cmd_train_prior(config, tmp_path)

    def test_beta_vae_prior_log(self, tiny_config, tmp_path):
        cmd_train_prior(tiny_config, tmp_path)
        log = read_json_lines(RunPaths(tmp_path).prior_log, EpochRecord)
        assert [r.epoch for r in log] == [0, 1, 2]

    def test_beta_override_reaches_prior(self, tiny_config, tmp_path):
        config = apply_overrides(tiny_config, beta=5.0)
        assert config.prior.beta == config.training.beta == 5.0
        a = load_checkpoint(cmd_train_prior(tiny_config, tmp_path / "a"))
        b = load_checkpoint(cmd_train_prior(config, tmp_path / "b"))
        assert not np.array_equal(a.model.phi.flat(), b.model.phi.flat())

    def test_architecture_must_match_images(self, tiny_config, tmp_path):
        config = _with(tiny_config, "architecture", input_dim=25)
        with pytest.raises(ContractError):
            cmd_train_prior(config, tmp_path)


class TestTrain:
    def test_zero_epochs_returns_prior(self, tiny_config, tmp_path):
        config = _with(tiny_config, "training", epochs=0)
        prior = load_checkpoint(cmd_train_prior(config, tmp_path))
        posterior = load_checkpoint(cmd_train(config, tmp_path))
        np.testing.assert_array_equal(posterior.model.phi.flat(), prior.model.phi.flat())
        assert posterior.extra["epochs_completed"] == 0
        assert posterior.extra["rho_phi"] == pytest.approx(np.log(0.005))
        assert posterior.extra["prior_file_hash"] == prior.file_hash

    def test_writes_training_log(self, tiny_config, tmp_path):
        cmd_train_prior(tiny_config, tmp_path)
        cmd_train(tiny_config, tmp_path)
        log = read_json_lines(RunPaths(tmp_path).train_log, EpochRecord)
        assert len(log) == 2
        assert all(r.s_phi is not None for r in log)

    def test_divergence_checkpoints_last_good_state(self, tiny_config, tmp_path, monkeypatch):
        cmd_train_prior(tiny_config, tmp_path)
        real = harness_service.train_posterior

        def diverging(*args, **kwargs):
            result = real(*args, **kwargs)
            raise DivergenceError("non-finite objective", len(result.log), result)

        monkeypatch.setattr(harness_service, "train_posterior", diverging)
        with pytest.raises(DivergenceError):
            cmd_train(tiny_config, tmp_path)
        saved = load_checkpoint(RunPaths(tmp_path).posterior_checkpoint)
        assert saved.extra["diverged"] is True
        assert saved.extra["diverged_epoch"] == 2

    def test_baseline_from_fresh_init(self, tiny_config, tmp_path):
        config = _with(tiny_config, "training", objective="beta_vae", init="clamped_normal", epochs=1)
        prior = load_checkpoint(cmd_train_prior(config, tmp_path))
        posterior = load_checkpoint(cmd_train(config, tmp_path))
        assert "rho_phi" not in posterior.extra
        assert not np.array_equal(posterior.model.phi.flat(), prior.model.phi.flat())


class TestCertify:
    def test_report_contents(self, tiny_config, tmp_path):
        report = _pipeline(tiny_config, tmp_path)
        assert report.n_bound == 30
        assert [(c.kind, c.mode) for c in report.certificates] == [
            ("derandomised", "perturbed"),
            ("derandomised", "small_noise_approx"),
            ("noise_free", "perturbed"),
        ]
        scale = recon_scale(16, tiny_config.training.p_min)
        for cert in report.certificates:
            assert cert.n == report.n_bound
            assert cert.empirical_loss <= cert.risk_bound <= 1.0
            assert cert.risk_bound_rescaled_nats_per_image == pytest.approx(cert.risk_bound * scale)
        assert report.certificates[0].empirical_loss == report.certificates[2].empirical_loss
        assert report.train.count == 60 and report.test.count == 20
        assert report.generalisation_gap == pytest.approx(
            report.test.raw_nats_per_image - report.train.raw_nats_per_image
        )
        assert report.distance_phi > 0
        assert read_json(RunPaths(tmp_path).report, RunReport).certificates == report.certificates

    def test_reproducible(self, tiny_config, tmp_path):
        a = _pipeline(tiny_config, tmp_path / "a")
        b = _pipeline(tiny_config, tmp_path / "b")
        assert a.certificates == b.certificates
        assert a.train == b.train and a.test == b.test

    def test_randomised_report(self, tiny_config, tmp_path):
        config = _with(tiny_config, "certificate", randomised_samples=2)
        report = _pipeline(config, tmp_path)
        assert report.randomised is not None
        assert report.randomised.m_samples == 2
        assert report.randomised.n == report.n_bound

    def test_baseline_is_certified_at_the_given_sigma(self, tiny_config, tmp_path):
        config = _with(tiny_config, "training", objective="beta_vae", epochs=1)
        config = _with(config, "certificate", randomised_samples=2)
        report = _pipeline(config, tmp_path)
        assert report.randomised is None
        assert report.certificates[0].sigma_phi == config.training.sigma_phi

    def test_sigma_mismatch(self, tiny_config, tmp_path):
        cmd_train_prior(tiny_config, tmp_path)
        cmd_train(tiny_config, tmp_path)
        with pytest.raises(CheckpointMismatchError):
            cmd_certify(apply_overrides(tiny_config, sigma=0.2), tmp_path)

    def test_prior_mismatch(self, tiny_config, tmp_path):
        cmd_train_prior(tiny_config, tmp_path)
        cmd_train(tiny_config, tmp_path)
        other = cmd_train_prior(_with(tiny_config, "prior", scheme="zero"), tmp_path / "other")
        with pytest.raises(CheckpointMismatchError):
            cmd_certify(tiny_config, tmp_path, prior_path=other)

    def test_architecture_mismatch(self, tiny_config, tmp_path):
        cmd_train_prior(tiny_config, tmp_path)
        cmd_train(tiny_config, tmp_path)
        with pytest.raises(CheckpointMismatchError):
            cmd_certify(_with(tiny_config, "architecture", latent_dim=3), tmp_path)


@pytest.fixture
def sweep_config(tiny_config) -> ExperimentConfig:
    config = _with(tiny_config, "training", epochs=1)
    return config.model_copy(update={"sweep": SweepSection(sigma=[0.005, 0.01, 0.03, 0.05])})


class TestSweep:
    def test_grid_order(self, tiny_config):
        config = tiny_config.model_copy(
            update={"sweep": SweepSection(objective=["pb_mcallester", "pb_quadratic"], sigma=[0.01, 0.03])}
        )
        grid = sweep_grid(config)
        assert [(c.training.objective, c.training.sigma_phi) for c in grid] == [
            ("pb_mcallester", 0.01),
            ("pb_mcallester", 0.03),
            ("pb_quadratic", 0.01),
            ("pb_quadratic", 0.03),
        ]
        assert all(c.training.sigma_theta == c.training.sigma_phi for c in grid)

    def test_beta_grid_learns_one_prior_per_beta(self, tiny_config):
        config = tiny_config.model_copy(update={"sweep": SweepSection(beta=[0.1, 1.0, 4.0])})
        grid = sweep_grid(config)
        assert [c.prior.beta for c in grid] == [0.1, 1.0, 4.0]
        assert all(c.training.objective == "pb_mcallester" for c in grid)
        assert len({prior_hash(c) for c in grid}) == 3

    def test_empty_grid(self, tiny_config):
        with pytest.raises(ContractError):
            sweep_grid(tiny_config)

    def test_sigma_sweep(self, sweep_config, tmp_path):
        rows = cmd_sweep(sweep_config, tmp_path)
        assert [r.sigma for r in rows] == [0.005, 0.01, 0.03, 0.05]
        assert all(r.status == "ok" and r.sigma_grid_size == 4 for r in rows)
        assert len(list((tmp_path / "priors").iterdir())) == 1
        assert read_csv(tmp_path / "sweep.csv", SweepRow) == rows

    def test_resume_reuses_reports(self, sweep_config, tmp_path, monkeypatch):
        first = cmd_sweep(sweep_config, tmp_path)

        def fail(*args, **kwargs):
            raise AssertionError("row should have been reused")

        monkeypatch.setattr(harness_service, "cmd_train", fail)
        second = cmd_sweep(sweep_config, tmp_path)
        assert second == first

    def test_failed_rows_are_recorded(self, sweep_config, tmp_path, monkeypatch):
        def fail(config, out_dir, prior_path=None):
            if config.training.sigma_phi == 0.03:
                raise DivergenceError("non-finite objective", 0)
            return real(config, out_dir, prior_path)

        real = harness_service.cmd_train
        monkeypatch.setattr(harness_service, "cmd_train", fail)
        rows = cmd_sweep(sweep_config, tmp_path)
        assert [r.status for r in rows] == ["ok", "ok", "failed", "ok"]
        assert "DivergenceError" in rows[2].error
        assert rows[2].derandomised_bound is None
        assert read_csv(tmp_path / "sweep.csv", SweepRow)[2].status == "failed"


MNIST_DIR = os.getenv("PACVAE_MNIST_DIR")


@pytest.mark.slow
@pytest.mark.skipif(MNIST_DIR is None, reason="PACVAE_MNIST_DIR not set")
class TestDeskScaleMnist:
    @pytest.fixture
    def mnist_config(self) -> ExperimentConfig:
        config = load_config(profile_path("desk"))
        config = _with(
            config, "data",
            train_images=str(Path(MNIST_DIR) / "train-images-idx3-ubyte.gz"),
            test_images=str(Path(MNIST_DIR) / "t10k-images-idx3-ubyte.gz"),
            train_limit=2000,
            test_limit=1000,
        )
        config = _with(config, "prior", epochs=3)
        return _with(config, "training", epochs=3)

    def test_pipeline(self, mnist_config, tmp_path):
        report = _pipeline(mnist_config, tmp_path)
        assert report.n_bound == 1000
        derandomised, _, noise_free = report.certificates
        assert 0.0 < derandomised.empirical_loss <= derandomised.risk_bound <= 1.0
        assert noise_free.empirical_loss == derandomised.empirical_loss

    def test_baseline_gap_is_reported(self, mnist_config, tmp_path):
        report = _pipeline(_with(mnist_config, "training", objective="beta_vae"), tmp_path)
        assert report.generalisation_gap is not None


@pytest.mark.slow
@pytest.mark.skipif(MNIST_DIR is None, reason="PACVAE_MNIST_DIR not set")
class TestDeskScaleCertificates:
    SEEDS = (0, 1, 2)

    @pytest.fixture
    def desk_config(self) -> ExperimentConfig:
        return _with(
            load_config(profile_path("desk")), "data",
            train_images=str(Path(MNIST_DIR) / "train-images-idx3-ubyte.gz"),
            test_images=str(Path(MNIST_DIR) / "t10k-images-idx3-ubyte.gz"),
        )

    def test_certificate_is_non_vacuous(self, desk_config, tmp_path):
        report = _pipeline(desk_config, tmp_path)
        assert report.n_bound == 5000
        derandomised = report.certificates[0]
        assert derandomised.risk_bound < 1.0
        assert derandomised.risk_bound <= 3 * report.test.bounded

    def test_pacbayes_gap_not_worse_than_beta_vae(self, desk_config, tmp_path):
        gaps = {"pb_mcallester": [], "beta_vae": []}
        for seed in self.SEEDS:
            seeded = apply_overrides(desk_config, seed=seed)
            prior_path = cmd_train_prior(seeded, tmp_path / f"prior-{seed}")
            for objective in gaps:
                config = apply_overrides(seeded, objective=objective)
                if objective == "beta_vae":
                    config = _with(config, "training", beta=0.1)
                out_dir = tmp_path / f"{objective}-{seed}"
                cmd_train(config, out_dir, prior_path)
                gaps[objective].append(cmd_certify(config, out_dir, prior_path=prior_path).generalisation_gap)
        assert np.mean(gaps["pb_mcallester"]) <= np.mean(gaps["beta_vae"])

    def test_attenuation_lets_weights_move(self, desk_config, tmp_path):
        for seed in self.SEEDS:
            seeded = apply_overrides(desk_config, seed=seed)
            prior_path = cmd_train_prior(seeded, tmp_path / f"prior-{seed}")
            prior = load_checkpoint(prior_path)
            distances = {}
            for lam in (1.0, 1e-4):
                config = apply_overrides(seeded, kl_attenuation=lam)
                posterior = load_checkpoint(cmd_train(config, tmp_path / f"lambda-{lam}-{seed}", prior_path))
                distances[lam] = posterior.model.phi.squared_distance(prior.model.phi)
            assert distances[1e-4] > distances[1.0]
