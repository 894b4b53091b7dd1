from pathlib import Path

import numpy as np
import pytest

from framework.rng import RngStream
from models.config_models import (
    ArchitectureConfig,
    CertificateSection,
    DataSection,
    ExperimentConfig,
    LossConfig,
    PriorSection,
    TrainingSection,
)
from services.data_service import ImageDataset, write_idx
from services.vae_service import VaeModel

SIDE = 4
TINY_D = SIDE * SIDE


def random_binary(rng: np.random.Generator, count: int, dim: int = TINY_D) -> np.ndarray:
    return (rng.random((count, dim)) < 0.5).astype(np.float64)


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)))


@pytest.fixture
def tiny_arch() -> ArchitectureConfig:
    return ArchitectureConfig(input_dim=TINY_D, latent_dim=2, hidden_widths=[8])


@pytest.fixture
def tiny_model(tiny_arch) -> VaeModel:
    return VaeModel.build(tiny_arch, "clamped_normal", RngStream(7).generator("init", 0))


@pytest.fixture
def loss_config() -> LossConfig:
    return LossConfig(p_min=5e-3, mc_samples=1)


@pytest.fixture
def binary_batch() -> np.ndarray:
    return random_binary(np.random.default_rng(3), 6)


@pytest.fixture
def tiny_dataset() -> ImageDataset:
    return ImageDataset(random_binary(np.random.default_rng(11), 40), "fixture", "bound")


def striped_images(count: int, seed: int = 0) -> np.ndarray:
    """uint8 4x4 images made of a few repeated patterns plus pixel noise."""
    rng = np.random.default_rng(seed)
    patterns = np.array(
        [
            np.kron([[1, 0], [0, 1]], np.ones((2, 2))),
            np.kron([[0, 1], [1, 0]], np.ones((2, 2))),
            np.tile([1, 0, 1, 0], (SIDE, 1)),
        ]
    )
    picks = patterns[rng.integers(0, len(patterns), count)]
    flips = rng.random(picks.shape) < 0.05
    return (np.where(flips, 1 - picks, picks) * 255).astype(np.uint8)


@pytest.fixture
def idx_files(tmp_path: Path):
    train = write_idx(striped_images(60, seed=1), tmp_path / "train-images-idx3-ubyte.gz", compress=True)
    test = write_idx(striped_images(20, seed=2), tmp_path / "t10k-images-idx3-ubyte")
    return train, test


@pytest.fixture
def tiny_config(idx_files, tiny_arch) -> ExperimentConfig:
    train, test = idx_files
    return ExperimentConfig(
        name="tiny",
        data=DataSection(train_images=str(train), test_images=str(test), train_limit=None, prior_fraction=0.5),
        architecture=tiny_arch,
        prior=PriorSection(scheme="beta_vae", beta=0.1, dropout=0.2, epochs=3),
        training=TrainingSection(objective="pb_mcallester", epochs=2, batch_size=10, learning_rate=1e-2),
        certificate=CertificateSection(mc_samples=2, batch_size=16),
    )


@pytest.fixture
def striped_dataset() -> ImageDataset:
    raw = striped_images(60, seed=4).reshape(60, -1)
    return ImageDataset((raw > 127.5).astype(np.float64), "striped", "bound")
