from __future__ import annotations

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

# ======================================================
# Network architecture
# ======================================================
class MlpConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    input_dim: int = Field(..., gt=0)
    hidden_widths: List[int] = Field(default_factory=list)
    output_dim: int = Field(..., gt=0)
    hidden_activation: Literal["relu"] = "relu"
    output_activation: Literal["identity", "sigmoid"] = "identity"

    @field_validator("hidden_widths")
    @classmethod
    def _positive_widths(cls, v: List[int]) -> List[int]:
        if any(w <= 0 for w in v):
            raise ValueError("hidden widths must be positive")
        return v

    @property
    def layer_dims(self) -> List[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_widths, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


class ArchitectureConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    input_dim: int = Field(784, gt=0)
    latent_dim: int = Field(8, gt=0)
    hidden_widths: List[int] = Field(default_factory=lambda: [128, 128])

    def encoder_config(self) -> MlpConfig:
        return MlpConfig(
            input_dim=self.input_dim,
            hidden_widths=list(self.hidden_widths),
            output_dim=2 * self.latent_dim,
            output_activation="identity",
        )

    def decoder_config(self) -> MlpConfig:
        return MlpConfig(
            input_dim=self.latent_dim,
            hidden_widths=list(reversed(self.hidden_widths)),
            output_dim=self.input_dim,
            output_activation="sigmoid",
        )


# ======================================================
# Losses and bounds
# ======================================================
class LossConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    p_min: float = Field(5e-3, gt=0.0, lt=0.5)
    mc_samples: int = Field(1, ge=1)


class PacBayesConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    delta: float = Field(0.05, gt=0.0, lt=1.0)
    n_bound: int = Field(..., ge=1)
    bound_kind: Literal["mcallester", "quadratic"] = "mcallester"
    kl_attenuation: float = Field(1.0, ge=0.0, le=1.0)
    weight_noise_samples: int = Field(1, ge=1)


class SplitSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    prior_fraction: float = Field(0.5, ge=0.0, lt=1.0)
    shuffle_seed: int = Field(0, ge=0)


# ======================================================
# Experiment (TOML sections)
# ======================================================
class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_images: Optional[str] = None
    test_images: Optional[str] = None
    train_limit: Optional[int] = Field(10000, ge=1)
    test_limit: Optional[int] = Field(None, ge=1)
    threshold: float = 127.5
    prior_fraction: float = Field(0.5, ge=0.0, lt=1.0)
    split_seed: int = Field(0, ge=0)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(prior_fraction=self.prior_fraction, shuffle_seed=self.split_seed)


class PriorSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scheme: Literal["beta_vae", "zero", "random"] = "beta_vae"
    beta: float = Field(0.1, ge=0.0)
    dropout: float = Field(0.2, ge=0.0, lt=1.0)
    epochs: int = Field(50, ge=0)


class TrainingSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    objective: Literal["beta_vae", "pb_mcallester", "pb_quadratic"] = "pb_mcallester"
    beta: float = Field(1.0, ge=0.0)
    sigma_phi: float = Field(0.01, gt=0.0)
    sigma_theta: float = Field(0.01, gt=0.0)
    delta: float = Field(0.05, gt=0.0, lt=1.0)
    kl_attenuation: float = Field(1.0, ge=0.0, le=1.0)
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(100, ge=1)
    learning_rate: float = Field(1e-3, ge=0.0)
    p_min: float = Field(5e-3, gt=0.0, lt=0.5)
    mc_samples: int = Field(1, ge=1)
    weight_noise_samples: int = Field(1, ge=1)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    posterior_data: Literal["full", "bound"] = "full"
    init: Literal["prior", "clamped_normal"] = "prior"

    def loss_config(self) -> LossConfig:
        return LossConfig(p_min=self.p_min, mc_samples=self.mc_samples)


class CertificateSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    delta: float = Field(0.05, gt=0.0, lt=1.0)
    mc_samples: int = Field(4, ge=1)
    randomised_samples: int = Field(0, ge=0)
    batch_size: int = Field(500, ge=1)


class SeedSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    master: int = Field(0, ge=0)
    certificate_noise: int = Field(1, ge=0)


class SweepSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta: List[float] = Field(default_factory=list)
    sigma: List[float] = Field(default_factory=list)
    kl_attenuation: List[float] = Field(default_factory=list)
    objective: List[Literal["beta_vae", "pb_mcallester", "pb_quadratic"]] = Field(default_factory=list)
    prior_scheme: List[Literal["beta_vae", "zero", "random"]] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=list)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "desk"
    data: DataSection = Field(default_factory=DataSection)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    prior: PriorSection = Field(default_factory=PriorSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    certificate: CertificateSection = Field(default_factory=CertificateSection)
    seeds: SeedSection = Field(default_factory=SeedSection)
    sweep: SweepSection = Field(default_factory=SweepSection)