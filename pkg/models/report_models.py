from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

# ======================================================
# Training log (one JSON line per epoch)
# ======================================================
class EpochRecord(BaseModel):
    epoch: int
    objective: float
    recon_raw: float
    recon_bounded: float
    penalty_phi: Optional[float] = None
    penalty_theta: Optional[float] = None
    s_phi: Optional[float] = None
    s_theta: Optional[float] = None
    latent_kl: Optional[float] = None


# ======================================================
# Certificates
# ======================================================
CertificateKind = Literal["derandomised", "noise_free", "mcallester_randomised", "quadratic_randomised"]
CertificateMode = Literal["perturbed", "small_noise_approx"]


class Certificate(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: CertificateKind
    mode: CertificateMode = "perturbed"
    empirical_loss: float = Field(..., ge=0.0, le=1.0)
    empirical_std_error: float = 0.0
    raw_budget: float
    kl_budget: float = Field(..., ge=0.0)
    risk_bound: float = Field(..., ge=0.0, le=1.0)
    risk_bound_rescaled_nats_per_image: float
    n: int = Field(..., ge=1)
    delta: float
    sigma_phi: float
    sigma_theta: float
    noise_seed: int
    checkpoint_hash: Optional[str] = None

    @model_validator(mode="after")
    def _bound_dominates_empirical(self) -> "Certificate":
        if self.risk_bound < self.empirical_loss:
            raise ValueError("risk bound below empirical loss")
        return self


class RandomisedBoundReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    status: str = "diagnostic (no MC correction)"
    m_samples: int
    empirical_loss_mc: float
    weight_kl: float
    n: int
    delta: float
    s_phi: float
    s_theta: float
    s_clamped: bool = False
    mcallester_bound: float
    quadratic_bound: float
    kl_inverse_bound: float


# ======================================================
# Checkpoints
# ======================================================
class NetworkEntry(BaseModel):
    name: str
    count: int
    shapes: List[List[List[int]]]


class CheckpointHeader(BaseModel):
    format: str = "pacvae-params/1"
    architecture: Dict[str, Any]
    networks: List[NetworkEntry]
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    extra: Dict[str, Any] = Field(default_factory=dict)


# ======================================================
# Run reports
# ======================================================
class ReconstructionStats(BaseModel):
    count: int
    raw_nats_per_image: float
    bounded: float
    bounded_std_error: float


class RunReport(BaseModel):
    config_hash: str
    objective: str
    train: ReconstructionStats
    test: Optional[ReconstructionStats] = None
    generalisation_gap: Optional[float] = None
    n_bound: int
    certificates: List[Certificate] = Field(default_factory=list)
    randomised: Optional[RandomisedBoundReport] = None
    distance_phi: float
    distance_theta: float
    wall_clock_seconds: float = 0.0

    @model_validator(mode="after")
    def _gap_matches_losses(self) -> "RunReport":
        if self.test is not None:
            gap = self.test.raw_nats_per_image - self.train.raw_nats_per_image
            if self.generalisation_gap is None:
                self.generalisation_gap = gap
            elif self.generalisation_gap != gap:
                raise ValueError("generalisation gap must equal test - train")
        return self


class SweepRow(BaseModel):
    row: int
    config_hash: str
    status: Literal["ok", "failed"]
    objective: str
    prior_scheme: str
    beta: float
    sigma: float
    kl_attenuation: float
    seed: int
    sigma_grid_size: int
    train_raw: Optional[float] = None
    test_raw: Optional[float] = None
    gap: Optional[float] = None
    derandomised_bound: Optional[float] = None
    small_noise_bound: Optional[float] = None
    noise_free_bound: Optional[float] = None
    distance_phi: Optional[float] = None
    error: Optional[str] = None
