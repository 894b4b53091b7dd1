import logging
import os
from pathlib import Path
from typing import Iterator, List, Optional

import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from middleware.error_handlers import register_error_handlers
from models.report_models import RunReport
from services.certificate_service import kl_inverse, noise_free_budget_from_distances
from utils.config_loader import RUNS_DIR
from utils.log_config import configure_logging
from utils.records import read_json

logger = logging.getLogger(__name__)

# Configuration
ALLOWED_ORIGINS = [o for o in os.getenv("PACVAE_ALLOWED_ORIGINS", "http://localhost:3000").split(",") if o]
PORT = int(os.getenv("PORT", "8000"))

app = FastAPI(title="PAC-Bayes VAE Certificate Service")

app.add_middleware(
    CORSMiddleware,
    allow_origins=ALLOWED_ORIGINS,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)
register_error_handlers(app)


# ============================================================
# REQUEST / RESPONSE MODELS
# ============================================================
class KlInverseRequest(BaseModel):
    p: float = Field(..., ge=0.0, le=1.0)
    c: float = Field(..., ge=0.0)


class KlInverseResponse(BaseModel):
    p: float
    c: float
    q: float


class NoiseFreeRequest(BaseModel):
    empirical_loss: float = Field(..., ge=0.0, le=1.0)
    sq_dist_phi: float = Field(..., ge=0.0)
    sq_dist_theta: float = Field(..., ge=0.0)
    sigma_phi: float = Field(..., gt=0.0)
    sigma_theta: float = Field(..., gt=0.0)
    n: int = Field(..., ge=1)
    delta: float = Field(0.05, gt=0.0, lt=1.0)


class NoiseFreeResponse(BaseModel):
    kl_budget: float
    risk_bound: float


class RunSummary(BaseModel):
    config_hash: str
    objective: str
    n_bound: int
    risk_bound: Optional[float] = None


# ============================================================
# HELPERS
# ============================================================
def runs_dir() -> Path:
    return Path(os.getenv("PACVAE_RUNS_DIR", RUNS_DIR))


def find_reports() -> List[Path]:
    root = runs_dir()
    if not root.exists():
        return []
    return sorted(root.rglob("report.json"))


def load_reports() -> Iterator[RunReport]:
    for path in find_reports():
        try:
            yield read_json(path, RunReport)
        except Exception as e:
            logger.warning("skipping unreadable report %s: %s", path, e)


# ============================================================
# ENDPOINTS
# ============================================================
@app.get("/")
def root():
    return {"message": "Certificate Service Running"}


@app.post("/bounds/kl-inverse", response_model=KlInverseResponse)
def invert_kl(payload: KlInverseRequest):
    return KlInverseResponse(p=payload.p, c=payload.c, q=kl_inverse(payload.p, payload.c))


@app.post("/bounds/noise-free", response_model=NoiseFreeResponse)
def noise_free_bound(payload: NoiseFreeRequest):
    """Noise-free certificate from summary statistics of a trained model."""
    budget = noise_free_budget_from_distances(
        payload.sq_dist_phi,
        payload.sq_dist_theta,
        payload.sigma_phi,
        payload.sigma_theta,
        payload.n,
        payload.delta,
    )
    return NoiseFreeResponse(kl_budget=budget, risk_bound=kl_inverse(payload.empirical_loss, budget))


@app.get("/runs", response_model=List[RunSummary])
def list_runs():
    summaries = []
    for report in load_reports():
        perturbed = next((c for c in report.certificates if c.kind == "derandomised" and c.mode == "perturbed"), None)
        summaries.append(
            RunSummary(
                config_hash=report.config_hash,
                objective=report.objective,
                n_bound=report.n_bound,
                risk_bound=perturbed.risk_bound if perturbed else None,
            )
        )
    return summaries


@app.get("/runs/{config_hash}", response_model=RunReport)
def get_run(config_hash: str):
    for report in load_reports():
        if report.config_hash == config_hash:
            return report
    raise HTTPException(404, f"no run with config hash {config_hash}")


if __name__ == "__main__":
    configure_logging()
    uvicorn.run(app, host="0.0.0.0", port=PORT)
