"""TOML experiment configs, CLI overrides and provenance hashes."""
from __future__ import annotations

import hashlib
import json
import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError as PydanticValidationError

from framework.errors import FormatError, ValidationError
from models.config_models import ExperimentConfig

OUT_DIR = os.getenv("PACVAE_OUT_DIR", "runs")
RUNS_DIR = os.getenv("PACVAE_RUNS_DIR", OUT_DIR)

RESOURCES_DIR = Path(__file__).resolve().parent.parent / "resources"


def load_config(path: Optional[str | Path] = None) -> ExperimentConfig:
    """Parse a TOML profile; no path gives the built-in defaults, which carry no dataset paths."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise FormatError(f"{path}: {e}") from e
    try:
        return ExperimentConfig(**raw)
    except PydanticValidationError as e:
        raise ValidationError(f"{path}: {e}") from e


def profile_path(name: str) -> Path:
    return RESOURCES_DIR / f"{name}_profile.toml"


def apply_overrides(
    config: ExperimentConfig,
    beta: Optional[float] = None,
    sigma: Optional[float] = None,
    kl_attenuation: Optional[float] = None,
    objective: Optional[str] = None,
    seed: Optional[int] = None,
    prior_scheme: Optional[str] = None,
) -> ExperimentConfig:
    """Return a re-validated copy with the given command-line overrides applied.

    `beta` sets both the prior phase and the beta-VAE baseline, so a beta grid
    over PAC-Bayes objectives learns one prior per beta.
    """
    training: Dict[str, Any] = {}
    if beta is not None:
        training["beta"] = beta
    if sigma is not None:
        training["sigma_phi"] = sigma
        training["sigma_theta"] = sigma
    if kl_attenuation is not None:
        training["kl_attenuation"] = kl_attenuation
    if objective is not None:
        training["objective"] = objective

    dump = config.model_dump()
    dump["training"].update(training)
    if seed is not None:
        dump["seeds"]["master"] = seed
    if beta is not None:
        dump["prior"]["beta"] = beta
    if prior_scheme is not None:
        dump["prior"]["scheme"] = prior_scheme
    try:
        return ExperimentConfig(**dump)
    except PydanticValidationError as e:
        raise ValidationError(str(e)) from e


def _canonical_hash(payload: Any) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical JSON dump; the sweep grid is not part of a run's identity."""
    return _canonical_hash(config.model_dump(mode="json", exclude={"sweep", "name"}))


def prior_hash(config: ExperimentConfig) -> str:
    """Hash of the fields that determine the prior checkpoint (for sweep caching)."""
    dump = config.model_dump(mode="json")
    payload = {
        "data": dump["data"],
        "architecture": dump["architecture"],
        "prior": dump["prior"],
        "p_min": dump["training"]["p_min"],
        "batch_size": dump["training"]["batch_size"],
        "learning_rate": dump["training"]["learning_rate"],
        "mc_samples": dump["training"]["mc_samples"],
        "seed": dump["seeds"]["master"],
    }
    if dump["prior"]["scheme"] == "zero":
        payload = {"architecture": dump["architecture"], "prior": {"scheme": "zero"}}
    return _canonical_hash(payload)
