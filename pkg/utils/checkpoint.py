"""Binary checkpoints: 8-byte LE header length, UTF-8 JSON header, LE float64 payload."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from framework.errors import CheckpointMismatchError, FormatError
from framework.params import ParamVector
from models.config_models import ArchitectureConfig
from models.report_models import CheckpointHeader, NetworkEntry
from services.vae_service import VaeModel

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pacvae-params/1"
HEADER_LENGTH_BYTES = 8
PAYLOAD_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    model: VaeModel
    header: CheckpointHeader
    extra: Dict[str, Any] = field(default_factory=dict)
    file_hash: Optional[str] = None


def _network_entry(name: str, params: ParamVector) -> NetworkEntry:
    return NetworkEntry(
        name=name,
        count=params.total_count,
        shapes=[[list(w_shape), list(b_shape)] for w_shape, b_shape in params.shapes],
    )


def save_checkpoint(
    model: VaeModel,
    path: str | Path,
    seed: Optional[int] = None,
    config_hash: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> str:
    """Write `model` to `path`; returns the sha256 of the written file."""
    header = CheckpointHeader(
        format=CHECKPOINT_FORMAT,
        architecture=model.architecture.model_dump(),
        networks=[_network_entry("phi", model.phi), _network_entry("theta", model.theta)],
        seed=seed,
        config_hash=config_hash,
        extra=extra or {},
    )
    header_bytes = json.dumps(header.model_dump(), sort_keys=True).encode("utf-8")
    payload = np.concatenate([model.phi.flat(), model.theta.flat()]).astype(PAYLOAD_DTYPE)
    blob = struct.pack("<Q", len(header_bytes)) + header_bytes + payload.tobytes()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    logger.info("checkpoint written to %s (%d parameters, sha256 %s)", path, payload.size, digest[:12])
    return digest


def _read_header(blob: bytes, path: Path) -> tuple[CheckpointHeader, int]:
    if len(blob) < HEADER_LENGTH_BYTES:
        raise FormatError(f"{path}: too short for a checkpoint header length", offset=len(blob))
    (length,) = struct.unpack("<Q", blob[:HEADER_LENGTH_BYTES])
    end = HEADER_LENGTH_BYTES + length
    if end > len(blob):
        raise FormatError(f"{path}: header length {length} runs past end of file", offset=HEADER_LENGTH_BYTES)
    try:
        header = CheckpointHeader(**json.loads(blob[HEADER_LENGTH_BYTES:end].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, PydanticValidationError) as e:
        raise FormatError(f"{path}: unreadable checkpoint header: {e}", offset=HEADER_LENGTH_BYTES) from e
    if header.format != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unsupported checkpoint format {header.format!r}", offset=HEADER_LENGTH_BYTES)
    return header, end


def load_checkpoint(path: str | Path, architecture: Optional[ArchitectureConfig] = None) -> Checkpoint:
    """Read a checkpoint; when `architecture` is given the stored one must match it exactly."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    blob = path.read_bytes()
    header, offset = _read_header(blob, path)

    stored = ArchitectureConfig(**header.architecture)
    if architecture is not None and stored != architecture:
        raise CheckpointMismatchError(
            f"{path}: checkpoint architecture {stored.model_dump()} does not match {architecture.model_dump()}"
        )

    template = VaeModel.build(stored, scheme="zero")
    templates = {"phi": template.phi, "theta": template.theta}
    networks: Dict[str, ParamVector] = {}
    for entry in header.networks:
        if entry.name not in templates:
            raise FormatError(f"{path}: unknown network {entry.name!r}", offset=HEADER_LENGTH_BYTES)
        expected = templates[entry.name]
        if entry.count != expected.total_count:
            raise CheckpointMismatchError(
                f"{path}: network {entry.name} stores {entry.count} parameters, architecture needs {expected.total_count}"
            )
        n_bytes = entry.count * PAYLOAD_DTYPE.itemsize
        if offset + n_bytes > len(blob):
            raise FormatError(f"{path}: payload for {entry.name} truncated", offset=len(blob))
        values = np.frombuffer(blob, dtype=PAYLOAD_DTYPE, count=entry.count, offset=offset).astype(np.float64)
        networks[entry.name] = ParamVector.from_flat(expected, values)
        offset += n_bytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after payload", offset=offset)
    if set(networks) != {"phi", "theta"}:
        raise FormatError(f"{path}: checkpoint must hold phi and theta, found {sorted(networks)}")

    model = VaeModel(stored, networks["phi"], networks["theta"])
    return Checkpoint(model=model, header=header, extra=dict(header.extra), file_hash=hashlib.sha256(blob).hexdigest())
