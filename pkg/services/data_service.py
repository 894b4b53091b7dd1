"""IDX image ingestion, binarisation, prior/bound splits and minibatching."""
from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Literal, Optional, Tuple

import numpy as np

from framework.errors import ContractError, FormatError, ValidationError
from models.config_models import SplitSpec

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_UBYTE = 0x08
GZIP_SIGNATURE = b"\x1f\x8b"

SplitTag = Literal["train", "test", "prior", "bound"]


@dataclass(eq=False)
class ImageDataset:
    examples: np.ndarray
    source_name: str
    split_tag: SplitTag

    def __post_init__(self):
        self.examples = np.asarray(self.examples, dtype=np.float64)
        if self.examples.ndim != 2 or self.examples.shape[0] == 0:
            raise ContractError(f"dataset {self.source_name!r} must be a non-empty (count, D) matrix")
        if not np.all((self.examples == 0.0) | (self.examples == 1.0)):
            raise ValidationError(f"dataset {self.source_name!r} has non-binary entries")

    @property
    def count(self) -> int:
        return self.examples.shape[0]

    @property
    def input_dim(self) -> int:
        return self.examples.shape[1]

    def __len__(self) -> int:
        return self.count


# ======================================================
# IDX files
# ======================================================
def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == GZIP_SIGNATURE:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise FormatError(f"{path}: corrupt gzip stream: {e}") from e
    return raw


def load_idx(path: str | Path, expect_magic: int = IDX_IMAGES_MAGIC) -> np.ndarray:
    """Parse a big-endian IDX file (optionally gzipped) into a uint8 array."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    data = _read_bytes(path)
    if len(data) < 4:
        raise FormatError(f"{path}: file too short for an IDX magic number", offset=len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expect_magic:
        raise FormatError(f"{path}: expected magic 0x{expect_magic:08x}, found 0x{magic:08x}", offset=0)
    if (magic >> 8) & 0xFF != IDX_UBYTE:
        raise FormatError(f"{path}: only unsigned-byte payloads are supported", offset=2)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise FormatError(f"{path}: truncated dimension header", offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(data) - header_end
    if payload != expected:
        raise FormatError(
            f"{path}: payload has {payload} bytes, header {tuple(dims)} needs {expected}",
            offset=header_end + min(payload, expected),
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header_end).reshape(dims).copy()


def write_idx(array: np.ndarray, path: str | Path, compress: bool = False) -> Path:
    """Serialise a uint8 array as IDX (inverse of `load_idx`)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ContractError(f"IDX writer needs uint8 data, got {array.dtype}")
    magic = (IDX_UBYTE << 8) | array.ndim
    blob = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(blob, mtime=0) if compress else blob)
    return path


def binarise(
    raw: np.ndarray,
    threshold: float = 127.5,
    source_name: str = "images",
    split_tag: SplitTag = "train",
) -> ImageDataset:
    """Static thresholding: pixel -> 1 iff pixel > threshold; images are flattened to rows."""
    raw = np.asarray(raw)
    flat = raw.reshape(raw.shape[0], -1)
    return ImageDataset((flat > threshold).astype(np.float64), source_name, split_tag)


def load_image_set(
    path: str | Path,
    limit: Optional[int] = None,
    threshold: float = 127.5,
    split_tag: SplitTag = "train",
) -> ImageDataset:
    raw = load_idx(path, IDX_IMAGES_MAGIC)
    if limit is not None:
        raw = raw[:limit]
    dataset = binarise(raw, threshold, source_name=Path(path).name, split_tag=split_tag)
    logger.info("loaded %d images (D=%d) from %s", dataset.count, dataset.input_dim, path)
    return dataset


# ======================================================
# Splits and minibatches
# ======================================================
def split(dataset: ImageDataset, spec: SplitSpec) -> Tuple[Optional[ImageDataset], ImageDataset]:
    """Seeded shuffle, then prior = first floor(count * prior_fraction) rows, bound = the rest.

    The prior set is None when the fraction rounds down to zero rows.
    """
    order = np.random.Generator(np.random.Philox(spec.shuffle_seed)).permutation(dataset.count)
    n_prior = int(np.floor(dataset.count * spec.prior_fraction))
    if n_prior >= dataset.count:
        raise ContractError(f"prior fraction {spec.prior_fraction} leaves an empty bound set")
    prior_rows, bound_rows = order[:n_prior], order[n_prior:]
    prior_set = (
        ImageDataset(dataset.examples[prior_rows], dataset.source_name, "prior") if n_prior > 0 else None
    )
    bound_set = ImageDataset(dataset.examples[bound_rows], dataset.source_name, "bound")
    return prior_set, bound_set


def minibatches(dataset: ImageDataset, batch_size: int, epoch_seed: int) -> Iterator[np.ndarray]:
    """Fresh shuffle per epoch; the last partial batch is kept."""
    if batch_size < 1:
        raise ContractError("batch size must be at least 1")
    order = np.random.Generator(np.random.Philox(epoch_seed)).permutation(dataset.count)
    for start in range(0, dataset.count, batch_size):
        yield dataset.examples[order[start : start + batch_size]]
