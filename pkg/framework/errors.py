from __future__ import annotations

from typing import Any, Optional


class PacVaeError(Exception):
    """Base class for every error raised by the training/certification stack."""


class ShapeError(PacVaeError):
    def __init__(self, message: str, layer_index: Optional[int] = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class ContractError(PacVaeError):
    """A precondition of an operation was violated by the caller."""


class NumericError(PacVaeError):
    def __init__(self, message: str, layer: Optional[str] = None):
        if layer is not None:
            message = f"{layer}: {message}"
        super().__init__(message)
        self.layer = layer


class FormatError(PacVaeError):
    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(PacVaeError):
    """Input data failed a strict-mode check (e.g. non-binary pixels)."""


class CheckpointMismatchError(PacVaeError):
    """A checkpoint does not match the architecture it is loaded against."""


class DivergenceError(PacVaeError):
    """Training produced a non-finite loss; `last_good` holds the state before the failing epoch."""

    def __init__(self, message: str, epoch: int, last_good: Any = None):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch
        self.last_good = last_good
