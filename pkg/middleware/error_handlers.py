"""Map domain errors onto JSON HTTP responses."""
from __future__ import annotations

import logging

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from framework.errors import (
    CheckpointMismatchError,
    ContractError,
    FormatError,
    NumericError,
    PacVaeError,
    ShapeError,
    ValidationError,
)

logger = logging.getLogger(__name__)

STATUS_BY_ERROR = [
    (FormatError, 400),
    (CheckpointMismatchError, 409),
    (ContractError, 422),
    (ShapeError, 422),
    (ValidationError, 422),
    (NumericError, 500),
]


def status_for(error: PacVaeError) -> int:
    for cls, status in STATUS_BY_ERROR:
        if isinstance(error, cls):
            return status
    return 500


async def pacvae_error_handler(request: Request, exc: PacVaeError) -> JSONResponse:
    status = status_for(exc)
    if status >= 500:
        logger.error("%s %s failed: %s", request.method, request.url.path, exc)
    return JSONResponse(status_code=status, content={"detail": str(exc), "error": type(exc).__name__})


async def missing_file_handler(request: Request, exc: FileNotFoundError) -> JSONResponse:
    return JSONResponse(status_code=404, content={"detail": f"not found: {exc}", "error": "FileNotFoundError"})


def register_error_handlers(app: FastAPI) -> None:
    app.add_exception_handler(PacVaeError, pacvae_error_handler)
    app.add_exception_handler(FileNotFoundError, missing_file_handler)
