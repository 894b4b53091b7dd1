from __future__ import annotations

import logging
import os
from typing import Optional

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOG_LEVEL = os.getenv("PACVAE_LOG_LEVEL", "INFO")


def configure_logging(level: Optional[str] = None) -> None:
    """Single stream handler on the root logger; safe to call more than once."""
    name = (level or LOG_LEVEL).upper()
    if not isinstance(logging.getLevelName(name), int):
        raise ValueError(f"unknown log level {name!r}")
    logging.basicConfig(level=name, format=LOG_FORMAT, force=True)
