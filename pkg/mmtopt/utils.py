"""Utility methods."""

import logging
import re
from pathlib import Path
from typing import Union

from . import errors

logger = logging.getLogger(__name__)


def normalize_name(name: str) -> str:
    """
    Normalize a label for use in file names.

    Characters other than letters, digits, dots and dashes become underscores.
    """
    return re.sub(r"[^a-zA-Z0-9_.\-]", "_", name)


def output_directory(path: Union[str, Path], create: bool = True) -> Path:
    """Return ``path`` as a directory, creating it when requested."""
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise errors.ConfigurationException("output", f"{path} exists and is not a directory.")
    if create:
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise errors.ConfigurationException("output", f"Cannot create {path}: {e}")
        logger.debug(f"Writing results to {path}")
    return path
