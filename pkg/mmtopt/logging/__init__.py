"""Logging."""
import logging
from typing import Optional

import attr

from .iteration_log_handler import ITERATION_FIELDS, IterationLogHandler

__all__ = ["ITERATION_FIELDS", "IterationLogHandler", "LogConfiguration"]


@attr.s(auto_attribs=True)
class LogConfiguration:
    """Configuration for setting up logging."""

    log_level: str = "INFO"
    iteration_log: Optional[str] = None
    capacity: int = 50

    def setup_logger(self) -> Optional[IterationLogHandler]:
        """Set up the logger."""
        level = getattr(logging, self.log_level.upper(), logging.INFO)
        logging.basicConfig(
            level=level,
            format="%(levelname)s:%(asctime)s:%(name)s:%(message)s",
        )
        logger = logging.getLogger()
        # basicConfig is a no-op once the root logger has handlers
        logger.setLevel(level)

        if self.iteration_log:
            iteration_handler = IterationLogHandler(self.iteration_log, self.capacity)
            iteration_handler.setLevel(logging.INFO)
            logger.addHandler(iteration_handler)
            return iteration_handler
        return None
