"""Iteration Logger."""

import csv
from logging.handlers import BufferingHandler
from pathlib import Path
from typing import List, Union

ITERATION_FIELDS = ["iter", "p", "compliance", "mass", "Lambda", "max_dz", "kkt_residual"]


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


class IterationLogHandler(BufferingHandler):
    """Custom logging handler for writing optimizer iterations to a CSV file."""

    def __init__(self, path: Union[str, Path], capacity=50):
        """Instantiate an `IterationLogHandler`."""
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(ITERATION_FIELDS)

        super().__init__(capacity)

    def emit(self, record):
        """Buffer only records that carry iteration data."""
        if getattr(record, "iteration", None) is None:
            return
        super().emit(record)

    def _buffer_to_rows(self, buffer) -> List[List[str]]:
        """Convert the records in the buffer to CSV rows."""
        return [
            [_format(record.iteration.get(field)) for field in ITERATION_FIELDS]
            for record in buffer
        ]

    def flush(self):
        """
        Override default flushing behaviour.

        Append the buffer to the CSV file.
        """
        self.acquire()
        try:
            if self.buffer:
                with open(self.path, "a", newline="") as f:
                    csv.writer(f).writerows(self._buffer_to_rows(self.buffer))
            self.buffer = []
        except Exception as e:
            print(f"Exception while flushing iteration log: {e}")
        finally:
            self.release()
