import logging
import sys
import json
from datetime import datetime
from typing import Any

from .settings import log_level

# Attributes every LogRecord carries; anything else arrived through ``extra=``.
_RESERVED_ATTRS = frozenset(
    vars(logging.LogRecord("", logging.INFO, "", 0, "", (), None)).keys()
) | {"message", "asctime"}


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


class JsonFormatter(logging.Formatter):
    """
    Formatter that outputs JSON strings for log records.
    """
    def format(self, record: logging.LogRecord) -> str:
        log_record = {
            "timestamp": datetime.fromtimestamp(record.created).isoformat(),
            "level": record.levelname,
            "message": record.getMessage(),
            "module": record.module,
            "funcName": record.funcName,
            "line": record.lineno,
        }
        if record.exc_info:
            log_record["exception"] = self.formatException(record.exc_info)

        # Add extra fields if they exist
        for key, value in vars(record).items():
            if key not in _RESERVED_ATTRS and not key.startswith("_"):
                log_record[key] = _jsonable(value)

        return json.dumps(log_record)


def setup_logger(name: str = "spheresync") -> logging.Logger:
    logger = logging.getLogger(name)
    logger.setLevel(log_level())

    # Check if handler already exists to avoid duplicates
    if not logger.handlers:
        # stdout carries reports and the RESULT line
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(JsonFormatter())
        logger.addHandler(handler)
        logger.propagate = False

    return logger

# Global logger instance
logger = setup_logger()
