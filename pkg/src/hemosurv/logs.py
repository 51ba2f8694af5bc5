"""Line-delimited JSON logging for service events."""

from __future__ import annotations

import json
import logging
import sys
import time
from typing import IO


class JsonLineFormatter(logging.Formatter):
    """One JSON object per line: ``ts``, ``level``, ``event`` plus any ``fields`` extra."""

    def format(self, record: logging.LogRecord) -> str:
        out = {
            "ts": round(record.created, 6),
            "level": record.levelname.lower(),
            "logger": record.name,
            "event": record.getMessage(),
        }
        fields = getattr(record, "fields", None)
        if fields:
            out.update(fields)
        if record.exc_info:
            out["exc"] = self.formatException(record.exc_info)
        return json.dumps(out, sort_keys=True, default=str)


def log_event(logger: logging.Logger, event: str, level: int = logging.INFO, **fields) -> None:
    logger.log(level, event, extra={"fields": fields})


def configure(stream: IO[str] | None = None, path: str | None = None, level: int = logging.INFO) -> logging.Handler:
    """Attach a JSON-lines handler to the package logger."""
    handler: logging.Handler
    if path:
        handler = logging.FileHandler(path, encoding="utf-8")
    else:
        handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("hemosurv")
    root.addHandler(handler)
    root.setLevel(level)
    return handler


def wall_time() -> float:
    return time.time()
