"""Console + file logging with the four user-selectable levels."""

from __future__ import annotations

import logging
import os
import sys
from enum import Enum


class LogLevel(str, Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARN = "WARN"
    ERROR = "ERROR"

    @property
    def numeric(self) -> int:
        return {"DEBUG": logging.DEBUG, "INFO": logging.INFO, "WARN": logging.WARNING, "ERROR": logging.ERROR}[
            self.value
        ]

    @classmethod
    def parse(cls, value: str | LogLevel) -> LogLevel:
        if isinstance(value, LogLevel):
            return value
        value = value.upper()
        if value == "WARNING":
            value = "WARN"
        return cls(value)


FORMAT = "%(asctime)s level=%(levelname)s logger=%(name)s %(message)s"


class LogServer:
    """Owns the ``feddart`` logger's console and file handlers."""

    def __init__(
        self,
        level: str | LogLevel = LogLevel.INFO,
        log_file: str | os.PathLike[str] | None = None,
        *,
        name: str = "feddart",
        stream=None,
    ) -> None:
        self.level = LogLevel.parse(level)
        self.logger = logging.getLogger(name)
        self.logger.setLevel(self.level.numeric)
        formatter = logging.Formatter(FORMAT)
        self.console_handler = logging.StreamHandler(stream or sys.stderr)
        self.console_handler.setFormatter(formatter)
        self.file_handler: logging.FileHandler | None = None
        for handler in list(self.logger.handlers):
            if getattr(handler, "_feddart_owned", False):
                self.logger.removeHandler(handler)
                handler.close()
        self._attach(self.console_handler)
        if log_file is not None:
            os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
            self.file_handler = logging.FileHandler(log_file, encoding="utf-8")
            self.file_handler.setFormatter(formatter)
            self._attach(self.file_handler)

    def _attach(self, handler: logging.Handler) -> None:
        handler._feddart_owned = True  # type: ignore[attr-defined]
        self.logger.addHandler(handler)

    def set_level(self, level: str | LogLevel) -> None:
        self.level = LogLevel.parse(level)
        self.logger.setLevel(self.level.numeric)

    def close(self) -> None:
        for handler in (self.console_handler, self.file_handler):
            if handler is not None:
                self.logger.removeHandler(handler)
                handler.close()
