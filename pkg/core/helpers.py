# -*- coding: utf-8 -*-
"""
core.helpers - Pure Python utility functions (no numeric dependencies).

Log-line formatting, output directory resolution and safe conversions.
"""
from __future__ import annotations

import logging
import os
import tempfile
import time
from pathlib import Path
from typing import Callable

from core.constants import ENV_OUTPUT_ROOT, LOGGER_NAME

LogFn = Callable[[str, str, str], None]

_LEVELS = {
    'DEBUG': logging.DEBUG,
    'INFO': logging.INFO,
    'WARN': logging.WARNING,
    'ERR': logging.ERROR,
}


def format_log_line(level: str, ctx: str, msg: str) -> str:
    """Render one log line as ``[HH:MM:SS][LEVEL][ctx] msg``."""
    ts = time.strftime('%H:%M:%S')
    return f'[{ts}][{level}][{ctx}] {msg}'


def make_log(on_log: Callable[[str], None] | None = None) -> LogFn:
    """Return a ``log(level, ctx, msg)`` function.

    With a callback the formatted line is handed to it (the CLI passes
    ``print``); otherwise the line goes to the ``rbmreg`` stdlib logger.
    """
    logger = logging.getLogger(LOGGER_NAME)

    def log(level: str, ctx: str, msg: str):
        line = format_log_line(level, ctx, msg)
        if on_log is not None:
            on_log(line)
        else:
            logger.log(_LEVELS.get(level, logging.INFO), line)

    return log


def _writable_dir(path: Path) -> bool:
    """Check if *path* can be created and written to."""
    try:
        path.mkdir(parents=True, exist_ok=True)
        test = path / '.__wtest__'
        with open(test, 'w', encoding='utf-8') as f:
            f.write('ok')
        test.unlink(missing_ok=True)
        return True
    except OSError:
        return False


def resolve_output_root(default: str | Path | None = None) -> Path:
    """Determine a writable output root, trying several candidates.

    ``RBMREG_OUTPUT_ROOT`` wins when set and writable, then *default*
    (the working directory when omitted), then the temp directory.
    """
    override = os.environ.get(ENV_OUTPUT_ROOT)
    if override:
        p = Path(override)
        if _writable_dir(p):
            return p
    p = Path(default) if default is not None else Path.cwd()
    if _writable_dir(p):
        return p
    p = Path(tempfile.gettempdir()) / 'rbmreg'
    _writable_dir(p)
    return p


def resolve_run_dir(output_dir: str | Path) -> Path:
    """Resolve a config ``output_dir``; relative paths land under the output root."""
    p = Path(output_dir)
    if p.is_absolute():
        return p
    return resolve_output_root() / p


def to_float(x, default=None):
    """Safe float conversion."""
    try:
        return float(x)
    except (TypeError, ValueError):
        return default


def fmt_float(x: float | None) -> str:
    """Deterministic text form for CSV cells; blank for missing values."""
    if x is None:
        return ''
    return f'{float(x):.10g}'


class ConfigError(ValueError):
    """Configuration failed validation; ``errors`` holds every message."""

    def __init__(self, errors: list[str] | str):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__('; '.join(self.errors))


def reject_unknown(section: str, d: dict, allowed) -> None:
    """Raise ConfigError naming every key of *d* that is not in *allowed*."""
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError([f'{section}: unknown field "{k}"' for k in extra])
