"""Environment-driven defaults for simulations, the acceptance runner and logging."""

from __future__ import annotations

import os


def _float_env(name: str, default: float, minimum: float) -> float:
    try:
        return max(float(os.getenv(name, str(default))), minimum)
    except ValueError:
        return default


def _int_env(name: str, default: int, minimum: int) -> int:
    try:
        return max(int(os.getenv(name, str(default))), minimum)
    except ValueError:
        return default


def default_dt() -> float:
    return _float_env("SPHERESYNC_DT", 1e-3, 1e-9)


def default_t_end() -> float:
    return _float_env("SPHERESYNC_T_END", 50.0, 0.0)


def default_record_every() -> int:
    return _int_env("SPHERESYNC_RECORD_EVERY", 100, 1)


def acceptance_workers() -> int:
    return _int_env("SPHERESYNC_ACCEPTANCE_WORKERS", os.cpu_count() or 1, 1)


def log_level() -> str:
    configured = (os.getenv("SPHERESYNC_LOG_LEVEL") or "").strip().upper()
    if configured in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
        return configured
    return "INFO"
