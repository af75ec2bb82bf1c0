import json
import os
from typing import Any, Dict

# Numerical defaults persisted next to the package (override path via CURVEFLOW_SETTINGS)
_CONFIG_PATH = os.environ.get(
    "CURVEFLOW_SETTINGS",
    os.path.join(os.path.dirname(__file__), "lab_settings.json"),
)

_DEFAULTS: Dict[str, Any] = {
    "fd_relative_step": 1e-4,
    "richardson": True,
    "cfl_safety": 0.2,
    "cfl_limit": 1.0,
    "degenerate_speed": 1e-10,
    "tolerance_factor": 10.0,
    "tolerance_floor": 1e-9,
    "identity_tolerance": 1e-4,
    "constants_inflation": 0.1,
    "constants_time_samples": 9,
    "constants_space_samples": 9,
}


def _load_settings_from_disk(defaults: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(defaults)
    try:
        if os.path.exists(_CONFIG_PATH):
            with open(_CONFIG_PATH, "r", encoding="utf-8") as f:
                data = json.load(f) or {}
            for key, value in data.items():
                if key in merged:
                    merged[key] = value
    except Exception:
        # fall back to built-in defaults
        pass
    return merged


_settings = _load_settings_from_disk(_DEFAULTS)


def get_settings() -> Dict[str, Any]:
    return _settings


def set_settings(new_settings: Dict[str, Any]) -> None:
    unknown = sorted(set(new_settings) - set(_DEFAULTS))
    if unknown:
        raise ValueError(f"Unknown settings: {', '.join(unknown)}")
    _settings.update(new_settings)


def save_settings() -> None:
    try:
        with open(_CONFIG_PATH, "w", encoding="utf-8") as f:
            json.dump(_settings, f, indent=2)
    except Exception:
        # If persistence fails, continue using in-memory settings
        pass


def thread_cap() -> int:
    """Worker cap from CURVEFLOW_THREADS (0 or unset means available parallelism)."""
    try:
        requested = int(os.environ.get("CURVEFLOW_THREADS", "0") or "0")
    except ValueError:
        requested = 0
    if requested <= 0:
        return os.cpu_count() or 1
    return requested


def log_level() -> str:
    return os.environ.get("CURVEFLOW_LOG_LEVEL", "INFO").upper()
