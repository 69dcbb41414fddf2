#!/usr/bin/env python3
"""
Configuration Management Module
Resolves training configuration from dataclass defaults, a flat key/value
file and command-line overrides (flags win), plus environment defaults.
"""

import logging
import os
from dataclasses import fields
from typing import Any, Dict, Iterable, Optional

from dotenv import dotenv_values, load_dotenv

from lib.errors import ParameterError
from lib.trainer import TrainConfig

ALIASES = {
    "m": "batch_size",
    "lambda": "rf_weight",
    "gamma": "mi_weight",
    "omega": "l2_weight",
}
TRUE_WORDS = ("1", "true", "yes", "on")
FALSE_WORDS = ("0", "false", "no", "off")


def load_environment() -> None:
    """Load .env from the working directory without overriding the real environment"""
    load_dotenv(override=False)


def env_workers(default: int = 1) -> int:
    raw = os.getenv("SR_WORKERS")
    if raw is None or raw.strip() == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ParameterError(f"SR_WORKERS must be an integer, got {raw!r}")
    if value < 1:
        raise ParameterError(f"SR_WORKERS must be at least 1, got {value}")
    return value


def env_log_dir() -> Optional[str]:
    return os.getenv("SR_LOG_DIR") or None


class ConfigManager:
    """Training configuration resolver: defaults → config file → overrides"""

    def __init__(self, logger: Optional[logging.Logger] = None):
        self.logger = logger or logging.getLogger(__name__)
        self._types = {f.name: f.type for f in fields(TrainConfig)}

    def normalize_key(self, key: str) -> str:
        name = key.strip().lower().replace("-", "_")
        name = ALIASES.get(name, name)
        if name not in self._types:
            raise ParameterError(f"Unknown configuration key '{key}'")
        return name

    def coerce(self, name: str, text: Any) -> Any:
        """Convert a raw string value to the field's declared type"""
        if text is None:
            raise ParameterError(f"Configuration key '{name}' has no value")
        kind = self._types[name]
        if not isinstance(text, str):
            return kind(text)
        text = text.strip()
        if kind is bool:
            if text.lower() in TRUE_WORDS:
                return True
            if text.lower() in FALSE_WORDS:
                return False
            raise ParameterError(f"Configuration key '{name}' expects a boolean, got {text!r}")
        try:
            if kind is int:
                return int(text)
            if kind is float:
                return float(text)
        except ValueError:
            raise ParameterError(f"Configuration key '{name}' expects {kind.__name__}, got {text!r}")
        return text

    def load_file(self, path: str) -> Dict[str, Any]:
        """Parse a flat KEY=VALUE file (comments and blank lines allowed)"""
        if not os.path.isfile(path):
            raise ParameterError(f"{path}: configuration file not found")
        values: Dict[str, Any] = {}
        for key, raw in dotenv_values(path).items():
            name = self.normalize_key(key)
            values[name] = self.coerce(name, raw)
        self.logger.info(f"📋 Loaded {len(values)} configuration values from {path}")
        return values

    def parse_overrides(self, pairs: Iterable[str]) -> Dict[str, Any]:
        values: Dict[str, Any] = {}
        for pair in pairs or ():
            if "=" not in pair:
                raise ParameterError(f"Override '{pair}' must look like key=value")
            key, raw = pair.split("=", 1)
            name = self.normalize_key(key)
            values[name] = self.coerce(name, raw)
        return values

    def resolve(self, config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                base: Optional[TrainConfig] = None) -> TrainConfig:
        merged: Dict[str, Any] = {}
        if config_path:
            merged.update(self.load_file(config_path))
        for key, value in (overrides or {}).items():
            name = self.normalize_key(key)
            merged[name] = self.coerce(name, value)
        return (base or TrainConfig.desk()).with_overrides(**merged)

    @staticmethod
    def describe(values: Dict[str, Any]) -> str:
        """Stable one-line rendering of a resolved configuration"""
        return ", ".join(f"{key}={values[key]}" for key in sorted(values))
