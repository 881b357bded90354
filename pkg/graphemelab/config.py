"""
Run configuration: a flat key=value map with typed defaults.

Sources are applied in order, later ones winning:

    DEFAULTS  <  --config FILE  <  --set key=value  <  --seed N

Files are UTF-8, one `key = value` per line, `#` starts a comment. Unknown
keys and unparsable values raise ConfigError with the offending line number
(0 for command-line overrides).
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any

from graphemelab.errors import ConfigError

# ============================================================================
# Defaults
# ============================================================================

DEFAULTS: dict[str, Any] = {
    "seed": 1234,
    "n": 2000,
    "test_n": 200,
    "dev_n": 400,
    "frame_width": 16,
    "tts_embed_dim": 64,
    "tts_conv_k": 8,
    "tts_conv_channels": 32,
    "tts_hidden": 64,
    "tts_decoder_hidden": 128,
    "tts_attention_dim": 64,
    "tts_reduction": 2,
    "tts_lr": 0.001,
    "tts_epochs": 10,
    "tts_self_attention": False,
    "tts_clip_norm": 1.0,
    "probe_hidden": 64,
    "probe_epochs": 20,
    "probe_lr": 0.005,
    "probe_mode": "embedding",
    "probe_split": "train",
    "tsne_perplexity": 30.0,
    "tsne_iterations": 1000,
    "tsne_learning_rate": 200.0,
    "tsne_max_points": 3000,
    "embed_split": "test",
    "purity_k": 10,
    "swap_pairs": 50,
    "log_level": "INFO",
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _parse(key: str, raw: str, line: int) -> Any:
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r} as {type(default).__name__}", line) from None
    if not raw:
        raise ConfigError(f"empty value for {key}", line)
    return raw


class Config:
    def __init__(self, values: dict[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        self.sources = {key: "default" for key in DEFAULTS}
        for key, value in (values or {}).items():
            self.set(key, str(value), 0, "code")

    def set(self, key: str, raw: str, line: int = 0, source: str = "--set") -> None:
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key '{key}'", line)
        self.values[key] = _parse(key, raw, line)
        self.sources[key] = source

    def apply_text(self, text: str, source: str) -> None:
        for line_number, line in enumerate(text.splitlines(), 1):
            content = line.split("#", 1)[0].strip()
            if not content:
                continue
            key, sep, raw = content.partition("=")
            if not sep:
                raise ConfigError(f"expected key=value, got {content!r}", line_number)
            self.set(key, raw, line_number, source)

    def apply_file(self, path: Path) -> None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        self.apply_text(text, str(path))

    def apply_override(self, assignment: str) -> None:
        key, sep, raw = assignment.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {assignment!r}")
        self.set(key, raw)

    def get_int(self, key: str) -> int:
        return int(self.values[key])

    def get_float(self, key: str) -> float:
        return float(self.values[key])

    def get_bool(self, key: str) -> bool:
        return bool(self.values[key])

    def get_str(self, key: str) -> str:
        return str(self.values[key])

    def resolved(self) -> dict[str, Any]:
        return {key: self.values[key] for key in sorted(self.values)}

    def digest(self) -> str:
        payload = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def log_values(self) -> None:
        for key, value in self.resolved().items():
            logging.info(f"[graphemelab] config {key}={value} ({self.sources[key]})")


def load_config(config_file: Path | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> Config:
    config = Config()
    if config_file is not None:
        config.apply_file(config_file)
    for assignment in overrides or []:
        config.apply_override(assignment)
    if seed is not None:
        config.set("seed", str(seed), 0, "--seed")
    return config
