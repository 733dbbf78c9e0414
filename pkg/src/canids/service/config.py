"""Service configuration: JSON file plus CANIDS_* environment overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    window_len: int = 16
    stride: int = 1  # streaming default: classify every completed window
    max_prob_threshold: float = 0.9
    entropy_threshold: float = 0.5
    mc_samples: int = 30
    root_seed: int = 0
    model_path: str | None = None  # checkpoint; untrained default model if unset
    store_dir: str = "canids-store"
    base_data_path: str | None = None  # encoded dataset joined with labels on retrain
    api_token: str | None = None
    max_batch_frames: int = 10_000
    retrain_epochs: int = 20
    retrain_batch_size: int = 64
    snapshot_every: int = 200

    _ENV_PREFIX = "CANIDS_"

    @classmethod
    def from_file(cls, path: str | Path | None = None, env: dict | None = None) -> "ServiceConfig":
        """Load config from a JSON file (optional), then apply environment
        overrides (CANIDS_<FIELD>, upper-cased field name)."""
        values: dict = {}
        if path is not None:
            with open(path) as fh:
                values = json.load(fh)
        known = {f.name: f.type for f in dataclasses.fields(cls) if not f.name.startswith("_")}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        env = os.environ if env is None else env
        for name in known:
            raw = env.get(cls._ENV_PREFIX + name.upper())
            if raw is not None:
                values[name] = _coerce(raw, getattr(cls, name, None))
        return cls(**values)


def _coerce(raw: str, default) -> object:
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw
