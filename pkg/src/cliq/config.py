"""Run configuration: flat JSON config file, per-field CLI overrides, and
the resolved copy persisted with every run.

Stock defaults: K=100 clusters, seed 42, min cluster size 5, M=1000
examples per cluster, m=10 generated queries per cluster, temperature
0.7, max tokens 16384, timeout 300 s, 5 retries, embedding batch 64.
The API key is never a config field; it is read from the environment at
call time.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or unknown configuration input."""


@dataclass
class RunConfig:
    dataset_path: str = ""
    artifact_dir: str = "artifacts"
    seed: int = 42

    embed_backend: str = "local_hash"
    embed_dim: int = 256
    embed_endpoint: str = ""
    embed_model: str = ""
    embed_batch_size: int = 64
    embed_max_text_length: int = 2000
    embed_concurrency: int = 4

    cluster_k: int = 100
    cluster_minibatch_size: int = 0  # 0 -> min(1000, n // 10) at fit time
    cluster_max_iterations: int = 100
    cluster_min_size: int = 5

    gen_base_url: str = ""
    gen_model: str = ""
    gen_temperature: float = 0.7
    gen_max_tokens: int = 16384
    gen_timeout: float = 300.0
    gen_retries: int = 5
    gen_backoff_base: float = 1.0
    gen_jitter: bool = False
    gen_concurrency: int = 4
    gen_examples_per_cluster: int = 1000  # M
    gen_queries_per_cluster: int = 10  # m

    analyze_budgets: tuple[int, ...] = (10, 25, 50, 100, 200, 500, 1000)
    analyze_trials: int = 100

    sim_k_true: int = 20
    sim_dim: int = 32
    sim_pool_size: int = 1000
    sim_zipf_s: float = 1.2
    sim_noise_sigma: float = 0.02
    sim_quant_step: float = 0.1
    sim_m_per_cluster: int = 3
    sim_budgets: tuple[int, ...] = (60, 120, 240)
    sim_trials: int = 5


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value, target):
    if target == "tuple[int, ...]":
        if isinstance(value, str):
            parts = [p for p in value.replace(",", " ").split() if p]
            return tuple(int(p) for p in parts)
        if isinstance(value, (list, tuple)):
            return tuple(int(v) for v in value)
        raise ConfigError(f"field {name!r} expects a list of integers")
    if target == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
        raise ConfigError(f"field {name!r} expects a boolean")
    if target == "int":
        if isinstance(value, bool):
            raise ConfigError(f"field {name!r} expects an integer")
        return int(value)
    if target == "float":
        return float(value)
    if target == "str":
        if not isinstance(value, str):
            raise ConfigError(f"field {name!r} expects text")
        return os.path.expandvars(value)  # env expanded; secrets are never config fields
    raise ConfigError(f"field {name!r} has unsupported type {target}")


def load_config_file(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def resolve_config(
    file_values: dict | None = None, overrides: dict | None = None
) -> RunConfig:
    """Defaults, then config-file values, then CLI overrides (flags win)."""
    merged: dict = {}
    for source, origin in ((file_values or {}, "config file"), (overrides or {}, "flag")):
        for key, value in source.items():
            if value is None:
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config field from {origin}: {key!r}")
            merged[key] = _coerce(key, value, _FIELD_TYPES[key])
    return RunConfig(**merged)


def config_to_dict(config: RunConfig) -> dict:
    doc = asdict(config)
    for key, value in doc.items():
        if isinstance(value, tuple):
            doc[key] = list(value)
    return doc


def write_resolved_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(config), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
