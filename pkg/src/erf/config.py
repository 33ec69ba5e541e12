"""Run configuration with key=value file support."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


@dataclass
class Config:
    # representation
    sh_bands: int = 3
    init_depth: int = 3
    cube_resolution: int = 16
    node_budget: int = 2 ** 24
    renderer: str = "opacity"          # opacity | exp-softplus | exp-lilu
    sensor: str = "identity"           # identity | gamma

    # ray sampling
    samples_per_side: int = 8
    max_samples: int = 256
    max_samples_opacity: int = 32
    sample_weight_floor: float = 0.05
    render_max_samples: int = 4096

    # objective and optimizer
    prior_strength: float = 1e-3
    huber_delta: float = 0.1
    pixel_batch: int = 4096
    prior_batch: int = 4096
    lr: float = 5e-3
    lr_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    # pixel importance sampling
    importance_sampling: bool = True
    cache_mip: int = 2
    cache_decay: float = 0.9
    cache_rebuild: int = 5000
    pixel_weight_floor: float = 0.05

    # structure adaptation
    hysteresis_high: float = 0.75
    hysteresis_low: float = 0.075
    probe_per_axis: int = 8

    # schedule
    phase_iterations: int = 20000
    max_phases: int = 8
    log_every: int = 500

    # data
    white_background: bool = True

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


_PARSERS = {"int": int, "float": float, "str": str}


def _parse_value(kind: str, text: str):
    if kind == "bool":
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "int":
        return int(float(text)) if "e" in text.lower() else int(text, 0)
    return _PARSERS[kind](text.strip())


def apply_overrides(config: Config, pairs: dict[str, str]) -> Config:
    kinds = {f.name: f.type for f in dataclasses.fields(Config)}
    changes = {}
    for key, text in pairs.items():
        name = key.strip().replace("-", "_")
        if name not in kinds:
            raise KeyError(f"unknown config key {key!r}")
        changes[name] = _parse_value(str(kinds[name]), text)
    return config.replace(**changes)


def load_config(path: str | Path | None = None, base: Config | None = None) -> Config:
    """Read ``key = value`` lines (``#`` starts a comment) on top of ``base``."""
    config = base or Config()
    if path is None:
        return config
    pairs = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return apply_overrides(config, pairs)


def dump_config(config: Config) -> str:
    return "".join(f"{f.name} = {getattr(config, f.name)}\n"
                   for f in dataclasses.fields(Config))
