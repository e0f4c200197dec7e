"""Run configuration: one JSON document, merged over the packaged defaults."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

from .patching import SamplerConfig
from .phantom import PhantomConfig


@dataclass(frozen=True)
class NetworkConfig:
    width: int = 8
    levels: int = 3
    batch_size: int = 8
    sigma_rel: float = 0.01
    base_lr: float = 1e-4
    normalize_first_epoch: bool = True
    max_epochs: int = 10
    patience: int = 3
    val_fraction: tuple[int, int] = (15, 4)

    def __post_init__(self):
        object.__setattr__(self, "val_fraction", tuple(int(v) for v in self.val_fraction))
        if not 1 <= self.max_epochs <= 10:
            raise ValueError("max_epochs must lie in [1, 10]")
        if self.patience < 1 or self.batch_size < 1 or self.width < 1:
            raise ValueError("patience, batch_size and width must be positive")
        if self.sigma_rel < 0 or self.base_lr < 0:
            raise ValueError("sigma_rel and base_lr must be non-negative")


@dataclass(frozen=True)
class StatsConfig:
    pairing: str = "pooled"
    min_roi_voxels: int = 5

    def __post_init__(self):
        if self.pairing not in ("pooled", "per_subject"):
            raise ValueError(f"unknown pairing mode {self.pairing!r}")


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig
    sampler: SamplerConfig
    network: NetworkConfig
    stats: StatsConfig
    workspace: str = "workspace"
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "config_version": 1,
            "seed": self.seed,
            "phantom": self.phantom.to_dict(),
            "sampler": asdict(self.sampler),
            "network": {**asdict(self.network), "val_fraction": list(self.network.val_fraction)},
            "stats": asdict(self.stats),
            "paths": {"workspace": self.workspace},
        }

    def hash(self) -> str:
        """Fingerprint of everything that affects results (the workspace location does not)."""
        d = self.to_dict()
        del d["paths"]
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_dict() -> dict:
    return json.loads(resources.files("genmvi").joinpath("data/default_config.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(d: dict) -> RunConfig:
    d = _merge(default_dict(), d)
    if "seed" not in d:
        raise ValueError("configuration must carry a seed")
    return RunConfig(
        phantom=PhantomConfig.from_dict(d["phantom"]),
        sampler=SamplerConfig(**d["sampler"]),
        network=NetworkConfig(**d["network"]),
        stats=StatsConfig(**d["stats"]),
        workspace=str(d.get("paths", {}).get("workspace", "workspace")),
        seed=int(d["seed"]),
    )


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    d = json.loads(Path(path).read_text()) if path else {}
    if overrides:
        d = _merge(d, overrides)
    return from_dict(d)
