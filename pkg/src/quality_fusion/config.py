"""Experiment configuration loaded from a JSON file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from quality_fusion.dmqa import RELIABILITY_MODES
from quality_fusion.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    num_classes: int = 8
    n_train: int = 512
    n_test: int = 512
    N: int = 16
    C: int = 16
    K: int = 16
    I: int = 4
    alpha_init: float = 0.5
    beta_init: float = 0.5
    epsilon: float = 1e-6
    epochs: int = 300
    lr: float = 1e-2
    mlp_hidden: Optional[int] = None
    batch_size: int = 64
    separation: float = 3.0
    view_noise: float = 1.0
    exclusive_fraction: float = 0.5
    reliability_mode: str = "combined"
    workers: int = 1
    log_every: int = 50
    probe_coords: int = 40

    def __post_init__(self) -> None:
        for name in ("num_classes", "n_train", "n_test", "N", "C", "K", "I", "batch_size", "workers", "log_every"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.probe_coords < 1:
            raise ConfigError(f"probe_coords must be positive, got {self.probe_coords}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("alpha_init", "beta_init"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if not self.epsilon > 0.0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.lr < 0.0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not self.separation > 0.0:
            raise ConfigError(f"separation must be positive, got {self.separation}")
        if self.view_noise < 0.0:
            raise ConfigError(f"view_noise must be >= 0, got {self.view_noise}")
        if not 0.0 <= self.exclusive_fraction <= 1.0:
            raise ConfigError(f"exclusive_fraction must lie in [0, 1], got {self.exclusive_fraction}")
        if self.reliability_mode not in RELIABILITY_MODES:
            raise ConfigError(f"reliability_mode must be one of {RELIABILITY_MODES}")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ConfigError(f"mlp_hidden must be positive, got {self.mlp_hidden}")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 2 * self.C

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values: dict[str, Any] = {}
        for key, raw in data.items():
            default = known[key].default
            try:
                if key == "mlp_hidden":
                    values[key] = None if raw is None else int(raw)
                elif raw is None:
                    raise ValueError("null is not allowed")
                elif isinstance(default, int):
                    if isinstance(raw, float) and not raw.is_integer():
                        raise ValueError(f"expected an integer, got {raw}")
                    values[key] = int(raw)
                elif isinstance(default, float):
                    values[key] = float(raw)
                else:
                    values[key] = raw
            except (TypeError, ValueError) as err:
                raise ConfigError(f"bad value for {key!r}: {err}") from err
        return cls(**values)

    @classmethod
    def from_json(cls, path: Union[Path, str]) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {path} is not valid JSON: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        logger.debug("loaded config %s", path)
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def digest(self, **extra: Any) -> str:
        """Stable hash of the config plus cell coordinates."""
        payload = json.dumps({**self.to_dict(), **extra}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
