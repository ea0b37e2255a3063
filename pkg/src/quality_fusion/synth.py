"""Synthetic two-view classification data.

Each label ``y`` is split into two digits, ``y % a`` and ``y // a`` with
``a * b = num_classes``. Both views render a shared per-class prototype (the same
class latent pushed through a view-specific orthogonal map), blended with an
exclusive prototype that only encodes the view's own digit: optical sees
``y % a``, SAR sees ``y // a``. With ``exclusive_fraction = 1`` neither view alone
separates all classes, so fusing them is informative.

Every position of a sample carries the prototype with its own random gain plus
isotropic view noise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from quality_fusion.config import ExperimentConfig
from quality_fusion.errors import ContractViolation
from quality_fusion.graddiff import Batch
from quality_fusion.numerics import normalize_rows, qr_orthonormalize

logger = logging.getLogger(__name__)

GAIN_SPREAD = 0.25


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 8
    n_train: int = 512
    n_test: int = 512
    positions: int = 16
    channels: int = 16
    separation: float = 3.0
    view_noise: float = 1.0
    exclusive_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.separation > 0.0:
            raise ContractViolation(f"separation must be positive, got {self.separation}")
        if not 0.0 <= self.exclusive_fraction <= 1.0:
            raise ContractViolation(f"exclusive_fraction must lie in [0, 1], got {self.exclusive_fraction}")
        if self.view_noise < 0.0:
            raise ContractViolation(f"view_noise must be >= 0, got {self.view_noise}")
        if self.num_classes < 2 or self.positions < 1 or self.channels < 1:
            raise ContractViolation("num_classes >= 2, positions >= 1 and channels >= 1 are required")

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig, seed: int | None = None) -> "SynthConfig":
        return cls(
            num_classes=cfg.num_classes,
            n_train=cfg.n_train,
            n_test=cfg.n_test,
            positions=cfg.N,
            channels=cfg.C,
            separation=cfg.separation,
            view_noise=cfg.view_noise,
            exclusive_fraction=cfg.exclusive_fraction,
            seed=cfg.seed if seed is None else seed,
        )


@dataclass(frozen=True)
class SynthDataset:
    train: Batch
    test: Batch
    digits: tuple[int, int]


def label_digits(num_classes: int) -> tuple[int, int]:
    """``(a, b)`` with ``a * b = num_classes`` and ``a`` the largest divisor <= sqrt."""
    a = max(d for d in range(1, math.isqrt(num_classes) + 1) if num_classes % d == 0)
    return a, num_classes // a


def _prototypes(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    a, b = label_digits(cfg.num_classes)
    c = cfg.channels
    latent, _ = normalize_rows(rng.standard_normal((cfg.num_classes, c)))
    view_r = qr_orthonormalize(rng.standard_normal((c, c)))
    view_s = qr_orthonormalize(rng.standard_normal((c, c)))
    exclusive_r, _ = normalize_rows(rng.standard_normal((a, c)))
    exclusive_s, _ = normalize_rows(rng.standard_normal((b, c)))
    labels = np.arange(cfg.num_classes)
    rho = cfg.exclusive_fraction
    proto_r = (1.0 - rho) * (latent @ view_r) + rho * exclusive_r[labels % a]
    proto_s = (1.0 - rho) * (latent @ view_s) + rho * exclusive_s[labels // a]
    return cfg.separation * proto_r, cfg.separation * proto_s


def _render(
    cfg: SynthConfig, protos: np.ndarray, labels: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    shape = (labels.shape[0], cfg.positions)
    gains = 1.0 + GAIN_SPREAD * rng.uniform(-1.0, 1.0, size=shape)
    noise = rng.standard_normal(shape + (cfg.channels,))
    return gains[..., None] * protos[labels][:, None, :] + cfg.view_noise * noise


def _split(cfg: SynthConfig, size: int, protos: tuple[np.ndarray, np.ndarray], rng: np.random.Generator) -> Batch:
    labels = rng.integers(0, cfg.num_classes, size=size)
    optical = _render(cfg, protos[0], labels, rng)
    sar = _render(cfg, protos[1], labels, rng)
    return Batch(optical=optical, sar=sar, labels=labels)


def gen_dataset(cfg: SynthConfig) -> SynthDataset:
    rng = np.random.default_rng(cfg.seed)
    protos = _prototypes(cfg, rng)
    train = _split(cfg, cfg.n_train, protos, rng)
    test = _split(cfg, cfg.n_test, protos, rng)
    logger.debug(
        "generated dataset seed=%d train=%d test=%d N=%d C=%d",
        cfg.seed, cfg.n_train, cfg.n_test, cfg.positions, cfg.channels,
    )
    return SynthDataset(train=train, test=test, digits=label_digits(cfg.num_classes))


def centroid_accuracy(train: np.ndarray, train_labels: np.ndarray, test: np.ndarray, test_labels: np.ndarray) -> float:
    """Nearest class-centroid accuracy on position-averaged features of one view."""
    train_mean = train.mean(axis=1)
    test_mean = test.mean(axis=1)
    classes = np.unique(train_labels)
    centroids = np.stack([train_mean[train_labels == k].mean(axis=0) for k in classes])
    dists = np.sum((test_mean[:, None, :] - centroids[None, :, :]) ** 2, axis=-1)
    return float(np.mean(classes[np.argmin(dists, axis=1)] == test_labels))
