"""Random modality-missing protocol for two modalities (optical, SAR).

Missing rate of a schedule of L samples and M = 2 modalities::

    MR = 1 - sum_i a_i / (L * M)

where a_i is the number of modalities sample i keeps (1 or 2). The sampler drops
the optical view with probability p, the SAR view with probability p and keeps
both with probability 1 - 2p. A sample then misses 2p modalities on average, i.e.
2p / M = p of its slots, so the expected MR equals p and p = target MR. With
p = 0.5 every sample loses exactly one view and MR is exactly 0.5, the upper
bound (M - 1) / M.

Unavailable views are either zero-filled or replaced by a degraded copy of the
clean view (gaussian noise or a contiguous occluded block of positions), which
stands in for an imperfect reconstruction.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from quality_fusion.dmqa import FeatureMap
from quality_fusion.errors import ContractViolation, ProtocolBoundError

logger = logging.getLogger(__name__)

MODALITIES = ("optical", "sar")
MAX_MISSING_RATE = (len(MODALITIES) - 1) / len(MODALITIES)
MR_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
DEGRADATION_KINDS = ("zero_fill", "gaussian_noise", "patch_occlusion")
POLICY_ALIASES = {"zero": "zero_fill", "noise": "gaussian_noise", "occlusion": "patch_occlusion"}


def mix_seed(*parts: int) -> int:
    """Derive a 64-bit seed from a base seed and stream indices (epoch, sample, ...)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class AvailabilitySchedule:
    optical: np.ndarray
    sar: np.ndarray
    seed: int = 0
    target_mr: float = 0.0

    def __post_init__(self) -> None:
        optical = np.asarray(self.optical, dtype=bool)
        sar = np.asarray(self.sar, dtype=bool)
        if optical.ndim != 1 or optical.shape != sar.shape:
            raise ContractViolation(f"availability flags differ in shape: {optical.shape}, {sar.shape}")
        if not np.all(optical | sar):
            raise ContractViolation("every sample must keep at least one modality")
        if not 0.0 <= self.target_mr <= MAX_MISSING_RATE:
            raise ProtocolBoundError(f"target MR {self.target_mr} outside [0, {MAX_MISSING_RATE}]")
        object.__setattr__(self, "optical", optical)
        object.__setattr__(self, "sar", sar)

    def __len__(self) -> int:
        return int(self.optical.shape[0])

    def available_counts(self) -> np.ndarray:
        return self.optical.astype(np.int64) + self.sar.astype(np.int64)

    @classmethod
    def complete(cls, num_samples: int) -> "AvailabilitySchedule":
        ones = np.ones(num_samples, dtype=bool)
        return cls(optical=ones, sar=ones.copy())


def sample_availability(num_samples: int, target_mr: float, seed: int) -> AvailabilitySchedule:
    """Seeded per-sample availability at a target missing rate.

    One uniform draw per sample drops optical below ``target_mr`` and SAR in
    ``[target_mr, 2 * target_mr)``, so no sample loses both views.

    Args:
        num_samples: Schedule length.
        target_mr: Fraction of missing modality slices, in ``[0, 0.5]``.
        seed: Generator seed.

    Returns:
        The schedule, carrying ``seed`` and ``target_mr``.

    Raises:
        ProtocolBoundError: ``target_mr`` lies outside ``[0, 0.5]``.
    """
    if not 0.0 <= target_mr <= MAX_MISSING_RATE:
        raise ProtocolBoundError(
            f"target MR {target_mr} outside [0, {MAX_MISSING_RATE}] for {len(MODALITIES)} modalities"
        )
    if num_samples < 0:
        raise ContractViolation(f"num_samples must be >= 0, got {num_samples}")
    draws = np.random.default_rng(seed).random(num_samples)
    drop_optical = draws < target_mr
    drop_sar = (draws >= target_mr) & (draws < 2.0 * target_mr)
    return AvailabilitySchedule(
        optical=~drop_optical, sar=~drop_sar, seed=seed, target_mr=target_mr
    )


def measured_mr(schedule: AvailabilitySchedule) -> float:
    """Missing fraction of all modality slices, ``1 - sum(a_i) / (L * M)``."""
    total = len(schedule)
    if total == 0:
        raise ContractViolation("missing rate of an empty schedule is undefined")
    kept = int(np.sum(schedule.available_counts()))
    return 1.0 - kept / (total * len(MODALITIES))


def write_schedule_csv(schedule: AvailabilitySchedule, path: Union[Path, str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["sample_id", "optical_available", "sar_available"])
        for idx, (opt, sar) in enumerate(zip(schedule.optical, schedule.sar)):
            writer.writerow([idx, int(opt), int(sar)])


def read_schedule_csv(path: Union[Path, str], seed: int = 0, target_mr: float = 0.0) -> AvailabilitySchedule:
    with open(path, newline="", encoding="utf-8") as handle:
        rows = sorted(csv.DictReader(handle), key=lambda row: int(row["sample_id"]))
    return AvailabilitySchedule(
        optical=np.array([int(row["optical_available"]) for row in rows], dtype=bool),
        sar=np.array([int(row["sar_available"]) for row in rows], dtype=bool),
        seed=seed,
        target_mr=target_mr,
    )


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "zero_fill"
    severity: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in DEGRADATION_KINDS:
            raise ContractViolation(f"unknown degradation kind {self.kind!r}")
        if self.severity < 0.0:
            raise ContractViolation(f"severity must be >= 0, got {self.severity}")
        if self.kind == "patch_occlusion" and self.severity > 1.0:
            raise ContractViolation(f"occluded fraction must be <= 1, got {self.severity}")

    @property
    def label(self) -> str:
        if self.kind == "zero_fill":
            return "zero"
        short = "noise" if self.kind == "gaussian_noise" else "occlusion"
        return f"{short}:{self.severity:g}"


def parse_policy(text: str, seed: int = 0) -> DegradationSpec:
    """Parse a missing-modality policy string.

    Args:
        text: ``zero`` | ``noise:<std>`` | ``occlusion:<fraction>``; long kind
            names are accepted and a bare kind gets severity 1.
        seed: Seed stored on the returned spec.

    Returns:
        The matching :class:`DegradationSpec`.

    Raises:
        ContractViolation: unknown kind or unparsable severity.
    """
    name, _, value = text.strip().partition(":")
    kind = POLICY_ALIASES.get(name, name)
    if kind not in DEGRADATION_KINDS:
        raise ContractViolation(f"unknown missing-modality policy {text!r}")
    if kind == "zero_fill":
        return DegradationSpec(kind=kind, severity=0.0, seed=seed)
    try:
        severity = float(value) if value else 1.0
    except ValueError as err:
        raise ContractViolation(f"bad severity in policy {text!r}") from err
    return DegradationSpec(kind=kind, severity=severity, seed=seed)


def degrade(f: np.ndarray, spec: DegradationSpec, stream: Sequence[int] = ()) -> np.ndarray:
    """Degraded copy of a ``(N, C)`` slice.

    Args:
        f: Feature slice; never modified.
        spec: Degradation kind, severity and base seed.
        stream: Extra seed words, e.g. ``(sample, modality)``.

    Returns:
        Zeros, the slice plus noise, or the slice with one contiguous run of
        positions zeroed.
    """
    f = np.asarray(f, dtype=np.float64)
    if spec.kind == "zero_fill":
        return np.zeros_like(f)
    if spec.severity == 0.0:
        return f.copy()
    rng = np.random.default_rng([spec.seed, *stream])
    if spec.kind == "gaussian_noise":
        return f + spec.severity * rng.standard_normal(f.shape)
    positions = f.shape[0]
    occluded = int(round(spec.severity * positions))
    out = f.copy()
    if occluded:
        start = int(rng.integers(0, positions - occluded + 1))
        out[start : start + occluded] = 0.0
    return out


def apply_missing(
    f_r: Union[FeatureMap, np.ndarray],
    f_s: Union[FeatureMap, np.ndarray],
    schedule: AvailabilitySchedule,
    policy: DegradationSpec,
) -> tuple[FeatureMap, FeatureMap]:
    """Replace every unavailable slice per ``policy``; available slices pass through."""
    optical = f_r.values if isinstance(f_r, FeatureMap) else np.asarray(f_r, dtype=np.float64)
    sar = f_s.values if isinstance(f_s, FeatureMap) else np.asarray(f_s, dtype=np.float64)
    if optical.shape[0] != len(schedule) or sar.shape[0] != len(schedule):
        raise ContractViolation(
            f"schedule covers {len(schedule)} samples, features have {optical.shape[0]} / {sar.shape[0]}"
        )
    optical = optical.copy()
    sar = sar.copy()
    for idx in np.flatnonzero(~schedule.optical):
        optical[idx] = degrade(optical[idx], policy, stream=(int(idx), 0))
    for idx in np.flatnonzero(~schedule.sar):
        sar[idx] = degrade(sar[idx], policy, stream=(int(idx), 1))
    return FeatureMap(optical), FeatureMap(sar)
