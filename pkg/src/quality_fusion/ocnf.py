"""Cross-orthogonal projection and reliability-weighted channel fusion.

Both modalities are lifted into a shared ``2C``-channel space by the two column
halves of one orthogonal matrix ``Q``; ``W_R`` spans the first C directions and
``W_S`` the last C, so ``W_R^T W_S = 0`` holds by construction and scaling each
half by ``1/sqrt(C)`` gives unit Frobenius norm. The lifted maps are then mixed
per channel with softmax weights derived from pooled DMQA reliabilities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from quality_fusion.dmqa import FeatureMap, ReliabilityResult
from quality_fusion.errors import ContractViolation, DegenerateInputError
from quality_fusion.numerics import TwoLayerMlp, as_matrix, dump_tensor, load_tensor, sym_eig

logger = logging.getLogger(__name__)

MIN_COVARIANCE_EIGENVALUE = 1e-10
ORTHOGONALITY_TOL = 1e-8


@dataclass(frozen=True)
class OrthoProjector:
    joint: np.ndarray

    def __post_init__(self) -> None:
        q = as_matrix(self.joint)
        if q.shape[0] != q.shape[1] or q.shape[0] % 2:
            raise ContractViolation(f"projector must be a square 2C x 2C matrix, got {q.shape}")
        object.__setattr__(self, "joint", q)

    @property
    def channels_in(self) -> int:
        return self.joint.shape[0] // 2

    @property
    def channels_out(self) -> int:
        return self.joint.shape[0]

    @property
    def w_r(self) -> np.ndarray:
        c = self.channels_in
        return self.joint[:, :c] / np.sqrt(c)

    @property
    def w_s(self) -> np.ndarray:
        c = self.channels_in
        return self.joint[:, c:] / np.sqrt(c)

    def orthogonality_error(self) -> float:
        """Frobenius distance of ``Q^T Q`` from the identity."""
        q = self.joint
        return float(np.linalg.norm(q.T @ q - np.eye(q.shape[0])))

    def constraint_errors(self) -> dict[str, float]:
        return {
            "cross": float(np.linalg.norm(self.w_r.T @ self.w_s)),
            "norm_r": abs(float(np.linalg.norm(self.w_r)) - 1.0),
            "norm_s": abs(float(np.linalg.norm(self.w_s)) - 1.0),
            "gram": self.orthogonality_error(),
        }


def init_projector(raw: np.ndarray) -> OrthoProjector:
    """Whiten a raw ``2C x 2C`` parameter: ``Q = raw (raw^T raw)^(-1/2)``."""
    raw = as_matrix(raw)
    if raw.shape[0] != raw.shape[1] or raw.shape[0] % 2:
        raise ContractViolation(f"raw projector must be square with even size, got {raw.shape}")
    eigenvalues, _ = sym_eig(raw.T @ raw)
    smallest = float(eigenvalues[-1])
    if smallest < MIN_COVARIANCE_EIGENVALUE:
        raise DegenerateInputError(
            f"raw projector is rank deficient: covariance eigenvalue {smallest:.3e}", value=smallest
        )
    # raw (raw^T raw)^(-1/2) is the polar factor U V^T of raw = U S V^T
    u, _, vt = np.linalg.svd(raw)
    return OrthoProjector(joint=u @ vt)


def random_projector(channels: int, rng: np.random.Generator) -> OrthoProjector:
    return init_projector(rng.standard_normal((2 * channels, 2 * channels)))


def save_projector(base: Union[Path, str], proj: OrthoProjector) -> Path:
    return dump_tensor(base, proj.joint, extra={"C": proj.channels_in})


def load_projector(base: Union[Path, str]) -> OrthoProjector:
    joint, sidecar = load_tensor(base)
    proj = OrthoProjector(joint=joint)
    if "C" in sidecar and int(sidecar["C"]) != proj.channels_in:
        raise ContractViolation(f"projector sidecar C={sidecar['C']} but matrix is {joint.shape}")
    return proj


@dataclass
class FusionParams:
    """MLP mapping a pooled reliability scalar to a ``2C`` channel vector."""

    mlp: TwoLayerMlp

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, output_scale: float = 0.0) -> "FusionParams":
        return cls(mlp=TwoLayerMlp.init(1, channels, 2 * channels, rng, output_scale))


def pooled_reliability(r: Union[ReliabilityResult, np.ndarray]) -> np.ndarray:
    combined = r.combined if isinstance(r, ReliabilityResult) else np.asarray(r, dtype=np.float64)
    return np.mean(combined, axis=-1)


def channel_reliability(r: Union[ReliabilityResult, np.ndarray], params: FusionParams) -> np.ndarray:
    """Mean-pool R over positions, then map each sample to a ``2C`` vector."""
    return params.mlp(pooled_reliability(r)[..., None])


def fusion_weights(r_tilde_r: np.ndarray, r_tilde_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two-way channel softmax; ``gamma_s = 1 - gamma_r``."""
    r_tilde_r = np.asarray(r_tilde_r, dtype=np.float64)
    r_tilde_s = np.asarray(r_tilde_s, dtype=np.float64)
    if r_tilde_r.shape != r_tilde_s.shape:
        raise ContractViolation(f"reliability vectors differ: {r_tilde_r.shape} vs {r_tilde_s.shape}")
    top = np.maximum(r_tilde_r, r_tilde_s)
    e_r = np.exp(r_tilde_r - top)
    e_s = np.exp(r_tilde_s - top)
    gamma_r = e_r / (e_r + e_s)
    return gamma_r, 1.0 - gamma_r


def project(f: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``F'(i) = w F(i)`` for every position: ``(..., N, C) -> (..., N, 2C)``."""
    return f @ w.T


def _broadcast_gamma(gamma: np.ndarray, fused_ndim: int) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    # per-sample gammas (B, 2C) broadcast across positions
    return gamma[..., None, :] if gamma.ndim == 2 and fused_ndim == 3 else gamma


def ocnf_fuse(
    f_r: Union[FeatureMap, np.ndarray],
    f_s: Union[FeatureMap, np.ndarray],
    proj: OrthoProjector,
    gamma_r: np.ndarray,
    gamma_s: np.ndarray,
) -> FeatureMap:
    a = f_r.values if isinstance(f_r, FeatureMap) else np.asarray(f_r, dtype=np.float64)
    b = f_s.values if isinstance(f_s, FeatureMap) else np.asarray(f_s, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"modality shapes differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != proj.channels_in:
        raise ContractViolation(
            f"features have {a.shape[-1]} channels, projector expects {proj.channels_in}"
        )
    out = proj.channels_out
    for name, gamma in (("gamma_r", gamma_r), ("gamma_s", gamma_s)):
        g = np.asarray(gamma)
        if g.shape[-1] != out or (g.ndim == 2 and g.shape[0] != a.shape[0]):
            raise ContractViolation(f"{name} has shape {g.shape}, expected (..., {out})")
    fused = _broadcast_gamma(gamma_r, a.ndim) * project(a, proj.w_r) + _broadcast_gamma(
        gamma_s, a.ndim
    ) * project(b, proj.w_s)
    if fused.ndim == 2:
        fused = fused[None]
    return FeatureMap(values=fused)
