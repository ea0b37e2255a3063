"""Token-based per-position reliability assessment of a modality's features.

Each modality owns a bank of K learnable reference tokens. Features are scored
on two axes:

* magnitude reliability ``L``: how close a feature's norm is to the norm the
  token bank predicts for it (attention-weighted token norms), normalized by the
  largest deviation in the sample;
* directional reliability ``D``: the best cosine alignment with any token,
  clamped to ``[0, 1]``.

The two are blended into ``R`` and used to re-weight a token-to-position
attention that refines the tokens for ``I`` rounds. The final ``R`` is computed
from the refined tokens.

Every operation accepts a single slice ``(N, C)`` or a batch ``(B, N, C)``;
token banks may be shared ``(K, C)`` or per-sample ``(B, K, C)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from quality_fusion.errors import ContractViolation, DegenerateInputError
from quality_fusion.numerics import (
    TwoLayerMlp,
    logistic,
    logit,
    normalize_rows,
    row_l2_norms,
    softmax,
)

logger = logging.getLogger(__name__)

MIN_TOKEN_NORM = 1e-8
DEFAULT_EPSILON = 1e-6
DEFAULT_TOKENS = 16
DEFAULT_ITERATIONS = 4
RELIABILITY_MODES = ("combined", "magnitude", "direction")


@dataclass(frozen=True)
class FeatureMap:
    """Per-modality features, shape ``(samples, positions, channels)``."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if arr.ndim != 3:
            raise ContractViolation(f"FeatureMap must be (B, N, C), got shape {arr.shape}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ContractViolation(f"FeatureMap needs N >= 1 and C >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("FeatureMap contains non-finite values")
        object.__setattr__(self, "values", arr)

    @property
    def samples(self) -> int:
        return self.values.shape[0]

    @property
    def positions(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def sample(self, index: int) -> np.ndarray:
        return self.values[index]


ArrayOrMap = Union[FeatureMap, np.ndarray]


def _values(f: ArrayOrMap) -> np.ndarray:
    return f.values if isinstance(f, FeatureMap) else np.asarray(f, dtype=np.float64)


@dataclass(frozen=True)
class TokenBank:
    """Reference tokens ``(K, C)``, or ``(B, K, C)`` once refined per sample."""

    tokens: np.ndarray
    iteration_index: int = 0

    def __post_init__(self) -> None:
        arr = np.asarray(self.tokens, dtype=np.float64)
        if arr.ndim not in (2, 3) or arr.shape[-2] < 1:
            raise ContractViolation(f"TokenBank must be (K, C) or (B, K, C), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DegenerateInputError("TokenBank contains non-finite values")
        smallest = float(np.min(row_l2_norms(arr)))
        if smallest < MIN_TOKEN_NORM:
            raise DegenerateInputError(
                f"token row collapsed to (near) zero norm {smallest:.3e}", value=smallest
            )
        object.__setattr__(self, "tokens", arr)

    @property
    def count(self) -> int:
        return self.tokens.shape[-2]

    @property
    def channels(self) -> int:
        return self.tokens.shape[-1]

    @classmethod
    def init(cls, count: int, channels: int, rng: np.random.Generator) -> "TokenBank":
        """Seeded spherical draws scaled to unit norm."""
        if count < 1 or channels < 1:
            raise ContractViolation(f"TokenBank needs K >= 1 and C >= 1, got {count}, {channels}")
        raw = rng.standard_normal((count, channels))
        norms = row_l2_norms(raw)
        # a zero draw is practically impossible; replace it with a basis vector
        raw[norms == 0.0, 0] = 1.0
        unit, _ = normalize_rows(raw)
        return cls(tokens=unit)


@dataclass
class DmqaParams:
    """Learnable blend weights, token-update MLP and loop settings.

    ``mode`` selects the reliability used both inside the loop and at the end:
    ``"combined"`` blends L and D with α (loop) and β (final), ``"magnitude"``
    uses L alone and ``"direction"`` uses D alone.
    """

    alpha_raw: float
    beta_raw: float
    mlp: TwoLayerMlp
    epsilon: float = DEFAULT_EPSILON
    iterations: int = DEFAULT_ITERATIONS
    mode: str = "combined"

    def __post_init__(self) -> None:
        if not self.epsilon > 0.0:
            raise ContractViolation(f"epsilon must be positive, got {self.epsilon}")
        if self.iterations < 1:
            raise ContractViolation(f"iterations must be >= 1, got {self.iterations}")
        if self.mode not in RELIABILITY_MODES:
            raise ContractViolation(f"unknown reliability mode {self.mode!r}")

    @property
    def alpha(self) -> float:
        return float(logistic(self.alpha_raw))

    @property
    def beta(self) -> float:
        return float(logistic(self.beta_raw))

    def loop_weight(self) -> float:
        return _mode_weight(self.mode, self.alpha)

    def final_weight(self) -> float:
        return _mode_weight(self.mode, self.beta)

    @classmethod
    def init(
        cls,
        channels: int,
        rng: np.random.Generator,
        hidden: Optional[int] = None,
        alpha_init: float = 0.5,
        beta_init: float = 0.5,
        epsilon: float = DEFAULT_EPSILON,
        iterations: int = DEFAULT_ITERATIONS,
        mode: str = "combined",
        output_scale: float = 0.0,
    ) -> "DmqaParams":
        mlp = TwoLayerMlp.init(channels, hidden or 2 * channels, channels, rng, output_scale)
        return cls(
            alpha_raw=logit(alpha_init),
            beta_raw=logit(beta_init),
            mlp=mlp,
            epsilon=epsilon,
            iterations=iterations,
            mode=mode,
        )


def _mode_weight(mode: str, learned: float) -> float:
    if mode == "magnitude":
        return 1.0
    if mode == "direction":
        return 0.0
    return learned


@dataclass
class IterationTrace:
    magnitude: np.ndarray
    direction: np.ndarray
    combined: np.ndarray


@dataclass
class ReliabilityResult:
    """Per-position scores, each shaped like the feature map minus channels."""

    magnitude: np.ndarray
    direction: np.ndarray
    combined: np.ndarray
    final_tokens: TokenBank
    trace: Optional[list[IterationTrace]] = field(default=None)


def _check_channels(f: np.ndarray, tokens: np.ndarray) -> None:
    if f.shape[-1] != tokens.shape[-1]:
        raise ContractViolation(
            f"channel mismatch: features have {f.shape[-1]}, tokens have {tokens.shape[-1]}"
        )


def _tokens(t: Union[TokenBank, np.ndarray]) -> np.ndarray:
    return t.tokens if isinstance(t, TokenBank) else np.asarray(t, dtype=np.float64)


def token_attention(f: ArrayOrMap, t: Union[TokenBank, np.ndarray]) -> np.ndarray:
    """Per-position softmax over tokens of scaled dot products, ``(..., N, K)``."""
    f = _values(f)
    tokens = _tokens(t)
    _check_channels(f, tokens)
    logits = (f @ np.swapaxes(tokens, -1, -2)) / np.sqrt(f.shape[-1])
    return softmax(logits, axis=-1)


def magnitude_reliability(
    f: ArrayOrMap,
    t: Union[TokenBank, np.ndarray],
    w: np.ndarray,
    epsilon: float = DEFAULT_EPSILON,
) -> np.ndarray:
    """Complement of the normalized |‖F(i)‖ − expected norm| deviation.

    The normalizing maximum is taken over positions of each sample separately.

    Args:
        f: ``(..., N, C)`` features.
        t: Tokens whose norms, weighted by ``w``, give the expected norm.
        w: ``(..., N, K)`` attention from :func:`token_attention`.
        epsilon: Added to the per-sample maximum.

    Returns:
        ``(..., N)`` scores in ``[0, 1]``.
    """
    f = _values(f)
    tokens = _tokens(t)
    expected = np.sum(w * row_l2_norms(tokens)[..., None, :], axis=-1)
    deviation = np.abs(row_l2_norms(f) - expected)
    scale = np.max(deviation, axis=-1, keepdims=True) + epsilon
    return 1.0 - deviation / scale


def directional_reliability(f: ArrayOrMap, t: Union[TokenBank, np.ndarray]) -> np.ndarray:
    """Best cosine alignment with any token, clamped to [0, 1]; zero features score 0."""
    f = _values(f)
    tokens = _tokens(t)
    _check_channels(f, tokens)
    unit_f, _ = normalize_rows(f)
    unit_t, _ = normalize_rows(tokens)
    cosine = unit_f @ np.swapaxes(unit_t, -1, -2)
    return np.clip(np.max(cosine, axis=-1), 0.0, 1.0)


def combine_reliability(l: np.ndarray, d: np.ndarray, weight: float) -> np.ndarray:
    """``weight * l + (1 - weight) * d``."""
    return weight * np.asarray(l) + (1.0 - weight) * np.asarray(d)


def token_update(
    f: ArrayOrMap,
    t: TokenBank,
    r: np.ndarray,
    params: DmqaParams,
) -> TokenBank:
    """Reliability-modulated token→position attention, MLP, residual add.

    Args:
        f: ``(..., N, C)`` features.
        t: Current tokens.
        r: ``(..., N)`` reliability scaling each position's attention logit.
        params: Supplies the refinement MLP.

    Returns:
        Tokens of the next iteration.
    """
    f = _values(f)
    tokens = t.tokens
    _check_channels(f, tokens)
    logits = (tokens @ np.swapaxes(f, -1, -2)) / np.sqrt(f.shape[-1])
    attention = softmax(logits * np.asarray(r)[..., None, :], axis=-1)
    aggregated = attention @ f
    return TokenBank(tokens=tokens + params.mlp(aggregated), iteration_index=t.iteration_index + 1)


def dmqa_assess(
    f: ArrayOrMap,
    t0: TokenBank,
    params: DmqaParams,
    trace: bool = False,
) -> ReliabilityResult:
    """Run ``params.iterations`` refinement rounds and score with the final tokens.

    In-loop rounds combine L and D with ``params.loop_weight()``; the final
    score uses ``params.final_weight()``.

    Args:
        f: ``(N, C)`` or batched ``(B, N, C)`` features.
        t0: Initial tokens.
        params: Learned weights, iteration count, epsilon and mode.
        trace: Keep per-iteration L, D and R.

    Returns:
        Final L, D, R, the refined tokens and the optional trace.
    """
    f = _values(f)
    tokens = t0
    history: Optional[list[IterationTrace]] = [] if trace else None
    loop_weight = params.loop_weight()
    for _ in range(params.iterations):
        w = token_attention(f, tokens)
        l = magnitude_reliability(f, tokens, w, params.epsilon)
        d = directional_reliability(f, tokens)
        r = combine_reliability(l, d, loop_weight)
        if history is not None:
            history.append(IterationTrace(magnitude=l, direction=d, combined=r))
        tokens = token_update(f, tokens, r, params)

    w = token_attention(f, tokens)
    l = magnitude_reliability(f, tokens, w, params.epsilon)
    d = directional_reliability(f, tokens)
    r = combine_reliability(l, d, params.final_weight())
    return ReliabilityResult(magnitude=l, direction=d, combined=r, final_tokens=tokens, trace=history)
