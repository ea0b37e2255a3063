"""Reverse-mode gradients of the reliability + fusion + probe pipeline.

The operation graph is fixed for a given variant, so the backward pass is written
out by hand stage by stage (probe -> fusion -> reliability loop) instead of
recording a general tape. Non-smooth points take the branch selected in the
forward pass: the max over tokens in the directional score, the max over
positions in the magnitude normalizer and the absolute value; the [0, 1] clamp
passes no gradient outside the open interval.

The projector is optimized directly on the orthogonal group: the Euclidean
gradient is projected onto the tangent space and the step is retracted with a
sign-normalized QR factorization.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from quality_fusion.dmqa import DmqaParams, ReliabilityResult, TokenBank
from quality_fusion.errors import ContractViolation, DegenerateInputError, DegenerateStepError, NonFiniteError
from quality_fusion.numerics import (
    TwoLayerMlp,
    logistic,
    logit,
    normalize_rows,
    normalize_rows_backward,
    qr_orthonormalize,
    row_l2_norms,
    softmax,
    softmax_backward,
)
from quality_fusion.ocnf import FusionParams, OrthoProjector, fusion_weights, random_projector

logger = logging.getLogger(__name__)

VARIANTS = ("mean_baseline", "dmqa_only", "ocnf_only", "full")
GROUPS = (
    "tokens_r",
    "tokens_s",
    "dmqa_w1",
    "dmqa_b1",
    "dmqa_w2",
    "dmqa_b2",
    "alpha_raw",
    "beta_raw",
    "fusion_w1",
    "fusion_b1",
    "fusion_w2",
    "fusion_b2",
    "projector",
    "probe_w",
    "probe_b",
)
RELATIVE_ERROR_FLOOR = 1e-8
# groups far below the overall gradient scale are judged against that scale
GRADIENT_SCALE_FRACTION = 1e-3
MAX_STEP_HALVINGS = 20


# ---------------------------------------------------------------------------
# Parameters, batches, settings
# ---------------------------------------------------------------------------


@dataclass
class ParamSet:
    tokens_r: np.ndarray
    tokens_s: np.ndarray
    dmqa_w1: np.ndarray
    dmqa_b1: np.ndarray
    dmqa_w2: np.ndarray
    dmqa_b2: np.ndarray
    alpha_raw: np.ndarray
    beta_raw: np.ndarray
    fusion_w1: np.ndarray
    fusion_b1: np.ndarray
    fusion_w2: np.ndarray
    fusion_b2: np.ndarray
    projector: np.ndarray
    probe_w: np.ndarray
    probe_b: np.ndarray
    lift: np.ndarray

    def groups(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in GROUPS}

    def replace(self, **updates: np.ndarray) -> "ParamSet":
        return dataclasses.replace(self, **updates)

    def copy(self) -> "ParamSet":
        return dataclasses.replace(
            self, **{f.name: np.array(getattr(self, f.name), copy=True) for f in dataclasses.fields(self)}
        )

    @property
    def channels(self) -> int:
        return self.tokens_r.shape[-1]

    def dmqa_mlp(self) -> TwoLayerMlp:
        return TwoLayerMlp(w1=self.dmqa_w1, b1=self.dmqa_b1, w2=self.dmqa_w2, b2=self.dmqa_b2)

    def fusion_mlp(self) -> TwoLayerMlp:
        return TwoLayerMlp(w1=self.fusion_w1, b1=self.fusion_b1, w2=self.fusion_w2, b2=self.fusion_b2)

    def dmqa_params(self, settings: "PipelineSettings") -> DmqaParams:
        return DmqaParams(
            alpha_raw=float(self.alpha_raw),
            beta_raw=float(self.beta_raw),
            mlp=self.dmqa_mlp(),
            epsilon=settings.epsilon,
            iterations=settings.iterations,
            mode=settings.mode,
        )

    def fusion_params(self) -> FusionParams:
        return FusionParams(mlp=self.fusion_mlp())

    def ortho_projector(self) -> OrthoProjector:
        return OrthoProjector(joint=self.projector)


def init_params(
    channels: int,
    tokens: int,
    num_classes: int,
    rng: np.random.Generator,
    hidden: Optional[int] = None,
    alpha_init: float = 0.5,
    beta_init: float = 0.5,
    output_scale: float = 0.0,
) -> ParamSet:
    """Seeded initial parameters. ``output_scale`` = 0 zero-initializes both MLP output layers."""
    tokens_r = TokenBank.init(tokens, channels, rng).tokens
    tokens_s = TokenBank.init(tokens, channels, rng).tokens
    dmqa = DmqaParams.init(
        channels, rng, hidden=hidden, alpha_init=alpha_init, beta_init=beta_init, output_scale=output_scale
    )
    fusion = FusionParams.init(channels, rng, output_scale=output_scale)
    projector = random_projector(channels, rng)
    lift = qr_orthonormalize(rng.standard_normal((2 * channels, channels)))
    probe_w = rng.standard_normal((2 * channels, num_classes)) / np.sqrt(2 * channels)
    return ParamSet(
        tokens_r=tokens_r,
        tokens_s=tokens_s,
        dmqa_w1=dmqa.mlp.w1,
        dmqa_b1=dmqa.mlp.b1,
        dmqa_w2=dmqa.mlp.w2,
        dmqa_b2=dmqa.mlp.b2,
        alpha_raw=np.array(logit(alpha_init)),
        beta_raw=np.array(logit(beta_init)),
        fusion_w1=fusion.mlp.w1,
        fusion_b1=fusion.mlp.b1,
        fusion_w2=fusion.mlp.w2,
        fusion_b2=fusion.mlp.b2,
        projector=projector.joint,
        probe_w=probe_w,
        probe_b=np.zeros(num_classes),
        lift=lift,
    )


@dataclass(frozen=True)
class Batch:
    optical: np.ndarray
    sar: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.optical.shape != self.sar.shape or self.optical.ndim != 3:
            raise ContractViolation(f"modality shapes differ: {self.optical.shape} vs {self.sar.shape}")
        if self.labels.shape != (self.optical.shape[0],):
            raise ContractViolation(f"labels shape {self.labels.shape} does not match batch")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, index: np.ndarray) -> "Batch":
        return Batch(optical=self.optical[index], sar=self.sar[index], labels=self.labels[index])


@dataclass(frozen=True)
class PipelineSettings:
    variant: str = "full"
    iterations: int = 4
    epsilon: float = 1e-6
    mode: str = "combined"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def uses_dmqa(self) -> bool:
        return self.variant in ("dmqa_only", "full")

    @property
    def uses_ocnf(self) -> bool:
        return self.variant in ("ocnf_only", "full")


def _finite(operation: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(operation)


# ---------------------------------------------------------------------------
# Reliability scoring: forward with cache, backward w.r.t. tokens
# ---------------------------------------------------------------------------


@dataclass
class _ScoreCache:
    attention: np.ndarray
    token_norms: np.ndarray
    unit_tokens: np.ndarray
    deviation: np.ndarray
    scale: np.ndarray
    worst: np.ndarray
    cosine: np.ndarray
    best_token: np.ndarray
    raw_direction: np.ndarray
    magnitude: np.ndarray
    direction: np.ndarray


def _score_forward(f: np.ndarray, t: np.ndarray, epsilon: float) -> _ScoreCache:
    root_c = np.sqrt(f.shape[-1])
    attention = softmax((f @ np.swapaxes(t, -1, -2)) / root_c, axis=-1)
    unit_t, token_norms = normalize_rows(t)
    expected = np.sum(attention * token_norms[:, None, :], axis=-1)
    unit_f, feature_norms = normalize_rows(f)
    deviation = feature_norms - expected
    delta = np.abs(deviation)
    worst = np.argmax(delta, axis=-1)
    scale = np.max(delta, axis=-1) + epsilon
    cosine = unit_f @ np.swapaxes(unit_t, -1, -2)
    best_token = np.argmax(cosine, axis=-1)
    raw_direction = np.max(cosine, axis=-1)
    return _ScoreCache(
        attention=attention,
        token_norms=token_norms,
        unit_tokens=unit_t,
        deviation=deviation,
        scale=scale,
        worst=worst,
        cosine=cosine,
        best_token=best_token,
        raw_direction=raw_direction,
        magnitude=1.0 - delta / scale[:, None],
        direction=np.clip(raw_direction, 0.0, 1.0),
    )


def _score_backward(
    f: np.ndarray,
    t: np.ndarray,
    cache: _ScoreCache,
    d_magnitude: np.ndarray,
    d_direction: np.ndarray,
) -> np.ndarray:
    """Gradient w.r.t. the ``(B, K, C)`` tokens."""
    batch = np.arange(f.shape[0])
    root_c = np.sqrt(f.shape[-1])
    delta = np.abs(cache.deviation)

    # L = 1 - delta / (max_j delta_j + eps)
    d_hat = -d_magnitude
    d_delta = d_hat / cache.scale[:, None]
    d_scale = -np.sum(d_hat * delta, axis=-1) / cache.scale**2
    d_delta[batch, cache.worst] += d_scale
    d_expected = -d_delta * np.sign(cache.deviation)

    d_attention = d_expected[..., None] * cache.token_norms[:, None, :]
    d_token_norms = np.einsum("bn,bnk->bk", d_expected, cache.attention)
    d_logits = softmax_backward(cache.attention, d_attention, axis=-1)
    d_t = np.einsum("bnk,bnc->bkc", d_logits, f) / root_c
    d_t += cache.unit_tokens * d_token_norms[..., None]

    # D = clamp(max_k cos, 0, 1)
    live = (cache.raw_direction > 0.0) & (cache.raw_direction < 1.0)
    d_cosine = np.zeros_like(cache.cosine)
    rows, cols = np.nonzero(live)
    d_cosine[rows, cols, cache.best_token[rows, cols]] = d_direction[rows, cols]
    unit_f, _ = normalize_rows(f)
    d_unit_t = np.einsum("bnk,bnc->bkc", d_cosine, unit_f)
    d_t += normalize_rows_backward(cache.unit_tokens, cache.token_norms, d_unit_t)
    return d_t


# ---------------------------------------------------------------------------
# Token update: forward with cache, backward
# ---------------------------------------------------------------------------


@dataclass
class _UpdateCache:
    logits: np.ndarray
    attention: np.ndarray
    aggregated: np.ndarray
    hidden: np.ndarray


def _update_forward(
    f: np.ndarray, t: np.ndarray, r: np.ndarray, mlp: TwoLayerMlp
) -> tuple[np.ndarray, _UpdateCache]:
    logits = (t @ np.swapaxes(f, -1, -2)) / np.sqrt(f.shape[-1])
    attention = softmax(logits * r[:, None, :], axis=-1)
    aggregated = attention @ f
    out, hidden = mlp.forward(aggregated)
    return t + out, _UpdateCache(logits=logits, attention=attention, aggregated=aggregated, hidden=hidden)


def _update_backward(
    f: np.ndarray,
    r: np.ndarray,
    mlp: TwoLayerMlp,
    cache: _UpdateCache,
    d_new: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Returns ``(d_tokens, d_reliability, mlp_grads)``."""
    d_aggregated, mlp_grads = mlp.backward(cache.aggregated, cache.hidden, d_new)
    d_attention = d_aggregated @ np.swapaxes(f, -1, -2)
    d_modulated = softmax_backward(cache.attention, d_attention, axis=-1)
    d_r = np.sum(d_modulated * cache.logits, axis=-2)
    d_logits = d_modulated * r[:, None, :]
    d_t = d_new + (d_logits @ f) / np.sqrt(f.shape[-1])
    return d_t, d_r, mlp_grads


# ---------------------------------------------------------------------------
# Whole reliability loop
# ---------------------------------------------------------------------------


@dataclass
class _DmqaTape:
    tokens: list[np.ndarray] = field(default_factory=list)
    scores: list[_ScoreCache] = field(default_factory=list)
    reliabilities: list[np.ndarray] = field(default_factory=list)
    updates: list[_UpdateCache] = field(default_factory=list)
    final: Optional[_ScoreCache] = None
    combined: Optional[np.ndarray] = None


def _weights(params: ParamSet, mode: str) -> tuple[float, float]:
    alpha = float(logistic(params.alpha_raw))
    beta = float(logistic(params.beta_raw))
    if mode == "magnitude":
        return 1.0, 1.0
    if mode == "direction":
        return 0.0, 0.0
    return alpha, beta


def _dmqa_forward(
    f: np.ndarray, tokens0: np.ndarray, params: ParamSet, settings: PipelineSettings
) -> _DmqaTape:
    mlp = params.dmqa_mlp()
    loop_w, final_w = _weights(params, settings.mode)
    tape = _DmqaTape()
    t = np.broadcast_to(tokens0, (f.shape[0],) + tokens0.shape).copy()
    for step in range(settings.iterations):
        score = _score_forward(f, t, settings.epsilon)
        r = loop_w * score.magnitude + (1.0 - loop_w) * score.direction
        t_next, update = _update_forward(f, t, r, mlp)
        _finite(f"token_update[{step}]", t_next)
        if np.min(row_l2_norms(t_next)) < 1e-8:
            raise DegenerateInputError(f"token row collapsed during update {step}")
        tape.tokens.append(t)
        tape.scores.append(score)
        tape.reliabilities.append(r)
        tape.updates.append(update)
        t = t_next
    tape.tokens.append(t)
    tape.final = _score_forward(f, t, settings.epsilon)
    tape.combined = final_w * tape.final.magnitude + (1.0 - final_w) * tape.final.direction
    _finite("dmqa_assess", tape.combined)
    return tape


def _dmqa_backward(
    f: np.ndarray,
    tape: _DmqaTape,
    params: ParamSet,
    settings: PipelineSettings,
    d_combined: np.ndarray,
    grads: dict[str, np.ndarray],
    token_group: str,
) -> None:
    mlp = params.dmqa_mlp()
    loop_w, final_w = _weights(params, settings.mode)
    learned = settings.mode == "combined"
    final = tape.final
    assert final is not None

    if learned:
        grads["beta_raw"] += np.sum(d_combined * (final.magnitude - final.direction)) * final_w * (1.0 - final_w)
    d_t = _score_backward(
        f, tape.tokens[-1], final, final_w * d_combined, (1.0 - final_w) * d_combined
    )
    d_loop_w = 0.0
    for step in reversed(range(settings.iterations)):
        score = tape.scores[step]
        d_t_prev, d_r, mlp_grads = _update_backward(
            f, tape.reliabilities[step], mlp, tape.updates[step], d_t
        )
        for name, g in mlp_grads.items():
            grads[f"dmqa_{name}"] += g
        d_loop_w += float(np.sum(d_r * (score.magnitude - score.direction)))
        d_t = d_t_prev + _score_backward(
            f, tape.tokens[step], score, loop_w * d_r, (1.0 - loop_w) * d_r
        )
    if learned:
        grads["alpha_raw"] += d_loop_w * loop_w * (1.0 - loop_w)
    grads[token_group] += np.sum(d_t, axis=0)


def reliability_from_tape(tape: _DmqaTape, iterations: int) -> ReliabilityResult:
    final = tape.final
    assert final is not None and tape.combined is not None
    return ReliabilityResult(
        magnitude=final.magnitude,
        direction=final.direction,
        combined=tape.combined,
        final_tokens=TokenBank(tokens=tape.tokens[-1], iteration_index=iterations),
    )


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineOutput:
    loss: float
    logits: np.ndarray
    fused: np.ndarray
    reliability_r: Optional[ReliabilityResult] = None
    reliability_s: Optional[ReliabilityResult] = None
    gamma_r: Optional[np.ndarray] = None
    gamma_s: Optional[np.ndarray] = None


@dataclass
class _PipelineTape:
    dmqa_r: Optional[_DmqaTape] = None
    dmqa_s: Optional[_DmqaTape] = None
    r_r: Optional[np.ndarray] = None
    r_s: Optional[np.ndarray] = None
    pooled_r: Optional[np.ndarray] = None
    pooled_s: Optional[np.ndarray] = None
    hidden_r: Optional[np.ndarray] = None
    hidden_s: Optional[np.ndarray] = None
    gamma_r: Optional[np.ndarray] = None
    gamma_s: Optional[np.ndarray] = None
    projected_r: Optional[np.ndarray] = None
    projected_s: Optional[np.ndarray] = None
    pooled: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    probs = softmax(logits, axis=-1)
    top = np.max(logits, axis=-1)
    log_norm = top + np.log(np.sum(np.exp(logits - top[:, None]), axis=-1))
    picked = logits[np.arange(labels.shape[0]), labels]
    return float(np.mean(log_norm - picked)), probs


def _forward(
    params: ParamSet, batch: Batch, settings: PipelineSettings
) -> tuple[PipelineOutput, _PipelineTape]:
    f_r, f_s = batch.optical, batch.sar
    tape = _PipelineTape()
    if settings.uses_dmqa:
        tape.dmqa_r = _dmqa_forward(f_r, params.tokens_r, params, settings)
        tape.dmqa_s = _dmqa_forward(f_s, params.tokens_s, params, settings)
        tape.r_r, tape.r_s = tape.dmqa_r.combined, tape.dmqa_s.combined
    else:
        tape.r_r = np.ones(f_r.shape[:2])
        tape.r_s = np.ones(f_s.shape[:2])

    if settings.uses_ocnf:
        c = params.channels
        fusion = params.fusion_mlp()
        tape.pooled_r = np.mean(tape.r_r, axis=-1)
        tape.pooled_s = np.mean(tape.r_s, axis=-1)
        rt_r, tape.hidden_r = fusion.forward(tape.pooled_r[:, None])
        rt_s, tape.hidden_s = fusion.forward(tape.pooled_s[:, None])
        tape.gamma_r, tape.gamma_s = fusion_weights(rt_r, rt_s)
        w_r = params.projector[:, :c] / np.sqrt(c)
        w_s = params.projector[:, c:] / np.sqrt(c)
        tape.projected_r = f_r @ w_r.T
        tape.projected_s = f_s @ w_s.T
        fused = tape.gamma_r[:, None, :] * tape.projected_r + tape.gamma_s[:, None, :] * tape.projected_s
    else:
        gated = 0.5 * (tape.r_r[..., None] * f_r + tape.r_s[..., None] * f_s)
        fused = gated @ params.lift.T
    _finite("fusion", fused)

    tape.pooled = np.mean(fused, axis=1)
    logits = tape.pooled @ params.probe_w + params.probe_b
    loss, tape.probs = _cross_entropy(logits, batch.labels)
    _finite("probe", logits, np.array(loss))
    output = PipelineOutput(
        loss=loss, logits=logits, fused=fused, gamma_r=tape.gamma_r, gamma_s=tape.gamma_s
    )
    if settings.uses_dmqa:
        output.reliability_r = reliability_from_tape(tape.dmqa_r, settings.iterations)
        output.reliability_s = reliability_from_tape(tape.dmqa_s, settings.iterations)
    return output, tape


def pipeline_forward(params: ParamSet, batch: Batch, settings: PipelineSettings) -> PipelineOutput:
    return _forward(params, batch, settings)[0]


def pipeline_backward(
    params: ParamSet, batch: Batch, settings: PipelineSettings
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients for every group (zeros for groups the variant skips)."""
    output, tape = _forward(params, batch, settings)
    grads = {name: np.zeros_like(value, dtype=np.float64) for name, value in params.groups().items()}
    f_r, f_s = batch.optical, batch.sar
    size, positions = batch.labels.shape[0], f_r.shape[1]

    d_logits = tape.probs.copy()
    d_logits[np.arange(size), batch.labels] -= 1.0
    d_logits /= size
    grads["probe_w"] = tape.pooled.T @ d_logits
    grads["probe_b"] = d_logits.sum(axis=0)
    d_fused = np.broadcast_to((d_logits @ params.probe_w.T)[:, None, :] / positions, output.fused.shape)

    d_r_r: Optional[np.ndarray] = None
    d_r_s: Optional[np.ndarray] = None
    if settings.uses_ocnf:
        c = params.channels
        fusion = params.fusion_mlp()
        d_gamma_r = np.sum(d_fused * tape.projected_r, axis=1)
        d_gamma_s = np.sum(d_fused * tape.projected_s, axis=1)
        d_w_r = np.einsum("bnd,bnc->dc", tape.gamma_r[:, None, :] * d_fused, f_r)
        d_w_s = np.einsum("bnd,bnc->dc", tape.gamma_s[:, None, :] * d_fused, f_s)
        grads["projector"] = np.concatenate([d_w_r, d_w_s], axis=1) / np.sqrt(c)

        # gamma_r = sigmoid(rt_r - rt_s), gamma_s = 1 - gamma_r
        d_diff = (d_gamma_r - d_gamma_s) * tape.gamma_r * tape.gamma_s
        d_x_r, g_r = fusion.backward(tape.pooled_r[:, None], tape.hidden_r, d_diff)
        d_x_s, g_s = fusion.backward(tape.pooled_s[:, None], tape.hidden_s, -d_diff)
        for name in g_r:
            grads[f"fusion_{name}"] = g_r[name] + g_s[name]
        d_r_r = np.broadcast_to(d_x_r[:, :1] / positions, tape.r_r.shape)
        d_r_s = np.broadcast_to(d_x_s[:, :1] / positions, tape.r_s.shape)
    elif settings.uses_dmqa:
        d_gated = d_fused @ params.lift
        d_r_r = 0.5 * np.sum(d_gated * f_r, axis=-1)
        d_r_s = 0.5 * np.sum(d_gated * f_s, axis=-1)

    if settings.uses_dmqa:
        _dmqa_backward(f_r, tape.dmqa_r, params, settings, d_r_r, grads, "tokens_r")
        _dmqa_backward(f_s, tape.dmqa_s, params, settings, d_r_s, grads, "tokens_s")
    return output.loss, grads


def boundary_distance(params: ParamSet, batch: Batch, settings: PipelineSettings) -> float:
    """Smallest distance of any forward quantity to a non-differentiable point.

    Covers the |.| kink of the magnitude deviation, ties in the positional max,
    ties in the token max and the clamp edges of the directional score.
    """
    if not settings.uses_dmqa:
        return float("inf")
    _, tape = _forward(params, batch, settings)
    distances = [float("inf")]
    for dmqa_tape in (tape.dmqa_r, tape.dmqa_s):
        for score in dmqa_tape.scores + [dmqa_tape.final]:
            delta = np.abs(score.deviation)
            distances.append(float(np.min(delta)))
            if delta.shape[-1] > 1:
                top2 = np.sort(delta, axis=-1)[:, -2:]
                distances.append(float(np.min(top2[:, 1] - top2[:, 0])))
            distances.append(float(np.min(np.abs(score.raw_direction))))
            distances.append(float(np.min(np.abs(1.0 - score.raw_direction))))
            if score.cosine.shape[-1] > 1:
                top2 = np.sort(score.cosine, axis=-1)[..., -2:]
                distances.append(float(np.min(top2[..., 1] - top2[..., 0])))
    return min(distances)


# ---------------------------------------------------------------------------
# Objectives, backward, finite-difference check
# ---------------------------------------------------------------------------


class Objective(Protocol):
    def value(self, params: ParamSet, batch: Optional[Batch]) -> float: ...

    def value_and_grad(
        self, params: ParamSet, batch: Optional[Batch]
    ) -> tuple[float, dict[str, np.ndarray]]: ...


@dataclass(frozen=True)
class PipelineObjective:
    """Probe cross-entropy of the fused features for one variant."""

    settings: PipelineSettings

    def value(self, params: ParamSet, batch: Optional[Batch]) -> float:
        return pipeline_forward(params, batch, self.settings).loss

    def value_and_grad(self, params: ParamSet, batch: Optional[Batch]) -> tuple[float, dict[str, np.ndarray]]:
        return pipeline_backward(params, batch, self.settings)


@dataclass(frozen=True)
class QuadraticObjective:
    """``0.5 * sum ||x||^2`` over ``groups`` (all groups when None)."""

    groups: Optional[tuple[str, ...]] = None

    def _selected(self, name: str) -> bool:
        return self.groups is None or name in self.groups

    def value(self, params: ParamSet, batch: Optional[Batch] = None) -> float:
        return float(
            sum(0.5 * np.sum(v * v) for name, v in params.groups().items() if self._selected(name))
        )

    def value_and_grad(self, params: ParamSet, batch: Optional[Batch] = None) -> tuple[float, dict[str, np.ndarray]]:
        grads = {
            name: (np.array(v, dtype=np.float64, copy=True) if self._selected(name) else np.zeros_like(v))
            for name, v in params.groups().items()
        }
        return self.value(params), grads


def backward(params: ParamSet, batch: Optional[Batch], objective: Objective) -> dict[str, np.ndarray]:
    _, grads = objective.value_and_grad(params, batch)
    for name, g in grads.items():
        _finite(f"backward:{name}", g)
    return grads


@dataclass
class GradReport:
    max_relative_error: dict[str, float]
    h: float
    objective_value: float
    coordinates_checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "objective": self.objective_value,
            "max_relative_error": dict(sorted(self.max_relative_error.items())),
            "coordinates_checked": dict(sorted(self.coordinates_checked.items())),
            "max_error": self.max_error,
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = RELATIVE_ERROR_FLOOR) -> float:
    """``max |a - n|`` over a group, relative to the group's largest gradient entry.

    Args:
        analytic: Gradient entries under test
        numeric: Central-difference estimates for the same entries
        floor: Smallest admissible denominator

    Returns:
        ``max |a - n| / max(max |a|, max |n|, floor)``, 0.0 for an empty group
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / scale


def fd_check(
    params: ParamSet,
    batch: Optional[Batch],
    objective: Objective,
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
    groups: Optional[Sequence[str]] = None,
    analytic: Optional[dict[str, np.ndarray]] = None,
) -> GradReport:
    """Central differences per coordinate against the analytic gradient.

    ``max_coords`` subsamples coordinates per group with a seeded generator.
    ``analytic`` overrides the gradient under test. Each group's error is taken
    relative to its own largest entry, floored at ``GRADIENT_SCALE_FRACTION``
    of the largest entry over all checked groups: a near-zero scalar group is
    otherwise dominated by the ``eps / h`` roundoff of the difference quotient.
    """
    if not h > 0.0:
        raise ContractViolation(f"step size must be positive, got {h}")
    value = objective.value(params, batch)
    if analytic is None:
        analytic = backward(params, batch, objective)
    rng = np.random.default_rng(seed)
    pairs: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name in groups or GROUPS:
        base = np.asarray(getattr(params, name), dtype=np.float64)
        size = base.size
        coords = np.arange(size)
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        numeric = np.empty(coords.shape[0])
        for slot, flat in enumerate(coords):
            plus = base.copy()
            minus = base.copy()
            plus.flat[flat] += h
            minus.flat[flat] -= h
            f_plus = objective.value(params.replace(**{name: plus}), batch)
            f_minus = objective.value(params.replace(**{name: minus}), batch)
            numeric[slot] = (f_plus - f_minus) / (2.0 * h)
        exact = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[coords]
        pairs[name] = (exact, numeric)

    overall = max(
        (float(np.max(np.abs(np.concatenate(pair)))) for pair in pairs.values() if pair[0].size), default=0.0
    )
    floor = max(RELATIVE_ERROR_FLOOR, GRADIENT_SCALE_FRACTION * overall)
    errors: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, (exact, numeric) in pairs.items():
        errors[name] = relative_error(exact, numeric, floor)
        counts[name] = int(exact.size)
        logger.debug("fd_check %s: max rel err %.3e over %d coords", name, errors[name], counts[name])
    return GradReport(max_relative_error=errors, h=h, objective_value=value, coordinates_checked=counts)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def tangent_projection(q: np.ndarray, euclid_grad: np.ndarray) -> np.ndarray:
    """``G - Q sym(Q^T G)``: component of G tangent to the orthogonal group at Q."""
    m = q.T @ euclid_grad
    return euclid_grad - q @ (0.5 * (m + m.T))


def retract_projector(q: np.ndarray, euclid_grad: np.ndarray, lr: float) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    drift = float(np.linalg.norm(q.T @ q - np.eye(q.shape[0])))
    if drift > 1e-8:
        raise ContractViolation(f"projector is not orthogonal (drift {drift:.3e})")
    step = q - lr * tangent_projection(q, np.asarray(euclid_grad, dtype=np.float64))
    try:
        return qr_orthonormalize(step)
    except DegenerateInputError as err:
        raise DegenerateStepError(f"retraction lost rank at lr={lr}: {err}", value=err.value) from err


def sgd_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float) -> ParamSet:
    """Plain gradient descent; the projector moves along the orthogonal group."""
    if lr == 0.0:
        return params.copy()
    updates: dict[str, np.ndarray] = {}
    for name, value in params.groups().items():
        g = grads.get(name)
        if g is None or not np.any(g):
            updates[name] = np.array(value, copy=True)
            continue
        if name == "projector":
            step = lr
            for _ in range(MAX_STEP_HALVINGS):
                try:
                    updates[name] = retract_projector(value, g, step)
                    break
                except DegenerateStepError:
                    step *= 0.5
                    logger.warning("projector retraction degenerate, halving step to %.3e", step)
            else:
                raise DegenerateStepError(f"retraction failed after {MAX_STEP_HALVINGS} halvings")
        else:
            updates[name] = value - lr * g
    return params.replace(**updates)
