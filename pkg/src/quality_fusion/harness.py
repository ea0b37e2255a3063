"""Training, evaluation and sweeps on the synthetic two-view benchmark.

Every variant is scored by a linear probe on mean-pooled fused features and
trained with plain gradient descent on the probe's cross-entropy:

* ``mean_baseline`` averages the raw views and lifts them to 2C channels with a
  fixed random orthonormal map;
* ``dmqa_only`` gates that average per position by the reliability scores;
* ``ocnf_only`` uses the orthogonal fusion with uniform reliabilities;
* ``full`` feeds reliability scores into the orthogonal fusion.

All variants of a sweep cell see the same data, schedules, initial parameters,
epochs and probe.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import anyio
import numpy as np

from quality_fusion.config import ExperimentConfig
from quality_fusion.dmqa import TokenBank, dmqa_assess
from quality_fusion.errors import ContractViolation, DivergenceError, NonFiniteError
from quality_fusion.graddiff import (
    GROUPS,
    Batch,
    GradReport,
    ParamSet,
    PipelineObjective,
    PipelineSettings,
    boundary_distance,
    fd_check,
    init_params,
    pipeline_backward,
    pipeline_forward,
    sgd_step,
)
from quality_fusion.missing import (
    AvailabilitySchedule,
    DegradationSpec,
    apply_missing,
    mix_seed,
    parse_policy,
    sample_availability,
)
from quality_fusion.numerics import dump_tensor, load_tensor
from quality_fusion.ocnf import save_projector
from quality_fusion.synth import SynthConfig, SynthDataset, gen_dataset

logger = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "variant",
    "policy",
    "mr",
    "seed",
    "accuracy",
    "mean_R_clean_opt",
    "mean_R_clean_sar",
    "mean_R_missing_opt",
    "mean_R_missing_sar",
    "final_loss",
)
HPARAM_COLUMNS = ("K", "I", "policy", "mr", "seed", "accuracy", "final_loss")

# stream ids mixed into the run seed
_INIT_STREAM = 1
_TRAIN_SCHEDULE_STREAM = 2
_TRAIN_DEGRADE_STREAM = 3
_SHUFFLE_STREAM = 4
_TEST_SCHEDULE_STREAM = 7
_TEST_DEGRADE_STREAM = 8
_GAP_STREAM = 9


def settings_for(cfg: ExperimentConfig, variant: str) -> PipelineSettings:
    return PipelineSettings(
        variant=variant, iterations=cfg.I, epsilon=cfg.epsilon, mode=cfg.reliability_mode
    )


def initial_params(cfg: ExperimentConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng(mix_seed(seed, _INIT_STREAM))
    return init_params(
        cfg.C,
        cfg.K,
        cfg.num_classes,
        rng,
        hidden=cfg.hidden,
        alpha_init=cfg.alpha_init,
        beta_init=cfg.beta_init,
    )


def dataset_for(cfg: ExperimentConfig, seed: int) -> SynthDataset:
    return gen_dataset(SynthConfig.from_experiment(cfg, seed=seed))


def missing_applied(
    batch: Batch,
    schedule: Optional[AvailabilitySchedule],
    policy: DegradationSpec,
) -> Batch:
    if schedule is None:
        return batch
    optical, sar = apply_missing(batch.optical, batch.sar, schedule, policy)
    return Batch(optical=optical.values, sar=sar.values, labels=batch.labels)


@dataclass
class TrainResult:
    params: ParamSet
    history: list[float]
    settings: PipelineSettings

    @property
    def final_loss(self) -> float:
        return self.history[-1] if self.history else float("nan")


def train(
    cfg: ExperimentConfig,
    variant: str,
    mr: float,
    policy: Union[str, DegradationSpec] = "zero",
    epochs: Optional[int] = None,
    lr: Optional[float] = None,
    seed: Optional[int] = None,
    dataset: Optional[SynthDataset] = None,
) -> TrainResult:
    """Train one variant; the availability schedule is resampled every epoch."""
    seed = cfg.seed if seed is None else seed
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    settings = settings_for(cfg, variant)
    data = dataset if dataset is not None else dataset_for(cfg, seed)
    spec = parse_policy(policy) if isinstance(policy, str) else policy
    params = initial_params(cfg, seed)
    history: list[float] = []
    train_split = data.train
    step = 0
    for epoch in range(epochs):
        schedule = sample_availability(len(train_split), mr, mix_seed(seed, epoch, _TRAIN_SCHEDULE_STREAM))
        epoch_spec = DegradationSpec(
            kind=spec.kind, severity=spec.severity, seed=mix_seed(seed, epoch, _TRAIN_DEGRADE_STREAM)
        )
        batch = missing_applied(train_split, schedule, epoch_spec)
        order = np.random.default_rng(mix_seed(seed, epoch, _SHUFFLE_STREAM)).permutation(len(batch))
        losses = []
        for start in range(0, len(batch), cfg.batch_size):
            mini = batch.take(order[start : start + cfg.batch_size])
            try:
                loss, grads = pipeline_backward(params, mini, settings)
            except NonFiniteError as err:
                raise DivergenceError(step, float("nan")) from err
            if not math.isfinite(loss):
                raise DivergenceError(step, loss)
            params = sgd_step(params, grads, lr)
            losses.append(loss * len(mini))
            step += 1
        history.append(float(np.sum(losses) / len(batch)))
        if (epoch + 1) % cfg.log_every == 0 or epoch == 0:
            logger.info("%s mr=%.2f %s epoch %d/%d loss=%.5f", variant, mr, spec.label, epoch + 1, epochs, history[-1])
    return TrainResult(params=params, history=history, settings=settings)


def evaluation_protocol(
    num_samples: int, mr: float, policy: Union[str, DegradationSpec], seed: int
) -> tuple[AvailabilitySchedule, DegradationSpec]:
    """Schedule and seeded degradation used for the test split of a run."""
    spec = parse_policy(policy) if isinstance(policy, str) else policy
    schedule = sample_availability(num_samples, mr, mix_seed(seed, _TEST_SCHEDULE_STREAM))
    return schedule, DegradationSpec(
        kind=spec.kind, severity=spec.severity, seed=mix_seed(seed, _TEST_DEGRADE_STREAM)
    )


@dataclass
class EvalMetrics:
    accuracy: float
    loss: float
    mean_reliability: dict[str, float] = field(default_factory=dict)


def _masked_mean(values: Optional[np.ndarray], mask: np.ndarray) -> float:
    if values is None or not np.any(mask):
        return float("nan")
    return float(np.mean(values[mask]))


def evaluate(
    params: ParamSet,
    batch: Batch,
    schedule: Optional[AvailabilitySchedule],
    policy: Union[str, DegradationSpec],
    settings: PipelineSettings,
) -> EvalMetrics:
    """Probe accuracy on the missing-applied split, plus reliability by availability.

    ``mean_reliability`` keys are ``clean_opt``, ``clean_sar``, ``missing_opt`` and
    ``missing_sar``; each averages R only over the slices with that status.
    """
    spec = parse_policy(policy) if isinstance(policy, str) else policy
    applied = missing_applied(batch, schedule, spec)
    output = pipeline_forward(params, applied, settings)
    predictions = np.argmax(output.logits, axis=-1)
    accuracy = float(np.mean(predictions == applied.labels))
    full = schedule if schedule is not None else AvailabilitySchedule.complete(len(batch))
    r_opt = output.reliability_r.combined if output.reliability_r is not None else None
    r_sar = output.reliability_s.combined if output.reliability_s is not None else None
    reliability = {
        "clean_opt": _masked_mean(r_opt, full.optical),
        "clean_sar": _masked_mean(r_sar, full.sar),
        "missing_opt": _masked_mean(r_opt, ~full.optical),
        "missing_sar": _masked_mean(r_sar, ~full.sar),
    }
    return EvalMetrics(accuracy=accuracy, loss=output.loss, mean_reliability=reliability)


def reliability_gap(
    params: ParamSet,
    batch: Batch,
    settings: PipelineSettings,
    sigma: float = 1.0,
    seed: int = 0,
    region: float = 0.5,
) -> dict[str, tuple[float, float]]:
    """Mean R per view on clean vs. gaussian-degraded positions.

    Every slice gets ``sigma`` noise on one seeded contiguous run covering
    ``region`` of its positions. Below ``region = 1`` both means come from the
    degraded slices (untouched positions vs. the noisy run), so the per-sample
    magnitude normalizer sees both; ``region = 1`` degrades whole slices and
    compares them with their clean copies.

    Returns:
        ``{"optical": (clean, degraded), "sar": (clean, degraded)}``
    """
    if not 0.0 < region <= 1.0:
        raise ContractViolation(f"region must lie in (0, 1], got {region}")
    dmqa = params.dmqa_params(settings)
    samples, positions = batch.optical.shape[:2]
    run = max(1, int(round(region * positions)))
    index = np.arange(positions)[None, :]
    gaps = {}
    for stream, (modality, features, tokens) in enumerate(
        (("optical", batch.optical, params.tokens_r), ("sar", batch.sar, params.tokens_s))
    ):
        rng = np.random.default_rng(mix_seed(seed, _GAP_STREAM, stream))
        starts = rng.integers(0, positions - run + 1, size=samples)[:, None]
        mask = (index >= starts) & (index < starts + run)
        noisy = features + sigma * rng.standard_normal(features.shape) * mask[..., None]
        degraded_r = dmqa_assess(noisy, TokenBank(tokens), dmqa).combined
        if run < positions:
            clean = float(np.mean(degraded_r[~mask]))
        else:
            clean = float(np.mean(dmqa_assess(features, TokenBank(tokens), dmqa).combined))
        gaps[modality] = (clean, float(np.mean(degraded_r[mask])))
        logger.debug("reliability gap %s: clean %.4f degraded %.4f", modality, *gaps[modality])
    return gaps


BOUNDARY_MARGIN = 1e-3
MAX_RESEEDS = 200


@dataclass(frozen=True)
class CheckProblem:
    params: ParamSet
    batch: Batch
    settings: PipelineSettings
    seed: int


def check_problem(
    seed: int,
    batch: int = 2,
    positions: int = 8,
    channels: int = 4,
    tokens: int = 3,
    iterations: int = 2,
    classes: int = 3,
    variant: str = "full",
    mode: str = "combined",
) -> CheckProblem:
    """Random small pipeline instance away from every non-differentiable point.

    Instances closer than ``BOUNDARY_MARGIN`` to a kink are redrawn from the next
    derived seed.
    """
    settings = PipelineSettings(variant=variant, iterations=iterations, mode=mode)
    for attempt in range(MAX_RESEEDS):
        rng = np.random.default_rng(mix_seed(seed, attempt))
        params = init_params(channels, tokens, classes, rng, output_scale=0.5)
        params = params.replace(
            dmqa_b1=0.1 * rng.standard_normal(params.dmqa_b1.shape),
            dmqa_b2=0.1 * rng.standard_normal(params.dmqa_b2.shape),
            fusion_b1=0.1 * rng.standard_normal(params.fusion_b1.shape),
            probe_b=0.1 * rng.standard_normal(params.probe_b.shape),
            alpha_raw=np.array(rng.normal()),
            beta_raw=np.array(rng.normal()),
        )
        data = Batch(
            optical=rng.standard_normal((batch, positions, channels)),
            sar=rng.standard_normal((batch, positions, channels)),
            labels=rng.integers(0, classes, size=batch),
        )
        if boundary_distance(params, data, settings) >= BOUNDARY_MARGIN:
            return CheckProblem(params=params, batch=data, settings=settings, seed=seed)
        logger.debug("check problem seed=%d attempt %d too close to a kink, redrawing", seed, attempt)
    raise ContractViolation(f"no kink-free problem found for seed {seed}")


def grad_check(seed: int = 0, h: float = 1e-5, max_coords: Optional[int] = None, **shape: Any) -> GradReport:
    problem = check_problem(seed, **shape)
    report = fd_check(
        problem.params,
        problem.batch,
        PipelineObjective(problem.settings),
        h=h,
        max_coords=max_coords,
        seed=seed,
    )
    for name, err in sorted(report.max_relative_error.items()):
        logger.info("grad-check %-10s max rel err %.3e", name, err)
    return report


# ---------------------------------------------------------------------------
# Sweep rows and emission
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentRow:
    variant: str
    policy: str
    mr: float
    seed: int
    accuracy: float
    mean_R_clean_opt: float
    mean_R_clean_sar: float
    mean_R_missing_opt: float
    mean_R_missing_sar: float
    final_loss: float
    config_hash: str = ""
    K: int = 0
    I: int = 0
    history: tuple[float, ...] = ()

    def key(self) -> tuple:
        return (self.variant, self.policy, self.mr, self.seed, self.K, self.I)


def _fmt(value: object) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)


def _mean_history(histories: list[tuple[float, ...]]) -> list[float]:
    """Epoch-wise mean over seeds, truncated to the shortest history."""
    length = min((len(h) for h in histories), default=0)
    if length == 0:
        return []
    return [float(v) for v in np.mean([h[:length] for h in histories], axis=0)]


@dataclass
class ExperimentResult:
    rows: list[ExperimentRow]

    def sorted_rows(self) -> list[ExperimentRow]:
        return sorted(self.rows, key=ExperimentRow.key)

    def check_fairness(self) -> None:
        """All variants of a (policy, mr, seed) cell must share one config hash."""
        seen: dict[tuple, str] = {}
        for row in self.rows:
            cell = (row.policy, row.mr, row.seed, row.K, row.I)
            if seen.setdefault(cell, row.config_hash) != row.config_hash:
                raise ContractViolation(f"variants of cell {cell} ran with different configs")

    def write_csv(self, path: Union[Path, str], columns: Sequence[str] = RESULT_COLUMNS) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(columns)
            for row in self.sorted_rows():
                writer.writerow([_fmt(getattr(row, col)) for col in columns])

    def summary(self) -> list[dict[str, object]]:
        """Per (variant, policy, mr): accuracy mean and std over seeds, mean loss curve."""
        cells: dict[tuple, list[ExperimentRow]] = {}
        for row in self.sorted_rows():
            cells.setdefault((row.variant, row.policy, row.mr), []).append(row)
        return [
            {
                "variant": variant,
                "policy": policy,
                "mr": mr,
                "n_seeds": len(rows),
                "accuracy_mean": float(np.mean([row.accuracy for row in rows])),
                "accuracy_std": float(np.std([row.accuracy for row in rows])),
                "history_mean": _mean_history([row.history for row in rows]),
            }
            for (variant, policy, mr), rows in sorted(cells.items())
        ]

    def write_summary_csv(self, path: Union[Path, str]) -> None:
        columns = ("variant", "policy", "mr", "n_seeds", "accuracy_mean", "accuracy_std")
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(columns)
            for entry in self.summary():
                writer.writerow([_fmt(entry[col]) for col in columns])

    def to_json(self) -> str:
        return json.dumps(
            {"rows": [dataclasses.asdict(row) for row in self.sorted_rows()], "summary": self.summary()},
            sort_keys=True,
            indent=2,
        )


def run_cell(
    cfg: ExperimentConfig,
    variant: str,
    mr: float,
    policy: str,
    seed: int,
    dataset: Optional[SynthDataset] = None,
) -> ExperimentRow:
    """Train one variant and evaluate it on the test split at the same missing rate."""
    data = dataset if dataset is not None else dataset_for(cfg, seed)
    spec = parse_policy(policy)
    result = train(cfg, variant, mr, spec, seed=seed, dataset=data)
    schedule, test_spec = evaluation_protocol(len(data.test), mr, spec, seed)
    metrics = evaluate(result.params, data.test, schedule, test_spec, result.settings)
    rel = metrics.mean_reliability
    return ExperimentRow(
        variant=variant,
        policy=spec.label,
        mr=float(mr),
        seed=int(seed),
        accuracy=metrics.accuracy,
        mean_R_clean_opt=rel["clean_opt"],
        mean_R_clean_sar=rel["clean_sar"],
        mean_R_missing_opt=rel["missing_opt"],
        mean_R_missing_sar=rel["missing_sar"],
        final_loss=result.final_loss,
        history=tuple(result.history),
        config_hash=cfg.digest(policy=spec.label, mr=float(mr), seed=int(seed)),
        K=cfg.K,
        I=cfg.I,
    )


async def _run_cells(
    jobs: list[tuple[ExperimentConfig, str, float, str, int]],
    datasets: dict[int, SynthDataset],
    workers: int,
) -> list[ExperimentRow]:
    limiter = anyio.CapacityLimiter(workers)
    rows: list[ExperimentRow] = []

    async def one(job: tuple[ExperimentConfig, str, float, str, int]) -> None:
        cfg, variant, mr, policy, seed = job
        data = datasets[seed]
        row = await anyio.to_thread.run_sync(
            partial(run_cell, cfg, variant, mr, policy, seed, data), limiter=limiter
        )
        logger.info(
            "cell done: %s %s mr=%.2f seed=%d K=%d I=%d acc=%.4f",
            row.variant, row.policy, row.mr, row.seed, row.K, row.I, row.accuracy,
        )
        rows.append(row)

    async with anyio.create_task_group() as tg:
        for job in jobs:
            tg.start_soon(one, job)
    return rows


def _run_jobs(jobs: list[tuple[ExperimentConfig, str, float, str, int]], workers: int) -> ExperimentResult:
    datasets: dict[int, SynthDataset] = {}
    for cfg, _, _, _, seed in jobs:
        if seed not in datasets:
            datasets[seed] = dataset_for(cfg, seed)
    rows = anyio.run(_run_cells, jobs, datasets, max(1, workers))
    result = ExperimentResult(rows=rows)
    result.check_fairness()
    return result


def sweep(
    cfg: ExperimentConfig,
    mr_grid: Sequence[float],
    policies: Sequence[str],
    variants: Sequence[str],
    seeds: Sequence[int],
    workers: Optional[int] = None,
) -> ExperimentResult:
    """Cartesian product of train+evaluate cells; rows come back sorted by key."""
    if not (mr_grid and policies and variants and seeds):
        raise ContractViolation("sweep grids must be non-empty")
    jobs = [
        (cfg, variant, float(mr), policy, int(seed))
        for variant in variants
        for policy in policies
        for mr in mr_grid
        for seed in seeds
    ]
    logger.info("sweep: %d cells on %d worker(s)", len(jobs), workers or cfg.workers)
    result = _run_jobs(jobs, workers or cfg.workers)
    result.rows = result.sorted_rows()
    return result


def sweep_hparams(
    cfg: ExperimentConfig,
    token_counts: Sequence[int],
    iteration_counts: Sequence[int],
    mr: float,
    policy: str,
    seeds: Sequence[int],
    workers: Optional[int] = None,
) -> ExperimentResult:
    """Sensitivity of the full variant to the token count K and iteration count I."""
    if not (token_counts and iteration_counts and seeds):
        raise ContractViolation("hyperparameter grids must be non-empty")
    jobs = [
        (cfg.replace(K=int(k), I=int(i)), "full", float(mr), policy, int(seed))
        for k in token_counts
        for i in iteration_counts
        for seed in seeds
    ]
    logger.info("hyperparameter sweep: %d cells", len(jobs))
    result = _run_jobs(jobs, workers or cfg.workers)
    result.rows = result.sorted_rows()
    return result


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------


def save_run(
    out_dir: Union[Path, str],
    result: TrainResult,
    cfg: ExperimentConfig,
    mr: float,
    policy: str,
    seed: int,
) -> Path:
    """Write ``<out>/params/`` (dump format + meta.json) and ``<out>/history.csv``."""
    out_dir = Path(out_dir)
    params_dir = out_dir / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    for name, value in result.params.groups().items():
        if name == "projector":
            save_projector(params_dir / name, result.params.ortho_projector())
        else:
            dump_tensor(params_dir / name, value)
    dump_tensor(params_dir / "lift", result.params.lift)
    meta = {
        "config": cfg.to_dict(),
        "variant": result.settings.variant,
        "mr": mr,
        "policy": policy,
        "seed": seed,
    }
    (params_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")
    with open(out_dir / "history.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(result.history):
            writer.writerow([epoch, repr(loss)])
    logger.info("saved run to %s", out_dir)
    return params_dir


def load_run(params_dir: Union[Path, str]) -> tuple[ParamSet, dict]:
    params_dir = Path(params_dir)
    try:
        meta = json.loads((params_dir / "meta.json").read_text(encoding="utf-8"))
    except OSError as err:
        raise ContractViolation(f"{params_dir} is not a saved run: {err}") from err
    values = {name: load_tensor(params_dir / name)[0] for name in GROUPS + ("lift",)}
    return ParamSet(**values), meta


def reliability_dump(
    params: ParamSet,
    batch: Batch,
    settings: PipelineSettings,
    out_dir: Union[Path, str],
) -> Path:
    """Dump L, D, R maps per view and a per-sample CSV summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dmqa = params.dmqa_params(settings)
    summary_path = out_dir / "summary.csv"
    with open(summary_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["sample_id", "modality", "mean_L", "mean_D", "mean_R"])
        for modality, features, tokens in (
            ("optical", batch.optical, params.tokens_r),
            ("sar", batch.sar, params.tokens_s),
        ):
            result = dmqa_assess(features, TokenBank(tokens), dmqa)
            dump_tensor(out_dir / f"{modality}_L", result.magnitude)
            dump_tensor(out_dir / f"{modality}_D", result.direction)
            dump_tensor(out_dir / f"{modality}_R", result.combined)
            for idx in range(features.shape[0]):
                writer.writerow(
                    [
                        idx,
                        modality,
                        _fmt(float(result.magnitude[idx].mean())),
                        _fmt(float(result.direction[idx].mean())),
                        _fmt(float(result.combined[idx].mean())),
                    ]
                )
    return summary_path
