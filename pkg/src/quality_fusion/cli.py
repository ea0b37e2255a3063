import functools
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Optional

import click
import numpy as np

from quality_fusion.config import ExperimentConfig
from quality_fusion.errors import (
    ConfigError,
    ContractViolation,
    DivergenceError,
    FusionError,
    NonFiniteError,
    ProtocolBoundError,
)
from quality_fusion.harness import (
    HPARAM_COLUMNS,
    dataset_for,
    evaluate,
    evaluation_protocol,
    grad_check,
    load_run,
    missing_applied,
    reliability_dump,
    save_run,
    settings_for,
    sweep,
    sweep_hparams,
    train,
)
from quality_fusion.missing import parse_policy

logger = logging.getLogger("quality-fusion")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


# ---------------------------------------------------------------------------
# Option parsing helpers
# ---------------------------------------------------------------------------


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma list."""
    if ":" in text:
        try:
            start, stop, step = (float(part) for part in text.split(":"))
        except ValueError as err:
            raise ConfigError(f"bad grid {text!r}; expected start:stop:step") from err
        if step <= 0:
            raise ConfigError(f"grid step must be positive in {text!r}")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as err:
        raise ConfigError(f"bad number list {text!r}") from err


def parse_ints(text: str) -> list[int]:
    """``a..b`` (inclusive) or a comma list."""
    try:
        if ".." in text:
            lo, hi = (int(part) for part in text.split(".."))
            return list(range(lo, hi + 1))
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as err:
        raise ConfigError(f"bad integer list {text!r}") from err


def parse_names(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def load_config(path: Optional[str]) -> ExperimentConfig:
    return ExperimentConfig.from_json(path) if path else ExperimentConfig()


def exit_codes(func: Callable) -> Callable:
    """Map library errors to the documented exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ConfigError, ContractViolation, ProtocolBoundError) as err:
            logger.error("configuration error: %s", err)
            sys.exit(EXIT_CONFIG)
        except (DivergenceError, NonFiniteError) as err:
            logger.error("numerical divergence: %s", err)
            sys.exit(EXIT_DIVERGED)
        except FusionError as err:
            logger.error("%s", err)
            sys.exit(1)

    return wrapper


def _emit(payload: dict, out: Optional[str]) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
        logger.info("wrote %s", out)
    else:
        click.echo(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@click.group()
@click.option(
    "--log-level",
    default="INFO",
    help="Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)",
)
def main(log_level: str) -> None:
    """Quality-aware optical/SAR fusion under missing modalities."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


@main.command("train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment config JSON")
@click.option("--variant", default="full", type=click.Choice(["mean_baseline", "dmqa_only", "ocnf_only", "full"]))
@click.option("--mr", default=0.0, type=float, help="Target missing rate in [0, 0.5]")
@click.option("--policy", default="zero", help="zero | noise:<std> | occlusion:<fraction>")
@click.option("--seed", default=None, type=int, help="Overrides the config seed")
@click.option("--epochs", default=None, type=int)
@click.option("--lr", default=None, type=float)
@click.option("--reliability-mode", default=None, type=click.Choice(["combined", "magnitude", "direction"]))
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Run directory")
@exit_codes
def train_command(config_path, variant, mr, policy, seed, epochs, lr, reliability_mode, out) -> None:
    """Train one variant and save its parameters."""
    cfg = load_config(config_path).replace(seed=seed, epochs=epochs, lr=lr, reliability_mode=reliability_mode)
    result = train(cfg, variant, mr, policy, seed=cfg.seed)
    params_dir = save_run(out, result, cfg, mr, parse_policy(policy).label, cfg.seed)
    click.echo(json.dumps({"params": str(params_dir), "final_loss": result.final_loss}))


@main.command("eval")
@click.option("--params", "params_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Defaults to the run's config")
@click.option("--mr", default=None, type=float)
@click.option("--policy", default=None)
@click.option("--seed", default=None, type=int)
@exit_codes
def eval_command(params_dir, config_path, mr, policy, seed) -> None:
    """Evaluate saved parameters on the test split."""
    params, meta = load_run(params_dir)
    cfg = load_config(config_path) if config_path else ExperimentConfig.from_dict(meta["config"])
    seed = meta["seed"] if seed is None else seed
    mr = meta["mr"] if mr is None else mr
    data = dataset_for(cfg, seed)
    schedule, spec = evaluation_protocol(len(data.test), mr, policy or meta["policy"], seed)
    metrics = evaluate(params, data.test, schedule, spec, settings_for(cfg, meta["variant"]))
    _emit(
        {
            "variant": meta["variant"],
            "mr": mr,
            "policy": spec.label,
            "accuracy": metrics.accuracy,
            "loss": metrics.loss,
            "mean_reliability": metrics.mean_reliability,
        },
        None,
    )


@main.command("sweep")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--mr", "mr_grid", default="0.0:0.5:0.1", help="start:stop:step or comma list")
@click.option("--variants", default="mean_baseline,dmqa_only,ocnf_only,full")
@click.option("--policies", default="zero")
@click.option("--seeds", default="0..4", help="a..b or comma list")
@click.option("--workers", default=None, type=int, help="Parallel cells (defaults to config)")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Results CSV")
@exit_codes
def sweep_command(config_path, mr_grid, variants, policies, seeds, workers, out) -> None:
    """Train and evaluate every (variant, policy, MR, seed) cell."""
    cfg = load_config(config_path)
    result = sweep(
        cfg,
        parse_grid(mr_grid),
        [parse_policy(p).label for p in parse_names(policies)],
        parse_names(variants),
        parse_ints(seeds),
        workers=workers,
    )
    result.write_csv(out)
    out_path = Path(out)
    result.write_summary_csv(out_path.with_name(out_path.stem + "_summary.csv"))
    out_path.with_suffix(".json").write_text(result.to_json() + "\n", encoding="utf-8")
    logger.info("wrote %d rows to %s", len(result.rows), out)


@main.command("sweep-hparams")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--ks", default="4,8,16,32", help="Token counts K")
@click.option("--iterations", default="1..5", help="Iteration counts I")
@click.option("--mr", default=0.3, type=float)
@click.option("--policy", default="zero")
@click.option("--seeds", default="0..4")
@click.option("--workers", default=None, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@exit_codes
def sweep_hparams_command(config_path, ks, iterations, mr, policy, seeds, workers, out) -> None:
    """Sensitivity of the full variant to K and I at a fixed missing rate."""
    cfg = load_config(config_path)
    result = sweep_hparams(
        cfg, parse_ints(ks), parse_ints(iterations), mr, parse_policy(policy).label, parse_ints(seeds), workers
    )
    result.write_csv(out, columns=HPARAM_COLUMNS)


@main.command("grad-check")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Seed and probe_coords are used")
@click.option("--h", default=1e-5, type=float, help="Central-difference step")
@click.option("--count", default=1, type=int, help="Number of seeded problems")
@click.option("--max-coords", default=None, type=int, help="Coordinates sampled per group (config probe_coords)")
@click.option("--out", default=None, type=click.Path(dir_okay=False))
@exit_codes
def grad_check_command(config_path, h, count, max_coords, out) -> None:
    """Compare analytic and central-difference gradients of the full pipeline."""
    cfg = load_config(config_path)
    max_coords = cfg.probe_coords if max_coords is None else max_coords
    reports = [grad_check(seed=cfg.seed + i, h=h, max_coords=max_coords) for i in range(count)]
    _emit(
        {
            "reports": [r.to_dict() for r in reports],
            "max_error": max(r.max_error for r in reports),
        },
        out,
    )


@main.command("reliability-dump")
@click.option("--params", "params_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--mr", default=None, type=float, help="Defaults to the run's MR")
@click.option("--policy", default=None)
@exit_codes
def reliability_dump_command(params_dir, out, mr, policy) -> None:
    """Dump L, D, R maps of the missing-applied test split."""
    params, meta = load_run(params_dir)
    cfg = ExperimentConfig.from_dict(meta["config"])
    seed = meta["seed"]
    mr = meta["mr"] if mr is None else mr
    data = dataset_for(cfg, seed)
    schedule, spec = evaluation_protocol(len(data.test), mr, policy or meta["policy"], seed)
    summary = reliability_dump(
        params, missing_applied(data.test, schedule, spec), settings_for(cfg, meta["variant"]), out
    )
    logger.info("reliability maps written, summary at %s", summary)


@main.command("serve")
@click.option("--port", default=8000, help="Port to listen on for HTTP")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option(
    "--json-response",
    is_flag=True,
    default=False,
    help="Enable JSON responses instead of SSE streams",
)
@exit_codes
def serve_command(port, config_path, json_response) -> None:
    """Expose schedule sampling, gradient checks and sweep cells as MCP tools."""
    from quality_fusion.server import serve

    serve(load_config(config_path), port=port, json_response=json_response)


if __name__ == "__main__":
    main()
