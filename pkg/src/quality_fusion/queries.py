"""Tool handlers for the MCP surface.

Each tool follows the same three steps: a blocking ``get_*`` call pushed to a
worker thread, a ``format_*`` summary, and a ``process_*_query`` wrapper that
reports progress through the session log and turns failures into ``ValueError``.
"""

import json
from typing import Optional

import anyio
import mcp.types as types

from quality_fusion.config import ExperimentConfig
from quality_fusion.errors import FusionError
from quality_fusion.harness import grad_check, run_cell
from quality_fusion.missing import measured_mr, parse_policy, sample_availability

LOGGER_NAME = "quality-fusion"


async def _log(ctx, level: str, message: str) -> None:
    await ctx.session.send_log_message(
        level=level,
        data=message,
        logger=LOGGER_NAME,
        related_request_id=ctx.request_id,
    )


# ---------------------------------------------------------------------------
# sample_schedule
# ---------------------------------------------------------------------------


async def get_schedule_summary(num_samples: int, target_mr: float, seed: int = 0) -> dict:
    """Sample an availability schedule and summarise it.

    Args:
        num_samples: Schedule length
        target_mr: Target missing rate in [0, 0.5]
        seed: Schedule seed

    Returns:
        Counts per availability pattern, the measured MR and the first rows
    """

    def summarise() -> dict:
        schedule = sample_availability(num_samples, target_mr, seed)
        return {
            "num_samples": len(schedule),
            "target_mr": target_mr,
            "measured_mr": measured_mr(schedule),
            "both": int((schedule.optical & schedule.sar).sum()),
            "optical_only": int((schedule.optical & ~schedule.sar).sum()),
            "sar_only": int((~schedule.optical & schedule.sar).sum()),
            "head": [
                [int(o), int(s)] for o, s in zip(schedule.optical[:10], schedule.sar[:10])
            ],
        }

    return await anyio.to_thread.run_sync(summarise)


def format_schedule_summary(summary: dict) -> str:
    text = (
        f"Schedule of {summary['num_samples']} samples at target MR {summary['target_mr']:.3f}\n"
        f"  measured MR:  {summary['measured_mr']:.4f}\n"
        f"  both views:   {summary['both']}\n"
        f"  optical only: {summary['optical_only']}\n"
        f"  SAR only:     {summary['sar_only']}\n"
    )
    if summary["head"]:
        rows = ", ".join(f"({o},{s})" for o, s in summary["head"])
        text += f"  first rows (optical,sar): {rows}\n"
    return text


async def process_schedule_query(
    ctx, num_samples: int, target_mr: float, seed: int = 0
) -> list[types.TextContent]:
    """Sample a schedule and return its summary.

    Raises:
        ValueError: If the arguments violate the protocol bounds
    """
    await _log(ctx, "info", f"sampling schedule n={num_samples} mr={target_mr}...")
    try:
        summary = await get_schedule_summary(num_samples, target_mr, seed)
    except FusionError as err:
        message = f"schedule sampling failed: {err}"
        await _log(ctx, "error", message)
        raise ValueError(message) from err
    await _log(ctx, "info", f"measured MR {summary['measured_mr']:.4f}")
    return [types.TextContent(type="text", text=format_schedule_summary(summary))]


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------


async def get_grad_report(seed: int = 0, h: float = 1e-5, max_coords: Optional[int] = None) -> dict:
    report = await anyio.to_thread.run_sync(lambda: grad_check(seed=seed, h=h, max_coords=max_coords))
    return report.to_dict()


def format_grad_report(report: dict, detail_level: str = "detailed") -> str:
    text = f"Gradient check (h={report['h']:g}): max relative error {report['max_error']:.3e}\n"
    if detail_level != "basic":
        for name, err in sorted(report["max_relative_error"].items()):
            text += f"  {name:<12} {err:.3e}  ({report['coordinates_checked'][name]} coords)\n"
    if detail_level == "full":
        text += json.dumps(report, sort_keys=True, indent=2) + "\n"
    return text


async def process_grad_check_query(
    ctx,
    seed: int = 0,
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    detail_level: str = "detailed",
) -> list[types.TextContent]:
    await _log(ctx, "info", f"running gradient check seed={seed}...")
    try:
        report = await get_grad_report(seed, h, max_coords)
    except FusionError as err:
        message = f"gradient check failed: {err}"
        await _log(ctx, "error", message)
        raise ValueError(message) from err
    await _log(ctx, "info", f"gradient check done, max error {report['max_error']:.3e}")
    return [types.TextContent(type="text", text=format_grad_report(report, detail_level))]


# ---------------------------------------------------------------------------
# run_cell
# ---------------------------------------------------------------------------


async def get_cell_row(
    cfg: ExperimentConfig, variant: str, mr: float, policy: str = "zero", seed: Optional[int] = None
) -> dict:
    """Train and evaluate one sweep cell on a worker thread."""
    seed = cfg.seed if seed is None else seed
    label = parse_policy(policy).label
    row = await anyio.to_thread.run_sync(lambda: run_cell(cfg, variant, mr, label, seed))
    return {
        "variant": row.variant,
        "policy": row.policy,
        "mr": row.mr,
        "seed": row.seed,
        "accuracy": row.accuracy,
        "final_loss": row.final_loss,
        "mean_R_clean_opt": row.mean_R_clean_opt,
        "mean_R_clean_sar": row.mean_R_clean_sar,
        "mean_R_missing_opt": row.mean_R_missing_opt,
        "mean_R_missing_sar": row.mean_R_missing_sar,
    }


def format_cell_row(row: dict) -> str:
    text = (
        f"{row['variant']} at MR {row['mr']:.2f} ({row['policy']}, seed {row['seed']})\n"
        f"  accuracy:   {row['accuracy']:.4f}\n"
        f"  final loss: {row['final_loss']:.5f}\n"
    )
    for key in ("mean_R_clean_opt", "mean_R_clean_sar", "mean_R_missing_opt", "mean_R_missing_sar"):
        text += f"  {key}: {row[key]:.4f}\n"
    return text


async def process_cell_query(
    ctx,
    cfg: ExperimentConfig,
    variant: str,
    mr: float,
    policy: str = "zero",
    seed: Optional[int] = None,
) -> list[types.TextContent]:
    await _log(ctx, "info", f"training {variant} at mr={mr} ({cfg.epochs} epochs)...")
    try:
        row = await get_cell_row(cfg, variant, mr, policy, seed)
    except FusionError as err:
        message = f"cell {variant} mr={mr} failed: {err}"
        await _log(ctx, "error", message)
        raise ValueError(message) from err
    await _log(ctx, "info", f"cell done, accuracy {row['accuracy']:.4f}")
    return [types.TextContent(type="text", text=format_cell_row(row))]
