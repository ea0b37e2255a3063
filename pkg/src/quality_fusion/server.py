import contextlib
import logging
from collections.abc import AsyncIterator

import mcp.types as types
from mcp.server.lowlevel import Server
from mcp.server.streamable_http_manager import StreamableHTTPSessionManager
from starlette.applications import Starlette
from starlette.routing import Mount
from starlette.types import Receive, Scope, Send

from quality_fusion.config import ExperimentConfig
from quality_fusion.graddiff import VARIANTS
from quality_fusion.missing import MAX_MISSING_RATE
from quality_fusion.queries import process_cell_query, process_grad_check_query, process_schedule_query

logger = logging.getLogger("quality-fusion")

MOUNT_PATH = "/fusion"


def list_fusion_tools() -> list[types.Tool]:
    return [
        types.Tool(
            name="sample_schedule",
            description="Sample a seeded optical/SAR availability schedule at a target missing rate",
            inputSchema={
                "type": "object",
                "required": ["num_samples", "target_mr"],
                "properties": {
                    "num_samples": {"type": "integer", "minimum": 1, "description": "Schedule length"},
                    "target_mr": {
                        "type": "number",
                        "minimum": 0.0,
                        "maximum": MAX_MISSING_RATE,
                        "description": "Target missing rate",
                    },
                    "seed": {"type": "integer", "default": 0},
                },
            },
        ),
        types.Tool(
            name="grad_check",
            description="Compare analytic and central-difference gradients on a small seeded pipeline",
            inputSchema={
                "type": "object",
                "properties": {
                    "seed": {"type": "integer", "default": 0},
                    "h": {"type": "number", "default": 1e-5, "description": "Central-difference step"},
                    "max_coords": {
                        "type": "integer",
                        "minimum": 1,
                        "description": "Coordinates sampled per group (defaults to the config probe_coords)",
                    },
                    "detail_level": {
                        "type": "string",
                        "enum": ["basic", "detailed", "full"],
                        "default": "detailed",
                    },
                },
            },
        ),
        types.Tool(
            name="run_cell",
            description="Train and evaluate one fusion variant at one missing rate",
            inputSchema={
                "type": "object",
                "required": ["variant", "mr"],
                "properties": {
                    "variant": {"type": "string", "enum": list(VARIANTS)},
                    "mr": {"type": "number", "minimum": 0.0, "maximum": MAX_MISSING_RATE},
                    "policy": {
                        "type": "string",
                        "default": "zero",
                        "description": "zero | noise:<std> | occlusion:<fraction>",
                    },
                    "seed": {"type": "integer", "description": "Defaults to the server config seed"},
                    "epochs": {"type": "integer", "minimum": 0, "description": "Overrides the config"},
                },
            },
        ),
    ]


def build_app(cfg: ExperimentConfig) -> Server:
    """MCP server exposing the fusion tools; ``cfg`` backs every ``run_cell`` call."""
    app = Server("mcp-streamable-http-fusion")

    @app.call_tool()
    async def call_tool(name: str, arguments: dict) -> list[types.TextContent]:
        ctx = app.request_context
        if name == "sample_schedule":
            return await process_schedule_query(
                ctx,
                int(arguments["num_samples"]),
                float(arguments["target_mr"]),
                int(arguments.get("seed", 0)),
            )
        elif name == "grad_check":
            max_coords = arguments.get("max_coords")
            return await process_grad_check_query(
                ctx,
                seed=int(arguments.get("seed", 0)),
                h=float(arguments.get("h", 1e-5)),
                max_coords=cfg.probe_coords if max_coords is None else int(max_coords),
                detail_level=arguments.get("detail_level", "detailed"),
            )
        elif name == "run_cell":
            cell_cfg = cfg.replace(epochs=arguments.get("epochs"))
            seed = arguments.get("seed")
            return await process_cell_query(
                ctx,
                cell_cfg,
                arguments["variant"],
                float(arguments["mr"]),
                arguments.get("policy", "zero"),
                None if seed is None else int(seed),
            )
        raise ValueError(f"Unknown tool: {name}")

    @app.list_tools()
    async def list_tools() -> list[types.Tool]:
        return list_fusion_tools()

    return app


def build_starlette(cfg: ExperimentConfig, json_response: bool = False) -> Starlette:
    app = build_app(cfg)

    # ---------------------- Session manager -----------------------
    session_manager = StreamableHTTPSessionManager(
        app=app,
        event_store=None,
        json_response=json_response,
        stateless=True,
    )

    async def handle_streamable_http(scope: Scope, receive: Receive, send: Send) -> None:
        await session_manager.handle_request(scope, receive, send)

    # ---------------------- Lifespan Management --------------------
    @contextlib.asynccontextmanager
    async def lifespan(app: Starlette) -> AsyncIterator[None]:
        async with session_manager.run():
            logger.info("fusion MCP server started at %s", MOUNT_PATH)
            try:
                yield
            finally:
                logger.info("fusion MCP server shutting down")

    return Starlette(
        debug=False,
        routes=[Mount(MOUNT_PATH, app=handle_streamable_http)],
        lifespan=lifespan,
    )


def serve(cfg: ExperimentConfig, port: int = 8000, json_response: bool = False) -> int:
    """Run the streamable-HTTP MCP server until interrupted."""
    import uvicorn

    uvicorn.run(build_starlette(cfg, json_response), host="0.0.0.0", port=port)
    return 0
