"""
blmac-sim HTTP front end: verification, reports and floating-point cycle statistics as MCP tools via fastapi-mcp.
"""

from typing import Any

from fastapi import FastAPI
from fastapi_mcp import FastApiMCP
from loguru import logger
from pydantic import BaseModel, Field

from blmac_sim import __version__
from blmac_sim.config import CONFIG_DIR, BlmacSimConfig
from blmac_sim.errors import BlmacSimError, ConfigurationError, create_error_result, exit_code_for
from blmac_sim.models import CommandResult, EngineReport
from blmac_sim.network import (
    NetworkConfig,
    compress_weights,
    layer_specs,
    load_network,
    overhead_from_settings,
    parse_network,
    random_input,
    random_weights,
    resolve_settings,
    verify_network,
)
from blmac_sim.perf import build_report, load_calibration, render_report
from blmac_sim.signed_digit import fp_cycle_rows


# --- Pydantic Models ---
class NetworkRequest(BaseModel):
    config: str | None = Field("identity", description="Name of a shipped network config (e.g. 'identity', 'tinyyolo').")
    network: dict[str, Any] | None = Field(None, description="Inline network config; takes precedence over 'config'.")
    seed: int = Field(0, description="Seed for random weights and input.")
    options: dict[str, Any] = Field(default_factory=dict, description="Overrides of the network's options block.")


class ReportRequest(NetworkRequest):
    fps: float | None = Field(30.0, gt=0, description="Frame rate for the required-clock line.")
    calibration: str | None = Field(None, description="Name of a shipped calibration file (e.g. 'tinyyolo_calibration').")


class FpCyclesRequest(BaseModel):
    hidden_bit: bool = Field(True, description="Count the implicit leading mantissa bit.")


class ReportResponse(BaseModel):
    result: CommandResult
    report: EngineReport | None = Field(None, description="Structured report, present on success.")


class FpCycleRow(BaseModel):
    format: str
    exp_bits: int
    frac_bits: int
    cycles: float
    published: float


# --- FastAPI App ---
app = FastAPI(
    title="blmac-sim",
    description="Bit-exact model of a MAC-less CNN inference processor.",
    version=__version__,
)


def _shipped_file(name: str) -> str:
    shipped = {path.stem: path for path in CONFIG_DIR.glob("*.yaml")}
    if name not in shipped:
        raise ConfigurationError(f"unknown shipped config {name!r}; available: {sorted(shipped)}")
    return str(shipped[name])


def _network_from(req: NetworkRequest) -> NetworkConfig:
    if req.network is not None:
        cfg = parse_network(req.network)
    elif req.config:
        cfg = load_network(_shipped_file(req.config))
    else:
        raise ConfigurationError("either 'config' or 'network' is required")
    if req.options:
        cfg = parse_network({**cfg.model_dump(mode="json"), "options": {**cfg.options, **req.options}})
    return cfg


def _error(command: str, error: BlmacSimError) -> CommandResult:
    logger.warning(f"{command} failed: {error.message}")
    return create_error_result(error, command=command, exit_code=exit_code_for(error), layer=error.details.get("layer"))


# --- Tool Endpoints ---
@app.post(
    "/tools/verify",
    response_model=CommandResult,
    operation_id="verify",
    summary="Verify the processor model against the oracle",
    description="Run oracle, MAC array and BLMAC array on random weights and input; success iff all three agree pixel-exactly.",
)
def run_verify(req: NetworkRequest) -> CommandResult:
    """Three-way verification of a network with random weights and input."""
    try:
        cfg = _network_from(req)
        result = verify_network(cfg, random_input(cfg, req.seed), random_weights(cfg, req.seed), settings=BlmacSimConfig())
    except BlmacSimError as e:
        return _error("verify", e)
    return CommandResult(status="success", output=f"oracle, MAC and BLMAC agree on {result.conv_layers} conv layers; output {result.output_dims}", exit_code=0)


@app.post(
    "/tools/report",
    response_model=ReportResponse,
    operation_id="report",
    summary="Cycle and bandwidth report",
    description="Compress random weights for a network and report cycles per slice/map/kernel, bandwidth and the required clock.",
)
def run_report(req: ReportRequest) -> ReportResponse:
    try:
        cfg = _network_from(req)
        settings = resolve_settings(cfg, BlmacSimConfig())
        streams = compress_weights(cfg, random_weights(cfg, req.seed))
        calibration = load_calibration(_shipped_file(req.calibration)) if req.calibration else None
        report = build_report(
            layer_specs(cfg, settings.BLMAC_ARRAY_WIDTH),
            streams,
            overhead=overhead_from_settings(settings),
            cache_bytes=settings.BLMAC_CACHE_BYTES,
            array_width=settings.BLMAC_ARRAY_WIDTH,
            tile_width=settings.BLMAC_TILE_WIDTH,
            fps=req.fps,
            calibration=calibration,
            weight_load_bytes_per_cycle=settings.BLMAC_WEIGHT_LOAD_BYTES_PER_CYCLE,
        )
    except BlmacSimError as e:
        return ReportResponse(result=_error("report", e))
    return ReportResponse(result=CommandResult(status="success", output=render_report(report), exit_code=0), report=report)


@app.post(
    "/tools/fp_cycles",
    response_model=list[FpCycleRow],
    operation_id="fp_cycles",
    summary="Average BLMAC cycles per floating-point MAC",
    description="Average nonzero signed-digit count of half, bfloat16, TensorFloat-32 and single-precision mantissas.",
)
def run_fp_cycles(req: FpCyclesRequest) -> list[FpCycleRow]:
    return [FpCycleRow(**row) for row in fp_cycle_rows(req.hidden_bit)]


# --- Health Check ---
@app.get("/health", summary="Health check", description="Check if the server is running and healthy.")
async def health_check():
    """Health check endpoint."""
    return {"status": "healthy", "version": __version__}


# --- Create and Mount MCP Server ---
mcp = FastApiMCP(
    app,
    name="blmac-sim",
    description="Processor-model tools: verification, cycle/bandwidth reports and floating-point BLMAC statistics",
    include_operations=["verify", "report", "fp_cycles"],
)
mcp.mount()

if __name__ == "__main__":
    import uvicorn

    settings = BlmacSimConfig()
    logger.info(f"Starting blmac-sim server on {settings.BLMAC_HOST}:{settings.BLMAC_PORT}")
    uvicorn.run(app, host=settings.BLMAC_HOST, port=settings.BLMAC_PORT)
