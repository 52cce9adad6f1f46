"""Command-line front end: compress, run, verify, report, fp-cycles and serve."""

import argparse
import json
import sys
from collections.abc import Sequence
from pathlib import Path

from loguru import logger

from blmac_sim import __version__
from blmac_sim.codec import decode_all
from blmac_sim.config import BlmacSimConfig
from blmac_sim.errors import BlmacSimError, create_error_result, exit_code_for
from blmac_sim.models import CompressSummary
from blmac_sim.network import (
    compress_weights,
    layer_specs,
    load_network,
    load_streams,
    overhead_from_settings,
    random_input,
    random_weights,
    read_weights_file,
    resolve_settings,
    run_network,
    save_streams,
    validate_network,
    verify_network,
)
from blmac_sim.perf import build_report, load_calibration, render_report, write_report
from blmac_sim.signed_digit import fp_cycle_rows
from blmac_sim.tensor import FeatureMap, atomic_write


def configure_logging(level: str) -> None:
    """Replace loguru's default sink with a stderr sink at ``level``."""
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format="{time:HH:mm:ss} | {level: <8} | {message}")


def _load_tensors(args: argparse.Namespace, cfg):
    if args.weights:
        return read_weights_file(args.weights, cfg, int8=args.int8)
    return random_weights(cfg, args.seed)


def cmd_compress(args: argparse.Namespace, settings: BlmacSimConfig) -> int:
    cfg = load_network(args.config)
    tensors = _load_tensors(args, cfg)
    streams = compress_weights(cfg, tensors)
    save_streams(args.out, streams, tensors)
    summaries = []
    for name, stream in streams.items():
        w = tensors[name]
        summaries.append(
            CompressSummary(
                name=name,
                raw_bytes=w.k * w.k * w.z * w.o,
                compressed_bytes=stream.size_bytes,
                payload_bytes=stream.payload_bytes,
                n_b=stream.n_b,
                n3_total=sum(plan.n3 for plan in decode_all(stream)),
            )
        )
    payload = json.dumps([s.model_dump() for s in summaries], indent=2)
    atomic_write(Path(args.out) / "summary.json", payload.encode())
    for s in summaries:
        print(f"{s.name}: {s.raw_bytes:,} raw bytes -> {s.compressed_bytes:,} compressed ({s.payload_bytes:,} payload), N_b={s.n_b}, N_3={s.n3_total:,}")
    return 0


def cmd_run(args: argparse.Namespace, settings: BlmacSimConfig) -> int:
    cfg = load_network(args.config)
    settings = resolve_settings(cfg, settings)
    validate_network(cfg, settings.BLMAC_ARRAY_WIDTH)
    names = [layer.name for layer in cfg.layers]
    requested = {names[-1]} if names else set()
    for index in args.dump_layer or []:
        if not 0 <= index < len(names):
            raise BlmacSimError(f"--dump-layer {index} is not a layer index", "CONFIG_ERROR")
        requested.add(names[index])
    input_map = FeatureMap.load(args.input)
    streams, biases = load_streams(args.streams, cfg)
    outputs, report = run_network(cfg, input_map, streams, biases, settings=settings, fps=args.fps)
    out_dir = Path(args.out)
    for name in requested:
        outputs[name].save(out_dir / f"{name}.fmap")
    write_report(report, out_dir)
    print(render_report(report), end="")
    return 0


def cmd_verify(args: argparse.Namespace, settings: BlmacSimConfig) -> int:
    cfg = load_network(args.config)
    validate_network(cfg, resolve_settings(cfg, settings).BLMAC_ARRAY_WIDTH)
    tensors = _load_tensors(args, cfg)
    input_map = FeatureMap.load(args.input) if args.input else random_input(cfg, args.seed)
    streams = load_streams(args.streams, cfg, with_biases=False)[0] if args.streams else None
    result = verify_network(cfg, input_map, tensors, streams=streams, settings=settings)
    print(f"OK: oracle, MAC and BLMAC agree on {result.conv_layers} conv layers; output {result.output_dims}")
    return 0


def cmd_report(args: argparse.Namespace, settings: BlmacSimConfig) -> int:
    cfg = load_network(args.config)
    if args.fps is not None and args.fps <= 0:
        raise BlmacSimError(f"fps must be positive, got {args.fps}", "CONFIG_ERROR")
    resolved = resolve_settings(cfg, settings)
    streams = load_streams(args.streams, cfg, with_biases=False)[0]
    calibration = load_calibration(args.calibration) if args.calibration else None
    report = build_report(
        layer_specs(cfg, resolved.BLMAC_ARRAY_WIDTH),
        streams,
        overhead=overhead_from_settings(resolved),
        cache_bytes=resolved.BLMAC_CACHE_BYTES,
        array_width=resolved.BLMAC_ARRAY_WIDTH,
        tile_width=resolved.BLMAC_TILE_WIDTH,
        fps=args.fps,
        calibration=calibration,
        weight_load_bytes_per_cycle=resolved.BLMAC_WEIGHT_LOAD_BYTES_PER_CYCLE,
    )
    if args.out:
        write_report(report, args.out)
    print(render_report(report), end="")
    return 0


def cmd_fp_cycles(args: argparse.Namespace, settings: BlmacSimConfig) -> int:
    for row in fp_cycle_rows(hidden_bit=not args.no_hidden_bit):
        print(f"{row['format']:<10} frac_bits={row['frac_bits']:<3} average={row['cycles']:.3f} published={row['published']}")
    return 0


def cmd_serve(args: argparse.Namespace, settings: BlmacSimConfig) -> int:
    import uvicorn

    host = args.host or settings.BLMAC_HOST
    port = args.port or settings.BLMAC_PORT
    logger.info(f"Starting blmac-sim server on {host}:{port}")
    logger.info(f"MCP endpoint available at: http://{host}:{port}/mcp")
    uvicorn.run("blmac_sim.app:app", host=host, port=port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blmac-sim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="loguru level (default: BLMAC_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress the conv weights of a network into BLWS streams")
    p.add_argument("--config", required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--weights", help="raw little-endian weights file")
    source.add_argument("--seed", type=int, help="generate random sparse weights instead")
    p.add_argument("--int8", action="store_true", help="weights file holds int8 weights and int32 biases")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_compress)

    p = sub.add_parser("run", help="run a network on the BLMAC engine")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--streams", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-layer", type=int, action="append", help="also write this layer's output (repeatable)")
    p.add_argument("--fps", type=float, default=None)
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("verify", help="check oracle, MAC array and BLMAC array agree")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input", default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--int8", action="store_true")
    p.add_argument("--streams", default=None, help="use these streams for the BLMAC path instead of compressing")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("report", help="cycle and bandwidth tables from compressed streams")
    p.add_argument("--config", required=True)
    p.add_argument("--streams", required=True)
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--calibration", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("fp-cycles", help="average BLMAC cycles per floating-point multiply-accumulate")
    p.add_argument("--no-hidden-bit", action="store_true")
    p.set_defaults(handler=cmd_fp_cycles)

    p = sub.add_parser("serve", help="start the HTTP/MCP front end")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = BlmacSimConfig()
    configure_logging(args.log_level or settings.BLMAC_LOG_LEVEL)
    try:
        return args.handler(args, settings)
    except BlmacSimError as e:
        code = exit_code_for(e)
        result = create_error_result(e, command=args.command, exit_code=code, layer=e.details.get("layer"))
        logger.error(e.message)
        print(result.model_dump_json(indent=2), file=sys.stderr)
        return code
    except OSError as e:
        error = BlmacSimError(f"I/O error: {e}", "IO_ERROR", {"path": str(getattr(e, "filename", "") or "")})
        result = create_error_result(error, command=args.command, exit_code=exit_code_for(error))
        logger.error(error.message)
        print(result.model_dump_json(indent=2), file=sys.stderr)
        return exit_code_for(error)


if __name__ == "__main__":
    sys.exit(main())
