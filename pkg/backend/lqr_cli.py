#!/usr/bin/env python3
"""
Command-line frontend: synthetic data, single stages, the full pipeline,
benchmark sweeps and the HTTP server.

Exit codes: 0 success, 2 usage or configuration error, 3 stage failure,
4 I/O error.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger

from lqr_bench import run_bench
from lqr_io import load_dataset, simulate_dataset, write_dataset, write_report
from models.lqr_models import BenchSpec, PipelineOptions, PipelineSetting, ReconstructionSettings, SimulationConfig
from solvers.errors import PipelineStageError, ReconstructionError
from solvers.pipeline import run_pipeline

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_STAGE = 3
EXIT_IO = 4

STAGES = ["model", "target-estimation", "gain-estimation", "weight-identification", "horizon-search",
          "state-filter", "reconstruction", "prediction"]


def positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


def configure_logging(level: str) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level.upper(),
               format="{time:HH:mm:ss} | {level: <7} | {name}:{line} - {message}")


def _read_json(path: str) -> str:
    return Path(path).read_text()


def cmd_simulate(args: argparse.Namespace) -> int:
    config = SimulationConfig.model_validate_json(_read_json(args.config))
    if args.trajectories is not None:
        config = SimulationConfig.model_validate({**config.model_dump(), "trajectories": args.trajectories})
    dataset = simulate_dataset(config, args.seed)
    written = write_dataset(dataset, Path(args.out))
    logger.info("Wrote {} files to {}", len(written), args.out)
    return EXIT_OK


def _options(args: argparse.Namespace, settings: ReconstructionSettings) -> PipelineOptions:
    base = json.loads(_read_json(args.options)) if args.options else {}
    base.setdefault("theta", settings.theta)
    base.setdefault("window", settings.window)
    base.setdefault("multi_starts", settings.multi_starts)
    base.setdefault("seed", args.seed)
    if args.theta is not None:
        base["theta"] = args.theta
    if args.T is not None:
        base["window"] = args.T
    if getattr(args, "stage_name", None):
        base["stop_after"] = args.stage_name
    return PipelineOptions.model_validate(base)


def _run_pipeline(args: argparse.Namespace) -> int:
    settings = ReconstructionSettings()
    options = _options(args, settings)
    dataset = load_dataset(Path(args.data_dir))
    if dataset.current is None:
        raise ValueError(f"{args.data_dir} has no current trajectory")
    if args.with_truth:
        options = options.model_copy(update={"truth": dataset.manifest.objective})
    report = run_pipeline(dataset.history, dataset.current, dataset.manifest.system,
                          PipelineSetting(args.setting), options, max_workers=args.jobs)
    if args.out:
        write_report(report, Path(args.out))
    else:
        print(report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    return _run_pipeline(args)


def cmd_stage(args: argparse.Namespace) -> int:
    return _run_pipeline(args)


def cmd_bench(args: argparse.Namespace) -> int:
    spec = BenchSpec.model_validate_json(_read_json(args.spec))
    written = run_bench(spec, Path(args.out), base_seed=args.seed, jobs=args.jobs, only=args.only)
    logger.info("Wrote {} tables to {}", len(written), args.out)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from lqr_server import serve
    serve(args.host, args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    settings = ReconstructionSettings()
    parser = argparse.ArgumentParser(description="LQR reconstruction and input prediction")
    parser.add_argument("--log-level", default=settings.log_level,
                        help="Log level for the stderr sink (env LQR_RECON_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Generate a synthetic dataset directory")
    p.add_argument("config", help="SimulationConfig JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trajectories", type=positive_int, default=None, help="Number of history trajectories")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(func=cmd_simulate)

    def pipeline_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("data_dir", help="Directory written by simulate")
        p.add_argument("--setting", required=True, choices=[s.value for s in PipelineSetting])
        p.add_argument("--theta", type=positive_int, default=None, help="Bracket step of the horizon search")
        p.add_argument("--T", type=positive_int, default=None, help="Number of gains used for weight identification")
        p.add_argument("--options", default=None, help="PipelineOptions JSON file")
        p.add_argument("--with-truth", action="store_true",
                       help="Score weights against the manifest objective")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=positive_int, default=settings.jobs)
        p.add_argument("--out", default=None, help="Report JSON path (stdout if omitted)")

    p = sub.add_parser("pipeline", help="Run the full reconstruction")
    pipeline_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("stage", help="Run the reconstruction up to and including one stage")
    p.add_argument("stage_name", choices=STAGES)
    pipeline_flags(p)
    p.set_defaults(func=cmd_stage)

    p = sub.add_parser("bench", help="Run benchmark sweeps")
    p.add_argument("spec", help="BenchSpec JSON file")
    p.add_argument("--out", required=True, help="Output directory for CSV tables")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=positive_int, default=settings.jobs, help="Worker threads (env LQR_RECON_JOBS)")
    p.add_argument("--only", nargs="*", default=None, help="Experiment names to run")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="Start the HTTP server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except PipelineStageError as e:
        print(f"stage failed: {e.stage}: {e.cause}", file=sys.stderr)
        if getattr(args, "out", None) and args.command in ("pipeline", "stage"):
            write_report(e.report, Path(args.out))
        return EXIT_STAGE
    except ReconstructionError as e:
        print(f"stage failed: {e.stage}: {e}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
