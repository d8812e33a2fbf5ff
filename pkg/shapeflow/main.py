"""shapeflow - command line entry point."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import structlog

from shapeflow import __version__
from shapeflow.core.config import PRESETS, load_pipeline_config, settings
from shapeflow.core.exceptions import ConfigError, GradientCheckError, ShapeFlowError
from shapeflow.core.logging import setup_logging
from shapeflow.models.schemas import PipelineConfig
from shapeflow.services import pipeline
from shapeflow.utils.gradcheck import assert_passed

logger = structlog.get_logger()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file merged over the preset")
    common.add_argument("--preset", choices=PRESETS, default=None, help=f"defaults to {settings.PRESET}")
    common.add_argument("--seed", type=int, default=None, help="set every stage seed")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--log-level", default=None, help="override SHAPEFLOW_LOG_LEVEL")

    parser = argparse.ArgumentParser(
        prog="shapeflow",
        description="Differentiable surrogate-based shape optimization toolkit",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    datagen = sub.add_parser("datagen", parents=[common], help="generate an oracle dataset")
    datagen.add_argument(
        "--inject-nan", type=int, action="append", default=[], metavar="INDEX",
        help="poison sample INDEX with a NaN (filter test hook)",
    )

    train = sub.add_parser("train", parents=[common], help="train a surrogate")
    train.add_argument("dataset", type=Path, help="datagen output directory")

    opt = sub.add_parser("optimize", parents=[common], help="optimize a design against a surrogate")
    opt.add_argument("checkpoint", type=Path, help="UNW1 checkpoint (best.unw)")
    opt.add_argument("--export-final-mesh", action="store_true", help="write the optimized surface")
    opt.add_argument("--window-mode", choices=("track", "fixed"), default=None)

    gradcheck = sub.add_parser("gradcheck", parents=[common], help="finite-difference vjp checks")
    gradcheck.add_argument(
        "--corrupt-stage", choices=pipeline.GRADCHECK_STAGES, default=None,
        help="scale one stage's vjp (negative control)",
    )

    export = sub.add_parser("export-mesh", parents=[common], help="export surfaces of designs or samples")
    export.add_argument("source", type=Path, help="design CSV or <id>_sdf.dsf file")
    export.add_argument("--vtk", action="store_true", help="also write VTK structured points")

    ablate = sub.add_parser("ablate", parents=[common], help="attention / masking ablation")
    ablate.add_argument("dataset", type=Path, help="datagen output directory")

    plot = sub.add_parser("plot", parents=[common], help="HTML figures of a finished run")
    plot.add_argument("run", type=Path, help="optimize, train or ablate output directory")
    plot.add_argument("--checkpoint", type=Path, default=None, help="surrogate for velocity slices")
    plot.add_argument("--dataset", type=Path, default=None, help="datagen directory for velocity slices")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    overrides: Dict[str, Any] = {}
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    if getattr(args, "export_final_mesh", False):
        overrides.setdefault("optimize", {})["export_final_mesh"] = True
    if getattr(args, "window_mode", None):
        overrides.setdefault("optimize", {})["window_mode"] = args.window_mode

    config = load_pipeline_config(args.preset, args.config, overrides)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def output_dir(args: argparse.Namespace, config: PipelineConfig) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(config.output_dir) / args.command


def _datagen(args, config) -> int:
    result = pipeline.cmd_datagen(config, output_dir(args, config), inject_nan=args.inject_nan)
    print(result.summary())
    return EXIT_OK


def _train(args, config) -> int:
    out = output_dir(args, config)
    result = pipeline.cmd_train(config, args.dataset, out)
    best = result.best_record
    print(
        f"train: {len(result.history)} epochs, best epoch {result.best_epoch} "
        f"(train_mse={best.train_mse:.6g}, val_mse={best.val_mse:.6g}) -> {out / 'best.unw'}"
    )
    return EXIT_OK


def _optimize(args, config) -> int:
    out = output_dir(args, config)
    trajectory = pipeline.cmd_optimize(config, args.checkpoint, out)
    final = ", ".join(f"{v:.6g}" for v in trajectory.final_x)
    print(
        f"optimize: {trajectory.iterations} iterations, converged={trajectory.converged}, "
        f"objective {trajectory.records[0].objective:.6g} -> {trajectory.final_objective:.6g}, "
        f"design [{final}] -> {out / 'trajectory.csv'}"
    )
    return EXIT_OK


def _gradcheck(args, config) -> int:
    results = pipeline.cmd_gradcheck(config, output_dir(args, config), args.corrupt_stage)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.stage:<12} max_rel_error={r.max_rel_error:.3e} tol={r.tolerance:.0e} {status}")
    assert_passed(results)
    return EXIT_OK


def _export_mesh(args, config) -> int:
    result = pipeline.cmd_export_mesh(config, args.source, output_dir(args, config), vtk=args.vtk)
    for path in result.meshes + result.vtk:
        print(path)
    return EXIT_OK


def _ablate(args, config) -> int:
    out = output_dir(args, config)
    rows = pipeline.cmd_ablate(config, args.dataset, out)
    for row in rows:
        print(f"{row['variant']:<24} best_val_mse={float(row['best_val_mse']):.6g} corr={float(row['corr_grad_err']):.4f}")
    print(f"ablate: report -> {out / 'ablation.csv'}")
    return EXIT_OK


def _plot(args, config) -> int:
    for path in pipeline.cmd_plot(config, args.run, output_dir(args, config), args.checkpoint, args.dataset):
        print(path)
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, PipelineConfig], int]] = {
    "datagen": _datagen,
    "train": _train,
    "optimize": _optimize,
    "gradcheck": _gradcheck,
    "export-mesh": _export_mesh,
    "ablate": _ablate,
    "plot": _plot,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the command and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        logger.error("Configuration error", error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except GradientCheckError as e:
        logger.error("Gradient check failed", error=str(e))
        return EXIT_FAILURE
    except ShapeFlowError as e:
        logger.error("Command failed", error=str(e), error_type=type(e).__name__)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        logger.error("Unhandled exception", exc_info=e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
