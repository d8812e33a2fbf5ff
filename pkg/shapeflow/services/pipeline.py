"""
Workflow orchestration behind the command line.

Each ``cmd_*`` function runs one workflow inside a :func:`run_context`,
which binds the command and run id into the structlog context, writes the
``run.json`` provenance manifest and exports the run's Prometheus metrics.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import structlog

from shapeflow import __version__
from shapeflow.core.config import config_hash, settings
from shapeflow.core.exceptions import ConfigError, MeshError
from shapeflow.models.dataset import FilterReport, Sample
from shapeflow.models.design import PARAM_NAMES, DesignParams
from shapeflow.models.fields import GridSpec, ScalarField3
from shapeflow.models.mesh import TriMesh
from shapeflow.models.schemas import MeshConfig, PipelineConfig, RunManifest, SurrogateManifest, UNetConfig
from shapeflow.nn.tensor import precision
from shapeflow.services import plots
from shapeflow.services.components import Chain, DiffComponent, LambdaComponent, MeanVelocityX
from shapeflow.services.fields import CropComponent, centered_window
from shapeflow.services.flow_oracle import (
    assemble_dataset,
    filter_samples,
    generate_samples,
    ingest_external,
    load_samples,
    save_dataset,
)
from shapeflow.services.geometry import GeometryComponent, read_designs, sample_designs, sdf_grid, write_designs
from shapeflow.services.metrics import RunMetrics
from shapeflow.services.mma import Trajectory, optimize, write_trajectory
from shapeflow.services.surface_mesh import export_mesh, laplacian_smooth, marching_cubes
from shapeflow.services.surrogate.ablation import run_ablation
from shapeflow.services.surrogate.inference import InferenceComponent, Surrogate, load_surrogate
from shapeflow.services.surrogate.inputs import InputComponent
from shapeflow.services.surrogate.trainer import TrainResult, train
from shapeflow.services.surrogate.unet import UNet
from shapeflow.utils.gradcheck import StageCheck, check_component
from shapeflow.utils.io import fmt17, write_table, write_vtk

logger = structlog.get_logger()

PathLike = Union[str, Path]

GRADCHECK_STAGES = ("geometry", "crop", "build_input", "inference", "chain")
GRADCHECK_COLUMNS = ["stage", "parameter", "vjp", "finite_difference", "max_rel_error", "tolerance", "passed"]

# All six parameters away from zero so every Jacobian column is exercised.
GRADCHECK_DESIGN = DesignParams(r_a=1.1, r_b=0.8, L=3.0, theta_x=0.1, theta_y=-0.2, theta_z=0.3)
GRADCHECK_GRID = GridSpec(origin=(-3.0, -3.0, -3.0), spacing=(0.5, 0.5, 0.5), dims=(24, 14, 14))
# Probed SDF nodes stay this far from the zero level so a hard mask cannot flip.
MASK_MARGIN = 1e-2


@dataclass
class RunContext:
    command: str
    config: PipelineConfig
    out_dir: Path
    run_id: str
    metrics: RunMetrics


def run_seeds(config: PipelineConfig) -> Dict[str, int]:
    return {
        "sampling": config.sampling.seed,
        "split": config.dataset.split_seed,
        "oracle": config.oracle.seed,
        "train": config.train.seed,
        "weights": config.unet.weight_seed,
        "gradcheck": config.gradcheck.seed,
    }


def write_run_manifest(
    path: Path,
    command: str,
    config: PipelineConfig,
    parameters: Optional[Dict[str, object]] = None,
) -> Path:
    manifest = RunManifest(
        command=command,
        toolkit_version=__version__,
        preset=config.preset,
        config_hash=config_hash(config),
        seeds=run_seeds(config),
        threads=config.threads,
        parameters=parameters or {},
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


@contextmanager
def run_context(
    command: str,
    config: PipelineConfig,
    out_dir: PathLike,
    parameters: Optional[Dict[str, object]] = None,
) -> Iterator[RunContext]:
    """Run-scoped logging context, provenance manifest and metrics export."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_id = f"{command}-{config_hash(config)[:12]}"
    metrics = RunMetrics()
    if settings.METRICS_ENABLED:
        metrics.initialize()

    write_run_manifest(out / "run.json", command, config, parameters)
    structlog.contextvars.bind_contextvars(command=command, run_id=run_id)
    logger.info("Run started", out_dir=str(out), preset=config.preset, threads=config.threads)
    try:
        yield RunContext(command, config, out, run_id, metrics)
        logger.info("Run finished", out_dir=str(out))
    finally:
        if metrics.initialized:
            metrics.write_textfile(out / "metrics.prom")
        structlog.contextvars.unbind_contextvars("command", "run_id")


def surface_mesh(sdf: ScalarField3, cfg: MeshConfig) -> TriMesh:
    """Marching cubes at ``cfg.iso`` followed by Laplacian smoothing."""
    mesh = marching_cubes(sdf, cfg.iso)
    return laplacian_smooth(mesh, cfg.smoothing_iterations, cfg.smoothing_lambda)


def design_vector(values: Dict[str, float], what: str) -> np.ndarray:
    missing = [name for name in PARAM_NAMES if name not in values]
    if missing:
        raise ConfigError(f"optimize.{what} lacks {missing}")
    return np.array([float(values[name]) for name in PARAM_NAMES])


# --- datagen -----------------------------------------------------------------

@dataclass
class DatagenResult:
    manifest_path: Path
    samples: List[Sample]
    report: FilterReport

    def summary(self) -> str:
        reasons: Dict[str, int] = {}
        for record in self.report.rejected:
            reasons[record.reason] = reasons.get(record.reason, 0) + 1
        detail = ", ".join(f"{k}={v}" for k, v in sorted(reasons.items())) or "none"
        return (
            f"datagen: {len(self.samples)} samples, {self.report.num_retained} retained, "
            f"{self.report.num_rejected} rejected ({detail}) -> {self.manifest_path}"
        )


def cmd_datagen(config: PipelineConfig, out_dir: PathLike, inject_nan: Sequence[int] = ()) -> DatagenResult:
    """
    Sample designs, evaluate the oracle, filter and persist the dataset.

    ``inject_nan`` poisons the listed sample indices so the hygiene filter
    has something to reject.
    """
    spec = config.grid.to_spec()
    ds = config.dataset
    parameters = {"count": ds.count, "window": list(ds.window), "umag_threshold": ds.umag_threshold}
    with run_context("datagen", config, out_dir, parameters) as ctx:
        designs = sample_designs(config.sampling, ds.count)
        write_designs(ctx.out_dir / "designs.csv", designs)
        samples = generate_samples(designs, spec, ds.window, config.oracle, config.threads, inject_nan)
        _, report = filter_samples(samples, ds.umag_threshold)

        rejected = {r.index: r.reason for r in report.rejected}
        for index in range(len(samples)):
            if index in rejected:
                ctx.metrics.record_sample("rejected", rejected[index])
            else:
                ctx.metrics.record_sample("retained")

        manifest_path = save_dataset(ctx.out_dir, samples, report)

        if ds.export_meshes:
            for sample in samples:
                try:
                    mesh = surface_mesh(sdf_grid(sample.params, spec), config.mesh)
                except MeshError as e:
                    logger.warning("Mesh skipped", sample_id=sample.sample_id, error=str(e))
                    continue
                export_mesh(mesh, ctx.out_dir / f"{sample.sample_id}.stl", fmt="stl")

    return DatagenResult(manifest_path, samples, report)


# --- train / ablate ------------------------------------------------------------

def _load_dataset(config: PipelineConfig, dataset_dir: PathLike):
    directory = Path(dataset_dir)
    if not directory.is_dir():
        raise ConfigError(f"Dataset directory not found: {directory}")
    ds = config.dataset
    samples = load_samples(directory)
    dataset, _ = assemble_dataset(
        samples,
        threshold=ds.umag_threshold,
        split_seed=ds.split_seed,
        train_ratio=ds.train_ratio,
        val_ratio=ds.val_ratio,
        v_max=ds.v_max,
    )
    return dataset


def cmd_train(config: PipelineConfig, dataset_dir: PathLike, out_dir: PathLike) -> TrainResult:
    """
    Train a surrogate on a ``datagen`` directory.

    Raises:
        ConfigError: If the dataset directory does not exist
        TrainingDivergedError: On a non-finite loss
    """
    dataset = _load_dataset(config, dataset_dir)
    parameters = {
        "dataset_dir": str(dataset_dir),
        "train": config.train.model_dump(),
        "unet": config.unet.model_dump(),
    }
    with run_context("train", config, out_dir, parameters) as ctx:
        return train(
            dataset,
            config.unet,
            config.train,
            out_dir=ctx.out_dir,
            threads=config.threads,
            metrics=ctx.metrics,
            split_seed=config.dataset.split_seed,
        )


def cmd_ablate(config: PipelineConfig, dataset_dir: PathLike, out_dir: PathLike) -> List[dict]:
    """Train every configured ablation variant on one shared split."""
    dataset = _load_dataset(config, dataset_dir)
    parameters = {
        "dataset_dir": str(dataset_dir),
        "variants": [v.model_dump() for v in config.ablation.variants],
        "train": config.train.model_dump(),
    }
    with run_context("ablate", config, out_dir, parameters) as ctx:
        return run_ablation(
            dataset,
            config.ablation.variants,
            config.unet,
            config.train,
            out_dir=ctx.out_dir,
            threads=config.threads,
            metrics=ctx.metrics,
            split_seed=config.dataset.split_seed,
        )


# --- optimize ------------------------------------------------------------------

def optimization_chain(
    spec: GridSpec,
    surrogate: Surrogate,
    window_mode: str = "track",
    x0: Optional[np.ndarray] = None,
) -> Chain:
    """
    geometry -> interpolate-to-grid -> unet-inference -> qoi.

    ``fixed`` window mode places the crop window once, on the obstacle of
    ``x0``; ``track`` recenters it at every evaluation.
    """
    window = tuple(surrogate.manifest.window)
    if not np.allclose(spec.spacing, surrogate.manifest.spacing):
        raise ConfigError(
            f"Grid spacing {spec.spacing} differs from the surrogate's training spacing "
            f"{tuple(surrogate.manifest.spacing)}"
        )
    origin = None
    if window_mode == "fixed":
        if x0 is None:
            raise ConfigError("Fixed window mode needs the initial design")
        origin = centered_window(sdf_grid(x0, spec), window)
    return Chain(
        [
            GeometryComponent(spec),
            CropComponent(spec.dims, window, origin),
            InferenceComponent(surrogate),
            MeanVelocityX(window),
        ]
    )


def cmd_optimize(
    config: PipelineConfig,
    checkpoint: Union[PathLike, Surrogate],
    out_dir: PathLike,
) -> Trajectory:
    """
    Maximize the mean x-velocity of the surrogate prediction over the design.

    Writes ``trajectory.csv``, ``final_design.csv``, VTK files of the final
    SDF and predicted velocity, and the smoothed final mesh when
    ``optimize.export_final_mesh`` is set.
    """
    opt = config.optimize
    if isinstance(checkpoint, Surrogate):
        surrogate = checkpoint
    else:
        if not Path(checkpoint).is_file():
            raise ConfigError(f"Checkpoint not found: {checkpoint}")
        surrogate = load_surrogate(checkpoint)

    x0 = design_vector(opt.initial, "initial")
    bounds = (design_vector(opt.lower, "lower"), design_vector(opt.upper, "upper"))
    spec = config.grid.to_spec()
    chain = optimization_chain(spec, surrogate, opt.window_mode, x0)

    parameters = {
        "checkpoint": str(checkpoint) if not isinstance(checkpoint, Surrogate) else "<in-memory>",
        "initial": dict(opt.initial),
        "lower": dict(opt.lower),
        "upper": dict(opt.upper),
        "stop": opt.stop.model_dump(),
        "window_mode": opt.window_mode,
    }
    with run_context("optimize", config, out_dir, parameters) as ctx:
        trajectory = optimize(chain, x0, bounds, opt.stop, metrics=ctx.metrics)
        write_trajectory(ctx.out_dir / "trajectory.csv", trajectory)
        final = DesignParams.from_array(trajectory.final_x)
        write_designs(ctx.out_dir / "final_design.csv", [final])

        geometry, crop, inference = chain.components[:3]
        sdf = geometry.forward(trajectory.final_x)
        window_sdf = crop.forward(sdf)
        write_vtk(ctx.out_dir / "final_sdf.vtk", {"sdf": sdf})
        write_vtk(ctx.out_dir / "final_velocity.vtk", {"sdf": window_sdf, "velocity": inference.forward(window_sdf)})

        if opt.export_final_mesh:
            export_mesh(surface_mesh(sdf, config.mesh), ctx.out_dir / f"final_mesh.{config.mesh.format}", config.mesh.format)
    return trajectory


# --- gradcheck -----------------------------------------------------------------

def corrupted(component: DiffComponent, factor: float = 1.5) -> DiffComponent:
    """Same forward map with a deliberately wrong vjp."""
    return LambdaComponent(
        component.name,
        component.forward,
        lambda x, cot: factor * np.asarray(component.vjp(x, cot)),
        component.input_shape,
        component.output_shape,
    )


def gradcheck_surrogate(config: PipelineConfig, window_sdf: ScalarField3, mask_mode: str) -> Surrogate:
    """Randomly initialized small surrogate for the network stages."""
    gc = config.gradcheck
    ucfg = UNetConfig(
        levels=len(gc.channels),
        channels=list(gc.channels),
        attention=config.unet.attention,
        mask_mode=mask_mode,
        mask_temperature=config.unet.mask_temperature,
        blocks_per_level=1,
        weight_seed=gc.seed,
    )
    manifest = SurrogateManifest(
        v_max=float(np.linalg.norm(config.oracle.freestream)) or 1.0,
        sdf_scale=float(np.max(np.abs(window_sdf.values))) or 1.0,
        unet=ucfg,
        window=window_sdf.spec.dims,
        spacing=window_sdf.spec.spacing,
        split_seed=0,
        best_epoch=0,
        dtype="float64",
    )
    return Surrogate(UNet(ucfg), manifest)


def run_gradcheck(config: PipelineConfig, corrupt_stage: Optional[str] = None) -> List[StageCheck]:
    """
    Finite-difference checks of every differentiable stage, in float64.

    The hard mask carries no gradient, so its SDF probes keep a margin from
    the zero level; the full chain uses the sigmoid mask and a fixed window
    so that its finite differences stay smooth.
    """
    if corrupt_stage is not None and corrupt_stage not in GRADCHECK_STAGES:
        raise ConfigError(f"Unknown stage '{corrupt_stage}', expected one of {GRADCHECK_STAGES}")
    gc = config.gradcheck
    rng = np.random.default_rng(gc.seed)
    spec = GRADCHECK_GRID
    window = tuple(gc.window)
    x0 = GRADCHECK_DESIGN.to_array()

    def stage(name: str, component: DiffComponent) -> DiffComponent:
        return corrupted(component) if corrupt_stage == name else component

    results: List[StageCheck] = []
    with precision(np.float64):
        geometry = GeometryComponent(spec)
        results.append(
            check_component(
                stage("geometry", geometry), x0, "geometry", gc.geometry_tol,
                gc.probes, gc.param_step, rng, names=PARAM_NAMES,
            )
        )

        sdf = geometry.forward(x0)
        origin = centered_window(sdf, window)
        crop = CropComponent(spec.dims, window, origin)
        results.append(check_component(stage("crop", crop), sdf, "crop", gc.geometry_tol, gc.probes, gc.step, rng))

        window_sdf = crop.forward(sdf)
        mask_mode = config.unet.mask_mode
        away = np.abs(window_sdf.values) > MASK_MARGIN if mask_mode == "hard" else None
        surrogate = gradcheck_surrogate(config, window_sdf, mask_mode)
        inputs = InputComponent(surrogate.model.cfg, window, surrogate.sdf_scale)
        results.append(
            check_component(
                stage("build_input", inputs), window_sdf, "build_input", gc.network_tol,
                gc.probes, gc.step, rng, candidates=away,
            )
        )
        results.append(
            check_component(
                stage("inference", InferenceComponent(surrogate)), window_sdf, "inference", gc.network_tol,
                gc.probes, gc.step, rng, candidates=away,
            )
        )

        smooth = gradcheck_surrogate(config, window_sdf, "sigmoid")
        full = Chain(
            [
                stage("chain", geometry),
                crop,
                InferenceComponent(smooth),
                MeanVelocityX(window),
            ]
        )
        results.append(
            check_component(full, x0, "chain", gc.chain_tol, gc.probes, gc.param_step, rng, names=PARAM_NAMES)
        )
    return results


def write_gradcheck_report(path: Path, results: Sequence[StageCheck]) -> Path:
    rows = []
    for r in results:
        rows.append(
            {
                "stage": r.stage,
                "parameter": "",
                "vjp": "",
                "finite_difference": "",
                "max_rel_error": fmt17(r.max_rel_error),
                "tolerance": fmt17(r.tolerance),
                "passed": "true" if r.passed else "false",
            }
        )
        for name, (analytic, numeric) in r.coordinates.items():
            rows.append(
                {
                    "stage": r.stage,
                    "parameter": name,
                    "vjp": fmt17(analytic),
                    "finite_difference": fmt17(numeric),
                    "max_rel_error": "",
                    "tolerance": "",
                    "passed": "",
                }
            )
    return write_table(path, rows, GRADCHECK_COLUMNS)


def cmd_gradcheck(
    config: PipelineConfig,
    out_dir: PathLike,
    corrupt_stage: Optional[str] = None,
) -> List[StageCheck]:
    """Run the gradient checks and write ``gradcheck.csv``."""
    parameters = {"probes": config.gradcheck.probes, "step": config.gradcheck.step, "corrupt_stage": corrupt_stage}
    with run_context("gradcheck", config, out_dir, parameters) as ctx:
        results = run_gradcheck(config, corrupt_stage)
        for r in results:
            ctx.metrics.record_gradcheck(r.stage, r.max_rel_error)
        write_gradcheck_report(ctx.out_dir / "gradcheck.csv", results)
    return results


# --- export-mesh ---------------------------------------------------------------

@dataclass
class ExportResult:
    meshes: List[Path] = field(default_factory=list)
    vtk: List[Path] = field(default_factory=list)


def cmd_export_mesh(config: PipelineConfig, source: PathLike, out_dir: PathLike, vtk: bool = False) -> ExportResult:
    """
    Export surfaces of designs or dataset samples.

    ``source`` is either a design CSV (every row is evaluated on the
    configured grid) or a ``<id>_sdf.dsf`` file whose ``_vel.dsf`` sibling
    is exported alongside when ``vtk`` is set.

    Raises:
        ConfigError: Missing or unsupported source file
        MeshError: The surface touches the grid boundary
    """
    source = Path(source)
    if not source.is_file():
        raise ConfigError(f"Source not found: {source}")
    fmt = config.mesh.format
    result = ExportResult()
    with run_context("export-mesh", config, out_dir, {"source": str(source), "vtk": vtk}) as ctx:
        if source.suffix == ".csv":
            spec = config.grid.to_spec()
            for index, design in enumerate(read_designs(source)):
                sdf = sdf_grid(design, spec)
                stem = f"design_{index:05d}"
                result.meshes.append(export_mesh(surface_mesh(sdf, config.mesh), ctx.out_dir / f"{stem}.{fmt}", fmt))
                if vtk:
                    result.vtk.append(write_vtk(ctx.out_dir / f"{stem}.vtk", {"sdf": sdf}))
        elif source.suffix == ".dsf":
            sample = ingest_external(source)
            stem = sample.sample_id
            result.meshes.append(
                export_mesh(surface_mesh(sample.sdf, config.mesh), ctx.out_dir / f"{stem}.{fmt}", fmt)
            )
            if vtk:
                fields = {"sdf": sample.sdf, "velocity": sample.velocity}
                result.vtk.append(write_vtk(ctx.out_dir / f"{stem}.vtk", fields))
        else:
            raise ConfigError(f"Unsupported source '{source.suffix}', expected a design .csv or an SDF .dsf")
    return result


# --- plot ----------------------------------------------------------------------

def cmd_plot(
    config: PipelineConfig,
    run_dir: PathLike,
    out_dir: PathLike,
    checkpoint: Optional[PathLike] = None,
    dataset_dir: Optional[PathLike] = None,
) -> List[Path]:
    """
    Write HTML figures for the artifacts of a finished run.

    With ``checkpoint`` and ``dataset_dir`` it also plots target and predicted
    velocity slices of the first validation sample.

    Raises:
        ConfigError: Missing inputs, or nothing to plot
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"Run directory not found: {run_dir}")
    if (checkpoint is None) != (dataset_dir is None):
        raise ConfigError("Velocity slices need both --checkpoint and --dataset")

    figures = plots.run_figures(run_dir)
    if checkpoint is not None:
        if not Path(checkpoint).is_file():
            raise ConfigError(f"Checkpoint not found: {checkpoint}")
        dataset = _load_dataset(config, dataset_dir)
        sample = (dataset.val_samples or dataset.samples)[0]
        surrogate = load_surrogate(checkpoint)
        figures["velocity_slices"] = plots.velocity_slice_figure(
            sample.velocity, surrogate.predict(sample.sdf), surrogate.v_max
        )
    if not figures:
        raise ConfigError(f"No trajectory, metrics or ablation table in {run_dir}")

    parameters = {"run_dir": str(run_dir), "checkpoint": str(checkpoint or ""), "figures": sorted(figures)}
    with run_context("plot", config, out_dir, parameters) as ctx:
        return [plots.save_figure(fig, ctx.out_dir / f"{name}.html") for name, fig in figures.items()]
