"""
Analytic flow oracle and dataset assembly.

The oracle stands in for a CFD solver. Velocity is the freestream damped by
an exponential boundary layer on the SDF and by a downstream wake deficit:

    U = U_inf * (1 - exp(-SDF / decay_length)) * (1 - wake_factor * w)   (SDF > 0)
    U = 0                                                                   (SDF <= 0)

The wake ``w`` accumulates soft obstacle occupancy along +x grid rows with
exponential forgetting over ``wake_length`` and saturates as
``1 - exp(-S / wake_saturation)``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy.special import expit

from shapeflow.core.exceptions import DatasetFormatError, SpecMismatchError
from shapeflow.models.dataset import Dataset, FilterReport, RejectRecord, Sample
from shapeflow.models.design import PARAM_NAMES, DesignParams
from shapeflow.models.fields import GridSpec, Int3, ScalarField3, VectorField3
from shapeflow.models.schemas import OracleConfig
from shapeflow.services.fields import centered_window, crop_to_window
from shapeflow.services.geometry import sdf_grid
from shapeflow.utils.io import fmt17, read_field, read_table, write_field, write_table

logger = structlog.get_logger()

PathLike = Union[str, Path]

UMAG_THRESHOLD = 160.0
MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ["id", *PARAM_NAMES, "retained", "reject_reason", "max_umag"]


def wake_deficit(sdf: ScalarField3, cfg: OracleConfig) -> np.ndarray:
    """Wake kernel ``w`` in [0, 1) per node."""
    occupancy = expit(-np.asarray(sdf.values) / cfg.occupancy_softness)
    dx = sdf.spec.spacing[0]
    keep = np.exp(-dx / cfg.wake_length)
    accumulated = np.zeros_like(occupancy)
    for i in range(1, occupancy.shape[0]):
        accumulated[i] = accumulated[i - 1] * keep + occupancy[i - 1] * dx
    return 1.0 - np.exp(-accumulated / cfg.wake_saturation)


def synth_flow(
    sdf: ScalarField3,
    cfg: OracleConfig,
    noise_seed: Optional[int] = None,
) -> VectorField3:
    """
    Velocity field of the analytic oracle.

    Args:
        sdf: Obstacle SDF on the flow grid
        cfg: Oracle parameters
        noise_seed: Seed of the optional noise term; defaults to ``cfg.seed``

    Returns:
        Velocity field on ``sdf.spec``; exactly zero where SDF <= 0
    """
    s = np.asarray(sdf.values, dtype=np.float64)
    fluid = s > 0
    boundary_layer = -np.expm1(-np.where(fluid, s, 0.0) / cfg.decay_length)
    factor = np.where(fluid, boundary_layer * (1.0 - cfg.wake_factor * wake_deficit(sdf, cfg)), 0.0)
    freestream = np.asarray(cfg.freestream, dtype=np.float64)
    velocity = factor[..., None] * freestream

    if cfg.noise_level > 0:
        rng = np.random.default_rng(cfg.seed if noise_seed is None else noise_seed)
        noise = rng.standard_normal(velocity.shape) * cfg.noise_level * np.linalg.norm(freestream)
        velocity = velocity + np.where(fluid[..., None], noise, 0.0)
    return VectorField3(sdf.spec, velocity)


def make_sample(
    params: DesignParams,
    spec: GridSpec,
    window: Int3,
    cfg: OracleConfig,
    sample_id: str = "",
    noise_seed: Optional[int] = None,
) -> Sample:
    """Full-domain SDF and flow, cropped to a window centered on the obstacle."""
    sdf = sdf_grid(params, spec)
    velocity = synth_flow(sdf, cfg, noise_seed=noise_seed)
    origin = centered_window(sdf, window)
    return Sample(
        params=params,
        sdf=crop_to_window(sdf, origin, window),
        velocity=crop_to_window(velocity, origin, window),
        sample_id=sample_id,
    )


def sample_id_for(index: int) -> str:
    return f"s{index:05d}"


def generate_samples(
    designs: Sequence[DesignParams],
    spec: GridSpec,
    window: Int3,
    cfg: OracleConfig,
    threads: int = 1,
    inject_nan: Sequence[int] = (),
) -> List[Sample]:
    """
    Evaluate the oracle for every design.

    ``inject_nan`` lists sample indices whose velocity gets a NaN at the
    window center, which exercises the hygiene filter.
    """
    poisoned = set(inject_nan)

    def _one(item: Tuple[int, DesignParams]) -> Sample:
        index, params = item
        sample = make_sample(
            params, spec, window, cfg, sample_id_for(index), noise_seed=cfg.seed + index
        )
        if index in poisoned:
            values = np.array(sample.velocity.values)
            values[tuple(d // 2 for d in window)] = np.nan
            sample = Sample(sample.params, sample.sdf, sample.velocity.with_values(values), sample.sample_id)
        return sample

    items = list(enumerate(designs))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(_one, items))
    else:
        samples = [_one(item) for item in items]
    logger.info("Samples generated", count=len(samples), threads=threads)
    return samples


def _max_umag(sample: Sample) -> float:
    umag = np.linalg.norm(sample.velocity.values, axis=-1)
    return float(np.max(umag))


def filter_samples(
    samples: Sequence[Sample],
    threshold: float = UMAG_THRESHOLD,
) -> Tuple[List[Sample], FilterReport]:
    """
    Drop samples with non-finite values or any node with ``|U| > threshold``.

    Returns:
        Tuple of (retained samples, report with the first offending node of
        each rejected sample)
    """
    retained: List[Sample] = []
    report = FilterReport()
    for index, sample in enumerate(samples):
        bad = ~np.isfinite(sample.sdf.values) | ~np.all(np.isfinite(sample.velocity.values), axis=-1)
        umag = np.linalg.norm(sample.velocity.values, axis=-1)
        max_umag = float(np.max(umag))
        if np.any(bad):
            node = tuple(int(v) for v in np.argwhere(bad)[0])
            report.rejected.append(RejectRecord(index, sample.sample_id, "nan", node, max_umag))
            continue
        if max_umag > threshold:
            node = tuple(int(v) for v in np.unravel_index(np.argmax(umag), umag.shape))
            report.rejected.append(RejectRecord(index, sample.sample_id, "umag", node, max_umag))
            continue
        report.retained.append(index)
        retained.append(sample)

    for record in report.rejected:
        logger.warning(
            "Sample rejected",
            sample_id=record.sample_id,
            reason=record.reason,
            node=record.node,
            max_umag=record.max_umag,
        )
    return retained, report


def split_indices(n: int, seed: int, train_ratio: int = 6, val_ratio: int = 1) -> Tuple[List[int], List[int]]:
    """Seeded shuffle split; ``round(n * val / (train + val))`` samples go to validation."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_ratio / (train_ratio + val_ratio)))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def assemble_dataset(
    samples: Sequence[Sample],
    threshold: float = UMAG_THRESHOLD,
    split_seed: int = 0,
    train_ratio: int = 6,
    val_ratio: int = 1,
    v_max: Optional[float] = None,
) -> Tuple[Dataset, FilterReport]:
    """Filter, normalize and split; ``v_max`` overrides the corpus maximum."""
    retained, report = filter_samples(samples, threshold)
    if not retained:
        raise ValueError("No samples survived filtering")
    normalization = v_max if v_max is not None else max(_max_umag(s) for s in retained)
    split = split_indices(len(retained), split_seed, train_ratio, val_ratio)
    dataset = Dataset(samples=list(retained), normalization=float(normalization), split=split)
    logger.info(
        "Dataset assembled",
        retained=report.num_retained,
        rejected=report.num_rejected,
        v_max=dataset.normalization,
        train=len(split[0]),
        val=len(split[1]),
    )
    return dataset, report


def build_dataset(
    designs: Sequence[DesignParams],
    spec: GridSpec,
    window: Int3,
    cfg: OracleConfig,
    split_seed: int = 0,
    threads: int = 1,
) -> Dataset:
    samples = generate_samples(designs, spec, window, cfg, threads=threads)
    dataset, _ = assemble_dataset(samples, split_seed=split_seed)
    return dataset


# --- persistence ---------------------------------------------------------

def sample_paths(directory: PathLike, sample_id: str) -> Tuple[Path, Path]:
    directory = Path(directory)
    return directory / f"{sample_id}_sdf.dsf", directory / f"{sample_id}_vel.dsf"


def write_sample(directory: PathLike, sample: Sample) -> Tuple[Path, Path]:
    sdf_path, vel_path = sample_paths(directory, sample.sample_id)
    write_field(sdf_path, sample.sdf)
    write_field(vel_path, sample.velocity)
    return sdf_path, vel_path


def save_dataset(directory: PathLike, samples: Sequence[Sample], report: FilterReport) -> Path:
    """Write every sample as a DSF1 pair and the manifest CSV; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rejected: Dict[int, RejectRecord] = {r.index: r for r in report.rejected}

    rows = []
    for index, sample in enumerate(samples):
        write_sample(directory, sample)
        values = sample.params.to_array() if sample.params is not None else [np.nan] * 6
        record = rejected.get(index)
        rows.append(
            {
                "id": sample.sample_id,
                **{name: fmt17(v) for name, v in zip(PARAM_NAMES, values)},
                "retained": "false" if record else "true",
                "reject_reason": record.reason if record else "",
                "max_umag": fmt17(record.max_umag if record else _max_umag(sample)),
            }
        )
    path = write_table(directory / MANIFEST_NAME, rows, MANIFEST_COLUMNS)
    logger.info("Dataset written", directory=str(directory), samples=len(samples))
    return path


def ingest_external(sdf_path: PathLike, vel_path: Optional[PathLike] = None) -> Sample:
    """
    Build a sample from an externally produced DSF1 pair.

    ``vel_path`` defaults to the ``_vel.dsf`` sibling of an ``_sdf.dsf`` file.

    Raises:
        DatasetFormatError: Malformed file or wrong field kind
        SpecMismatchError: The two files disagree on their grid
    """
    sdf_path = Path(sdf_path)
    if vel_path is None:
        if not sdf_path.name.endswith("_sdf.dsf"):
            raise DatasetFormatError("Cannot infer velocity file name", str(sdf_path))
        vel_path = sdf_path.with_name(sdf_path.name[: -len("_sdf.dsf")] + "_vel.dsf")
    vel_path = Path(vel_path)

    sdf = read_field(sdf_path)
    velocity = read_field(vel_path)
    if sdf.kind != "scalar":
        raise DatasetFormatError(f"Expected a scalar field, found {sdf.kind}", str(sdf_path), 5)
    if velocity.kind != "vector":
        raise DatasetFormatError(f"Expected a vector field, found {velocity.kind}", str(vel_path), 5)
    if sdf.spec != velocity.spec:
        raise SpecMismatchError(
            f"Grid mismatch: {sdf.spec} vs {velocity.spec}", str(vel_path), 0
        )
    sample_id = sdf_path.name[: -len("_sdf.dsf")] if sdf_path.name.endswith("_sdf.dsf") else sdf_path.stem
    return Sample(params=None, sdf=sdf, velocity=velocity, sample_id=sample_id)


def load_samples(directory: PathLike, retained_only: bool = True) -> List[Sample]:
    """Read the samples listed in a dataset directory's manifest."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"No dataset manifest at {manifest}")
    frame = read_table(manifest)
    samples = []
    for _, row in frame.iterrows():
        if retained_only and str(row["retained"]) != "true":
            continue
        sample_id = str(row["id"])
        loaded = ingest_external(*sample_paths(directory, sample_id))
        params = DesignParams(*(float(row[name]) for name in PARAM_NAMES))
        samples.append(Sample(params, loaded.sdf, loaded.velocity, sample_id))
    logger.info("Dataset loaded", directory=str(directory), samples=len(samples))
    return samples
