"""
Surrogate training.

Targets are velocity windows divided by the dataset normalization ``v_max``;
the loss is the MSE over all nodes and components. Batches are reshuffled
every epoch from a generator seeded once per run. With ``threads > 1`` each
batch is split into contiguous shards whose gradients are computed in
parallel and summed in shard order.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog

from shapeflow.core.exceptions import TrainingDivergedError
from shapeflow.models.dataset import Dataset, Sample
from shapeflow.models.fields import VectorField3
from shapeflow.models.schemas import SurrogateManifest, TrainConfig, UNetConfig
from shapeflow.nn import functional as F
from shapeflow.nn.optim import AdamState, adam_step
from shapeflow.nn.tensor import Tape, Tensor, default_dtype
from shapeflow.services.metrics import RunMetrics
from shapeflow.services.surrogate.inference import Surrogate
from shapeflow.services.surrogate.inputs import build_input
from shapeflow.services.surrogate.metrics import error_gradient_corr
from shapeflow.services.surrogate.unet import UNet
from shapeflow.utils.io import fmt17, write_table

logger = structlog.get_logger()

METRICS_COLUMNS = ["epoch", "train_mse", "val_mse", "corr_grad_err"]
EVAL_BATCH = 8


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    corr_grad_err: float


@dataclass
class TrainResult:
    surrogate: Surrogate
    best: Surrogate
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_record(self) -> EpochRecord:
        return self.history[self.best_epoch - 1]


def corpus_sdf_scale(samples: Sequence[Sample]) -> float:
    """``max|SDF|`` over the given samples, 1.0 for an all-zero corpus."""
    scale = max(float(np.max(np.abs(s.sdf.values))) for s in samples)
    return scale if scale > 0 else 1.0


def _targets(samples: Sequence[Sample], v_max: float) -> np.ndarray:
    return np.stack([np.moveaxis(s.velocity.values, -1, 0) / v_max for s in samples]).astype(default_dtype())


def _inputs(samples: Sequence[Sample], cfg: UNetConfig, sdf_scale: float) -> np.ndarray:
    return np.stack([build_input(s.sdf, cfg, sdf_scale) for s in samples]).astype(default_dtype())


def _shard_gradients(model: UNet, x: np.ndarray, y: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    params = model.parameters()
    with Tape() as tape:
        loss = F.mse(model(Tensor(x)), y)
    return float(loss.values), tape.gradients(loss, params)


def batch_gradients(
    model: UNet,
    x: np.ndarray,
    y: np.ndarray,
    pool: Optional[ThreadPoolExecutor] = None,
    shards: int = 1,
) -> Tuple[float, List[np.ndarray]]:
    """Batch loss and parameter gradients, optionally sharded across a thread pool."""
    n = len(x)
    shards = max(1, min(shards, n))
    if pool is None or shards == 1:
        return _shard_gradients(model, x, y)

    bounds = np.linspace(0, n, shards + 1).astype(int)
    jobs = [(x[a:b], y[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    results = list(pool.map(lambda job: _shard_gradients(model, *job), jobs))

    loss = 0.0
    grads = [np.zeros(p.shape, dtype=np.float64) for p in model.parameters()]
    for (xs, _), (shard_loss, shard_grads) in zip(jobs, results):
        weight = len(xs) / n
        loss += weight * shard_loss
        for total, g in zip(grads, shard_grads):
            total += weight * g
    return loss, grads


def evaluate(model: UNet, x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    """MSE over a set and the raw predictions ``(N, 3, D, H, W)``."""
    preds = []
    for start in range(0, len(x), EVAL_BATCH):
        preds.append(model(Tensor(x[start:start + EVAL_BATCH])).values)
    pred = np.concatenate(preds).astype(np.float64)
    return float(np.mean((pred - y) ** 2)), pred


def mean_error_gradient_corr(samples: Sequence[Sample], pred: np.ndarray, y: np.ndarray) -> float:
    """Average of the per-sample error-gradient correlation, skipping degenerate samples."""
    values = []
    for sample, p, t in zip(samples, pred, y):
        spec = sample.velocity.spec
        corr, degenerate = error_gradient_corr(
            VectorField3(spec, np.moveaxis(p, 0, -1)), VectorField3(spec, np.moveaxis(t, 0, -1))
        )
        if not degenerate:
            values.append(corr)
    return float(np.mean(values)) if values else 0.0


def train(
    dataset: Dataset,
    ucfg: UNetConfig,
    tcfg: TrainConfig,
    out_dir: Optional[Path] = None,
    threads: int = 1,
    metrics: Optional[RunMetrics] = None,
    split_seed: int = 0,
) -> TrainResult:
    """
    Train a U-Net on ``dataset``.

    Writes ``metrics.csv``, ``best.unw``, ``final.unw`` and ``surrogate.json``
    to ``out_dir`` when given.

    Raises:
        TrainingDivergedError: On a non-finite batch loss
    """
    train_samples = dataset.train_samples
    val_samples = dataset.val_samples
    if not train_samples:
        raise ValueError("Training split is empty")

    v_max = dataset.normalization
    sdf_scale = corpus_sdf_scale(train_samples)
    model = UNet(ucfg)
    spec = train_samples[0].sdf.spec
    model.check_dims(spec.dims)

    x_train = _inputs(train_samples, ucfg, sdf_scale)
    y_train = _targets(train_samples, v_max)
    x_val = _inputs(val_samples, ucfg, sdf_scale) if val_samples else None
    y_val = _targets(val_samples, v_max) if val_samples else None

    def manifest(best_epoch: int) -> SurrogateManifest:
        return SurrogateManifest(
            v_max=v_max,
            sdf_scale=sdf_scale,
            unet=ucfg,
            window=spec.dims,
            spacing=spec.spacing,
            split_seed=split_seed,
            best_epoch=best_epoch,
        )

    params = model.parameters()
    state = AdamState.for_params(params, tcfg.learning_rate)
    rng = np.random.default_rng(tcfg.seed)
    history: List[EpochRecord] = []
    best_val = math.inf
    best_epoch = 0
    best_state = model.state_dict()

    logger.info(
        "Training started",
        train=len(train_samples),
        val=len(val_samples),
        parameters=model.num_parameters(),
        epochs=tcfg.epochs,
        batch_size=tcfg.batch_size,
        learning_rate=tcfg.learning_rate,
    )

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for epoch in range(1, tcfg.epochs + 1):
            started = time.perf_counter()
            order = rng.permutation(len(train_samples))
            total = 0.0
            for batch, start in enumerate(range(0, len(order), tcfg.batch_size)):
                idx = order[start:start + tcfg.batch_size]
                loss, grads = batch_gradients(model, x_train[idx], y_train[idx], pool, threads)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(epoch, batch, loss)
                adam_step(params, grads, state)
                total += loss * len(idx)
            train_mse = total / len(order)

            if x_val is not None:
                val_mse, pred = evaluate(model, x_val, y_val)
                corr = mean_error_gradient_corr(val_samples, pred, y_val)
            else:
                val_mse, corr = train_mse, 0.0

            record = EpochRecord(epoch, train_mse, val_mse, corr)
            history.append(record)
            if val_mse < best_val:
                best_val, best_epoch = val_mse, epoch
                best_state = model.state_dict()

            duration = time.perf_counter() - started
            if metrics is not None:
                metrics.record_epoch(duration, train_mse, val_mse)
            logger.info(
                "Epoch completed",
                epoch=epoch,
                train_mse=train_mse,
                val_mse=val_mse,
                corr_grad_err=corr,
                duration_s=round(duration, 3),
            )
    finally:
        if pool is not None:
            pool.shutdown()

    final = Surrogate(model, manifest(best_epoch))
    best_model = UNet(ucfg)
    best_model.load_state_dict(best_state)
    best = Surrogate(best_model, manifest(best_epoch))
    result = TrainResult(surrogate=final, best=best, history=history, best_epoch=best_epoch)

    if out_dir is not None:
        write_history(Path(out_dir) / "metrics.csv", history)
        final.save(Path(out_dir) / "final.unw")
        best.save(Path(out_dir) / "best.unw")
        sidecar = Path(out_dir) / "surrogate.json"
        sidecar.write_text(best.manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")

    logger.info("Training finished", best_epoch=best_epoch, best_val_mse=best_val)
    return result


def write_history(path: Path, history: Sequence[EpochRecord]) -> Path:
    rows = [
        {
            "epoch": str(r.epoch),
            "train_mse": fmt17(r.train_mse),
            "val_mse": fmt17(r.val_mse),
            "corr_grad_err": fmt17(r.corr_grad_err),
        }
        for r in history
    ]
    return write_table(path, rows, METRICS_COLUMNS)
