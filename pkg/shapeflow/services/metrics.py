"""
Prometheus Run Metrics

Counters and gauges for one pipeline command, exported as a node-exporter
textfile next to the command's artifacts.
"""

from pathlib import Path
from typing import Dict, Optional, Union

import structlog
from prometheus_client import (
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    generate_latest,
    write_to_textfile,
)

logger = structlog.get_logger()


class RunMetrics:
    """
    Prometheus metrics for a pipeline run.

    Tracks:
    - Generated and rejected samples
    - Training epoch durations and losses
    - Optimization objective, gradient norm and iterations
    - Gradient-check errors per stage
    """

    def __init__(self, registry: Optional[CollectorRegistry] = None):
        self.initialized = False
        self.metrics: Dict = {}
        self.registry = registry or CollectorRegistry()

    def initialize(self):
        """Create collectors on the private registry."""
        if self.initialized:
            return

        self.metrics["samples_total"] = Counter(
            "shapeflow_samples_total",
            "Generated samples by filter outcome",
            ["status", "reason"],
            registry=self.registry,
        )

        self.metrics["epoch_duration"] = Histogram(
            "shapeflow_epoch_duration_seconds",
            "Training epoch wall time in seconds",
            buckets=[0.5, 1.0, 5.0, 15.0, 60.0, 300.0, 1800.0],
            registry=self.registry,
        )

        self.metrics["train_mse"] = Gauge(
            "shapeflow_train_mse",
            "Training MSE of the last epoch (normalized units)",
            registry=self.registry,
        )

        self.metrics["val_mse"] = Gauge(
            "shapeflow_val_mse",
            "Validation MSE of the last epoch (normalized units)",
            registry=self.registry,
        )

        self.metrics["objective"] = Gauge(
            "shapeflow_objective",
            "Objective value at the last optimization iterate",
            registry=self.registry,
        )

        self.metrics["grad_norm"] = Gauge(
            "shapeflow_grad_norm",
            "Objective gradient norm at the last optimization iterate",
            registry=self.registry,
        )

        self.metrics["mma_iterations"] = Counter(
            "shapeflow_mma_iterations_total",
            "MMA iterations performed",
            registry=self.registry,
        )

        self.metrics["gradcheck_error"] = Gauge(
            "shapeflow_gradcheck_max_rel_error",
            "Maximum relative vjp error per stage",
            ["stage"],
            registry=self.registry,
        )

        self.initialized = True
        logger.debug("Prometheus metrics initialized")

    def record_sample(self, status: str, reason: str = ""):
        """
        Record one generated sample.

        Args:
            status: "retained" or "rejected"
            reason: Rejection reason ("nan", "umag") or empty
        """
        if self.initialized:
            self.metrics["samples_total"].labels(status=status, reason=reason).inc()

    def record_epoch(self, duration_s: float, train_mse: float, val_mse: float):
        if self.initialized:
            self.metrics["epoch_duration"].observe(duration_s)
            self.metrics["train_mse"].set(train_mse)
            self.metrics["val_mse"].set(val_mse)

    def record_iteration(self, objective: float, grad_norm: float):
        if self.initialized:
            self.metrics["mma_iterations"].inc()
            self.metrics["objective"].set(objective)
            self.metrics["grad_norm"].set(grad_norm)

    def record_gradcheck(self, stage: str, max_rel_error: float):
        if self.initialized:
            self.metrics["gradcheck_error"].labels(stage=stage).set(max_rel_error)

    def get_metrics(self) -> bytes:
        """
        Get Prometheus metrics in exposition format.

        Returns:
            Metrics in Prometheus text format
        """
        return generate_latest(self.registry)

    def write_textfile(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_to_textfile(str(path), self.registry)
        logger.debug("Metrics written", path=str(path))
        return path
