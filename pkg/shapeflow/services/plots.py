"""
Figures of pipeline runs.

Every figure is built from an artifact a command already wrote
(``trajectory.csv``, ``metrics.csv``, ``ablation.csv`` and the per-variant
``metrics.csv`` files under an ablation run) or from a surrogate prediction
on a dataset sample. Figures are written as standalone HTML.
"""

from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import structlog
from plotly.subplots import make_subplots

from shapeflow.models.fields import VectorField3
from shapeflow.services.mma import TRAJECTORY_COLUMNS
from shapeflow.services.surrogate.trainer import METRICS_COLUMNS
from shapeflow.utils.io import read_table

logger = structlog.get_logger()

PathLike = Union[str, Path]

FIGURE_HEIGHT = 400
DESIGN_COLUMNS = [c for c in TRAJECTORY_COLUMNS if c not in ("iter", "objective", "grad_norm", "rel_change")]


def numeric_table(path: PathLike, columns) -> pd.DataFrame:
    """Read ``columns`` of a pipeline CSV as floats."""
    frame = read_table(path)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ValueError(f"{path} lacks columns {missing}")
    return frame[list(columns)].apply(pd.to_numeric)


def convergence_figure(trajectory: pd.DataFrame) -> go.Figure:
    """Objective and design parameters over the MMA iterations."""
    fig = make_subplots(
        rows=1,
        cols=2,
        subplot_titles=("Objective (mean x-velocity)", "Design parameters"),
    )
    fig.add_trace(
        go.Scatter(x=trajectory["iter"], y=trajectory["objective"], name="objective", mode="lines+markers"),
        row=1,
        col=1,
    )
    for name in DESIGN_COLUMNS:
        fig.add_trace(
            go.Scatter(x=trajectory["iter"], y=trajectory[name], name=name, mode="lines+markers"),
            row=1,
            col=2,
        )
    fig.update_xaxes(title_text="Iteration")
    fig.update_layout(title="Shape optimization", height=FIGURE_HEIGHT)
    return fig


def training_figure(history: pd.DataFrame) -> go.Figure:
    """Train / validation MSE and the error-gradient correlation per epoch."""
    fig = make_subplots(specs=[[{"secondary_y": True}]])
    for column in ("train_mse", "val_mse"):
        fig.add_trace(
            go.Scatter(x=history["epoch"], y=history[column], name=column, mode="lines"),
            secondary_y=False,
        )
    fig.add_trace(
        go.Scatter(
            x=history["epoch"],
            y=history["corr_grad_err"],
            name="corr_grad_err",
            mode="lines",
            line={"dash": "dash"},
        ),
        secondary_y=True,
    )
    fig.update_yaxes(title_text="MSE", type="log", secondary_y=False)
    fig.update_yaxes(title_text="Corr", range=[-1.0, 1.0], secondary_y=True)
    fig.update_layout(title="Surrogate training", xaxis_title="Epoch", height=FIGURE_HEIGHT)
    return fig


def ablation_figure(curves: Mapping[str, pd.DataFrame], report: Optional[pd.DataFrame] = None) -> go.Figure:
    """
    Validation loss per ablation variant.

    Uses the per-epoch curves when present and falls back to a bar chart of
    the best validation MSE from the report.
    """
    if curves:
        long = pd.concat(
            [frame.assign(variant=label) for label, frame in curves.items()],
            ignore_index=True,
        )
        fig = px.line(long, x="epoch", y="val_mse", color="variant", log_y=True, title="Ablation: validation MSE")
    elif report is not None:
        fig = px.bar(report, x="variant", y="best_val_mse", log_y=True, title="Ablation: best validation MSE")
    else:
        raise ValueError("ablation_figure needs curves or a report")
    fig.update_layout(height=FIGURE_HEIGHT)
    return fig


def velocity_slice_figure(
    target: Optional[VectorField3],
    prediction: VectorField3,
    normalization: float,
    component: int = 0,
) -> go.Figure:
    """
    Mid-plane slices of one normalized velocity component.

    Shows target, prediction and their absolute difference side by side,
    or the prediction alone when ``target`` is None.
    """
    spec = prediction.spec
    k = spec.dims[2] // 2
    x = spec.origin[0] + spec.spacing[0] * np.arange(spec.dims[0])
    y = spec.origin[1] + spec.spacing[1] * np.arange(spec.dims[1])

    def plane(field: VectorField3) -> np.ndarray:
        return np.asarray(field.values)[:, :, k, component].T / normalization

    panels: Dict[str, np.ndarray] = {}
    if target is not None:
        panels["target"] = plane(target)
    panels["prediction"] = plane(prediction)
    if target is not None:
        panels["|error|"] = np.abs(panels["target"] - panels["prediction"])

    fig = make_subplots(rows=1, cols=len(panels), subplot_titles=tuple(panels), shared_yaxes=True)
    for col, (name, values) in enumerate(panels.items(), start=1):
        error = name == "|error|"
        fig.add_trace(
            go.Heatmap(
                z=values,
                x=x,
                y=y,
                colorscale="Reds" if error else "Viridis",
                zmin=0.0 if error else -1.0,
                zmax=1.0,
                showscale=col == len(panels),
                name=name,
            ),
            row=1,
            col=col,
        )
    axis = "xyz"[component]
    fig.update_layout(
        title=f"Normalized U{axis} at z = {spec.origin[2] + k * spec.spacing[2]:.3g}",
        height=FIGURE_HEIGHT,
    )
    return fig


def save_figure(fig: go.Figure, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(path, include_plotlyjs="cdn")
    logger.info("Figure written", path=str(path))
    return path


def run_figures(run_dir: PathLike) -> Dict[str, go.Figure]:
    """
    Figures for every artifact found in a run directory.

    Returns:
        Mapping of figure name to figure; empty when the directory holds
        none of the known artifacts
    """
    run_dir = Path(run_dir)
    figures: Dict[str, go.Figure] = {}

    trajectory = run_dir / "trajectory.csv"
    if trajectory.is_file():
        figures["convergence"] = convergence_figure(numeric_table(trajectory, TRAJECTORY_COLUMNS))

    metrics = run_dir / "metrics.csv"
    if metrics.is_file():
        figures["training"] = training_figure(numeric_table(metrics, METRICS_COLUMNS))

    report_path = run_dir / "ablation.csv"
    if report_path.is_file():
        report = read_table(report_path)
        report["best_val_mse"] = pd.to_numeric(report["best_val_mse"])
        curves = {
            label: numeric_table(run_dir / label / "metrics.csv", METRICS_COLUMNS)
            for label in report["variant"]
            if (run_dir / label / "metrics.csv").is_file()
        }
        figures["ablation"] = ablation_figure(curves, report)
    return figures
