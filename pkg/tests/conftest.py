"""
Test configuration and fixtures for pytest.
"""

from pathlib import Path

import numpy as np
import pytest
import yaml

from shapeflow.core.config import load_pipeline_config
from shapeflow.models.design import DesignParams
from shapeflow.models.fields import GridSpec, ScalarField3
from shapeflow.models.schemas import PipelineConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training and end-to-end runs (minutes)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    """5 x 4 x 3 grid with non-uniform spacing."""
    return GridSpec(origin=(1.0, -2.0, 0.5), spacing=(0.5, 0.25, 2.0), dims=(5, 4, 3))


@pytest.fixture
def sphere_field():
    """Unit-sphere SDF on a 33^3 grid spanning [-2, 2]^3."""
    spec = GridSpec(origin=(-2.0, -2.0, -2.0), spacing=(0.125, 0.125, 0.125), dims=(33, 33, 33))
    positions = spec.node_positions()
    return ScalarField3(spec, np.linalg.norm(positions, axis=-1) - 1.0)


@pytest.fixture
def capsule():
    """Equal radii, axis along +x."""
    return DesignParams(r_a=1.0, r_b=1.0, L=4.0)


@pytest.fixture
def tilted_cone():
    return DesignParams(r_a=1.2, r_b=0.6, L=3.0, theta_x=0.2, theta_y=-0.3, theta_z=0.4)


@pytest.fixture
def desk_config() -> PipelineConfig:
    return load_pipeline_config("desk")


def tiny_overrides(tmp_path) -> dict:
    """Desk preset shrunk so every command finishes in seconds."""
    return {
        "grid": {"origin": [-3.0, -3.0, -3.0], "spacing": [0.3, 0.3, 0.3], "dims": [32, 20, 20]},
        "dataset": {"count": 8, "window": [16, 8, 8]},
        "sampling": {"r_a": [0.6, 1.0], "r_b": [0.6, 1.0], "L": [2.0, 3.0]},
        "unet": {"levels": 2, "channels": [4, 8], "blocks_per_level": 1},
        "train": {"epochs": 2, "batch_size": 4, "learning_rate": 0.01},
        "optimize": {
            "initial": {"r_a": 1.0, "r_b": 1.0, "L": 3.0, "theta_x": 0.0, "theta_y": 0.0, "theta_z": 0.3},
            "lower": {"r_a": 0.6, "r_b": 0.6, "L": 2.0, "theta_x": 0.0, "theta_y": 0.0, "theta_z": -0.3},
            "upper": {"r_a": 1.0, "r_b": 1.0, "L": 3.0, "theta_x": 0.0, "theta_y": 0.0, "theta_z": 0.3},
            "stop": {"max_iters": 3, "rel_change_tol": 0.01},
        },
        "output_dir": str(tmp_path / "runs"),
    }


@pytest.fixture
def tiny_config(tmp_path) -> PipelineConfig:
    return load_pipeline_config("desk", overrides=tiny_overrides(tmp_path))


@pytest.fixture
def tiny_yaml(tmp_path) -> Path:
    """The tiny overrides as a --config file."""
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_overrides(tmp_path)), encoding="utf-8")
    return path
