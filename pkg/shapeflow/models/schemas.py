"""Pydantic schemas for pipeline configuration."""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from shapeflow.models.fields import GridSpec

INPUT_LAYOUT = ["sdf", "sin_x", "cos_x", "sin_y", "cos_y", "sin_z", "cos_z", "mask"]


class GridConfig(BaseModel):
    """Full simulation domain."""
    origin: Tuple[float, float, float] = (-8.0, -6.0, -6.0)
    spacing: Tuple[float, float, float] = (0.3, 0.3, 0.3)
    dims: Tuple[int, int, int] = (64, 40, 40)

    @field_validator("spacing")
    @classmethod
    def _positive_spacing(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("spacing components must be > 0")
        return v

    @field_validator("dims")
    @classmethod
    def _min_dims(cls, v):
        if any(d < 2 for d in v):
            raise ValueError("dims must be >= 2 per axis")
        return v

    def to_spec(self) -> GridSpec:
        return GridSpec(origin=self.origin, spacing=self.spacing, dims=self.dims)


class OracleConfig(BaseModel):
    """Synthetic flow oracle parameters."""
    freestream: Tuple[float, float, float] = (100.0, 0.0, 0.0)
    decay_length: float = Field(default=0.5, gt=0)
    wake_factor: float = Field(default=0.3, ge=0)
    wake_length: float = Field(default=8.0, gt=0)
    wake_saturation: float = Field(default=1.0, gt=0)
    occupancy_softness: float = Field(default=0.1, gt=0)
    noise_level: float = Field(default=0.0, ge=0)
    seed: int = 0


class SamplingRanges(BaseModel):
    """Closed sampling intervals per design parameter."""
    r_a: Tuple[float, float] = (0.5, 1.5)
    r_b: Tuple[float, float] = (0.5, 1.5)
    L: Tuple[float, float] = (2.0, 5.0)
    theta_x: Tuple[float, float] = (-0.5, 0.5)
    theta_y: Tuple[float, float] = (-0.5, 0.5)
    theta_z: Tuple[float, float] = (-0.5, 0.5)
    free_angle: Literal["theta_x", "theta_y", "theta_z"] = "theta_z"
    seed: int = 0

    @model_validator(mode="after")
    def _ordered(self):
        for name in ("r_a", "r_b", "L", "theta_x", "theta_y", "theta_z"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} interval must satisfy lo <= hi, got ({lo}, {hi})")
        return self


class DatasetConfig(BaseModel):
    """Data generation settings."""
    count: int = Field(default=64, ge=1)
    window: Tuple[int, int, int] = (40, 20, 20)
    split_seed: int = 0
    train_ratio: int = Field(default=6, ge=1)
    val_ratio: int = Field(default=1, ge=1)
    umag_threshold: float = Field(default=160.0, gt=0)
    # fixed velocity normalization; None derives it from the retained samples
    v_max: Optional[float] = Field(default=None, gt=0)
    export_meshes: bool = False


class UNetConfig(BaseModel):
    """Encoder-decoder surrogate architecture."""
    levels: int = Field(default=2, ge=1)
    channels: List[int] = Field(default_factory=lambda: [16, 32])
    attention: bool = True
    attention_inter_channels: Optional[int] = None
    mask_mode: Literal["hard", "sigmoid"] = "hard"
    mask_temperature: float = 0.5
    blocks_per_level: int = Field(default=2, ge=1)
    input_layout: List[str] = Field(default_factory=lambda: list(INPUT_LAYOUT))
    out_channels: int = 3
    weight_seed: int = 0

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.channels) != self.levels:
            raise ValueError(
                f"channels has {len(self.channels)} entries but levels={self.levels}"
            )
        if any(c < 1 for c in self.channels):
            raise ValueError("channel counts must be positive")
        if self.mask_mode == "sigmoid" and not self.mask_temperature > 0:
            raise ValueError("mask_temperature must be > 0 for the sigmoid mask")
        if self.input_layout != INPUT_LAYOUT:
            raise ValueError(f"input_layout must be {INPUT_LAYOUT}")
        return self

    @property
    def in_channels(self) -> int:
        return len(self.input_layout)


class TrainConfig(BaseModel):
    """Surrogate training recipe."""
    batch_size: int = Field(default=64, gt=0)
    learning_rate: float = Field(default=1.5e-4, gt=0)
    epochs: int = Field(default=400, gt=0)
    seed: int = 0
    preset: Literal["paper", "desk"] = "paper"


class StopCriteria(BaseModel):
    """MMA loop termination."""
    max_iters: int = Field(default=20, gt=0)
    rel_change_tol: float = Field(default=0.01, gt=0)


class OptimizeConfig(BaseModel):
    """Design optimization settings."""
    initial: Dict[str, float] = Field(
        default_factory=lambda: {
            "r_a": 1.5, "r_b": 1.5, "L": 5.0,
            "theta_x": 0.0, "theta_y": 0.0, "theta_z": 0.5,
        }
    )
    lower: Dict[str, float] = Field(
        default_factory=lambda: {
            "r_a": 0.5, "r_b": 0.5, "L": 2.0,
            "theta_x": 0.0, "theta_y": 0.0, "theta_z": -0.5,
        }
    )
    upper: Dict[str, float] = Field(
        default_factory=lambda: {
            "r_a": 1.5, "r_b": 1.5, "L": 5.0,
            "theta_x": 0.0, "theta_y": 0.0, "theta_z": 0.5,
        }
    )
    stop: StopCriteria = Field(default_factory=StopCriteria)
    window_mode: Literal["track", "fixed"] = "track"
    export_final_mesh: bool = False


class MeshConfig(BaseModel):
    """Surface extraction and export."""
    iso: float = 0.0
    smoothing_iterations: int = Field(default=10, ge=0)
    smoothing_lambda: float = Field(default=0.5, gt=0, le=1)
    format: Literal["obj", "stl"] = "obj"


class GradcheckConfig(BaseModel):
    """Finite-difference validation settings."""
    probes: int = Field(default=20, gt=0)
    step: float = Field(default=1e-4, gt=0)
    # design-space probes; the SDF is only C1 across its branch boundaries
    param_step: float = Field(default=1e-6, gt=0)
    geometry_tol: float = 1e-6
    network_tol: float = 1e-2
    chain_tol: float = 1e-3
    window: Tuple[int, int, int] = (12, 8, 8)
    channels: List[int] = Field(default_factory=lambda: [4, 8])
    seed: int = 0


class AblationVariant(BaseModel):
    """One row of the attention / masking ablation."""
    attention: bool
    mask_mode: Literal["hard", "sigmoid"]
    mask_temperature: Optional[float] = None


class AblationConfig(BaseModel):
    variants: List[AblationVariant] = Field(
        default_factory=lambda: [
            AblationVariant(attention=True, mask_mode="hard"),
            AblationVariant(attention=False, mask_mode="hard"),
            AblationVariant(attention=True, mask_mode="sigmoid", mask_temperature=0.5),
            AblationVariant(attention=True, mask_mode="sigmoid", mask_temperature=0.1),
        ]
    )


class PipelineConfig(BaseModel):
    """Resolved configuration for every pipeline command."""
    preset: Literal["paper", "desk"] = "desk"
    grid: GridConfig = Field(default_factory=GridConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    sampling: SamplingRanges = Field(default_factory=SamplingRanges)
    unet: UNetConfig = Field(default_factory=UNetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    optimize: OptimizeConfig = Field(default_factory=OptimizeConfig)
    mesh: MeshConfig = Field(default_factory=MeshConfig)
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    threads: int = Field(default=1, ge=1)
    output_dir: str = "runs"

    @model_validator(mode="after")
    def _window_fits(self):
        window = self.dataset.window
        if any(w < 2 or w > d for w, d in zip(window, self.grid.dims)):
            raise ValueError(f"window {window} does not fit grid dims {self.grid.dims}")
        return self

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with every stage seed set to ``seed``."""
        data = self.model_dump()
        data["sampling"]["seed"] = seed
        data["dataset"]["split_seed"] = seed
        data["train"]["seed"] = seed
        data["unet"]["weight_seed"] = seed
        data["gradcheck"]["seed"] = seed
        return PipelineConfig.model_validate(data)


class RunManifest(BaseModel):
    """Provenance record written next to every command's artifacts."""
    command: str
    toolkit_version: str
    preset: str
    config_hash: str
    seeds: Dict[str, int]
    threads: int
    parameters: Dict[str, object] = Field(default_factory=dict)


class SurrogateManifest(BaseModel):
    """Sidecar manifest of a trained checkpoint."""
    v_max: float
    sdf_scale: float
    unet: UNetConfig
    window: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    split_seed: int
    best_epoch: int
    dtype: str = "float32"
