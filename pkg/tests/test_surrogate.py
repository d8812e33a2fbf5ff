"""
Tests for the surrogate: input channels, U-Net, inference stage, training and ablation.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from shapeflow.core.exceptions import CheckpointError, ConfigError, ShapeMismatchError, TrainingDivergedError
from shapeflow.models.dataset import Dataset
from shapeflow.models.design import DesignParams
from shapeflow.models.fields import GridSpec, VectorField3
from shapeflow.models.schemas import (
    AblationVariant,
    OracleConfig,
    SamplingRanges,
    SurrogateManifest,
    TrainConfig,
    UNetConfig,
)
from shapeflow.nn.checkpoint import save_checkpoint
from shapeflow.nn.tensor import Tensor, precision
from shapeflow.services.flow_oracle import assemble_dataset, generate_samples
from shapeflow.services.geometry import sample_designs, sdf_grid
from shapeflow.services.surrogate.ablation import REPORT_COLUMNS, run_ablation, variant_config, variant_label
from shapeflow.services.surrogate.inference import InferenceComponent, Surrogate, load_surrogate
from shapeflow.services.surrogate.inputs import (
    InputComponent,
    build_input,
    obstacle_mask,
    positional_channels,
)
from shapeflow.services.surrogate.metrics import error_gradient_corr, nearest_neighbor_gradient
from shapeflow.services.surrogate.trainer import batch_gradients, corpus_sdf_scale, train
from shapeflow.services.surrogate.unet import UNet
from shapeflow.utils.gradcheck import check_component
from shapeflow.utils.io import read_table

SAMPLE_GRID = GridSpec(origin=(-3.0, -3.0, -3.0), spacing=(0.3, 0.3, 0.3), dims=(32, 20, 20))
CONE = DesignParams(r_a=0.8, r_b=0.6, L=2.0, theta_z=0.3)


def window_sdf(dims=(8, 8, 8)):
    spec = GridSpec(origin=(-1.5, -1.2, -1.2), spacing=(0.3, 0.3, 0.3), dims=dims)
    return sdf_grid(CONE, spec)


def tiny_unet_config(**changes) -> UNetConfig:
    base = {"levels": 2, "channels": [4, 8], "blocks_per_level": 1, "weight_seed": 3}
    return UNetConfig(**{**base, **changes})


def tiny_surrogate(window=(8, 8, 8), **changes) -> Surrogate:
    ucfg = tiny_unet_config(**changes)
    manifest = SurrogateManifest(
        v_max=100.0,
        sdf_scale=2.0,
        unet=ucfg,
        window=window,
        spacing=(0.3, 0.3, 0.3),
        split_seed=0,
        best_epoch=0,
    )
    return Surrogate(UNet(ucfg), manifest)


def tiny_dataset(count: int = 12) -> Dataset:
    ranges = SamplingRanges(r_a=(0.6, 1.0), r_b=(0.6, 1.0), L=(2.0, 3.0), seed=2)
    samples = generate_samples(sample_designs(ranges, count), SAMPLE_GRID, (8, 8, 8), OracleConfig())
    dataset, _ = assemble_dataset(samples)
    return dataset


class TestInputs:
    def test_sigmoid_mask_values(self):
        k = 0.5
        mask = obstacle_mask(np.array([0.0, -k, k]), "sigmoid", k)
        assert mask == pytest.approx([0.5, 0.73106, 0.26894], abs=1e-5)

    def test_hard_mask(self):
        assert np.array_equal(obstacle_mask(np.array([-0.1, 0.0, 0.2]), "hard", 0.5), [1.0, 0.0, 0.0])

    def test_sigmoid_mask_needs_temperature(self):
        with pytest.raises(ConfigError):
            obstacle_mask(np.zeros(3), "sigmoid", 0.0)
        with pytest.raises(ValueError):
            UNetConfig(mask_mode="sigmoid", mask_temperature=-1.0)

    def test_positional_channels(self):
        pos = positional_channels((5, 3, 2))
        assert pos.shape == (6, 5, 3, 2)
        assert np.allclose(pos[0, 0], 0.0) and np.allclose(pos[1, 0], 1.0)
        assert np.allclose(pos[0, 4], 0.0, atol=1e-12) and np.allclose(pos[1, 4], 1.0)
        assert np.allclose(pos[1, 2], -1.0)
        assert np.allclose(pos[5, :, :, 1], 1.0)

    def test_build_input_layout(self):
        sdf = window_sdf()
        tensor = build_input(sdf, tiny_unet_config(), sdf_scale=2.0)
        assert tensor.shape == (8, 8, 8, 8)
        assert np.allclose(tensor[0], sdf.values / 2.0)
        assert np.array_equal(tensor[7], (sdf.values < 0).astype(float))

    def test_build_input_rejects_bad_scale(self):
        with pytest.raises(ConfigError):
            build_input(window_sdf(), tiny_unet_config(), sdf_scale=0.0)

    def test_sigmoid_input_vjp(self, rng):
        component = InputComponent(tiny_unet_config(mask_mode="sigmoid", mask_temperature=0.3), (8, 8, 8), 2.0)
        result = check_component(component, window_sdf(), "build_input", 1e-6, probes=30, step=1e-6, rng=rng)
        assert result.passed, result.max_rel_error

    def test_hard_input_vjp_is_sdf_channel_only(self, rng):
        component = InputComponent(tiny_unet_config(), (8, 8, 8), 2.0)
        cot = rng.normal(size=(8, 8, 8, 8))
        assert np.allclose(component.vjp(window_sdf(), cot), cot[0] / 2.0)


class TestUNet:
    def test_output_shape(self):
        model = UNet(tiny_unet_config())
        out = model(Tensor(np.zeros((2, 8, 8, 4, 6))))
        assert out.shape == (2, 3, 8, 4, 6)

    def test_dims_must_divide(self):
        model = UNet(tiny_unet_config(levels=3, channels=[2, 4, 4]))
        model.check_dims((8, 8, 4))
        with pytest.raises(ShapeMismatchError):
            model.check_dims((8, 8, 6))
        with pytest.raises(ShapeMismatchError):
            model(Tensor(np.zeros((1, 8, 4, 4, 6))))

    def test_wrong_channel_count(self):
        with pytest.raises(ShapeMismatchError):
            UNet(tiny_unet_config())(Tensor(np.zeros((1, 7, 4, 4, 4))))

    def test_channels_must_match_levels(self):
        with pytest.raises(ValueError):
            UNetConfig(levels=3, channels=[4, 8])

    def test_weights_are_seeded(self):
        a = UNet(tiny_unet_config(weight_seed=5)).state_dict()
        b = UNet(tiny_unet_config(weight_seed=5)).state_dict()
        c = UNet(tiny_unet_config(weight_seed=6)).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not all(np.array_equal(a[k], c[k]) for k in a)

    def test_attention_gates_are_optional(self):
        with_gates = [name for name, _ in UNet(tiny_unet_config()).named_parameters()]
        without = [name for name, _ in UNet(tiny_unet_config(attention=False)).named_parameters()]
        assert any(name.startswith("gate0.") for name in with_gates)
        assert not any(name.startswith("gate") for name in without)

    def test_receptive_field_is_local(self):
        surrogate = tiny_surrogate(window=(24, 8, 8))
        component = InferenceComponent(surrogate)
        cot = np.zeros((24, 8, 8, 3))
        cot[:2, :, :, 0] = 1.0
        grad = component.vjp(window_sdf((24, 8, 8)), cot)
        assert np.any(grad[:4] != 0)
        assert np.all(grad[16:] == 0)


class TestInference:
    def test_predict_scales_by_v_max(self):
        surrogate = tiny_surrogate()
        sdf = window_sdf()
        field = surrogate.predict(sdf)
        assert isinstance(field, VectorField3)
        assert field.spec == sdf.spec
        assert np.allclose(field.values, surrogate.predict_normalized(sdf) * 100.0, rtol=1e-6)

    def test_component_shapes(self):
        component = InferenceComponent(tiny_surrogate())
        assert component.input_shape.dims == (8, 8, 8)
        assert component.output_shape.kind == "vector_field"

    def test_vjp_matches_finite_differences_sigmoid(self, rng):
        with precision(np.float64):
            component = InferenceComponent(tiny_surrogate(mask_mode="sigmoid", mask_temperature=0.5))
            result = check_component(component, window_sdf(), "inference", 1e-3, probes=12, step=1e-5, rng=rng)
        assert result.passed, result.max_rel_error

    def test_vjp_matches_finite_differences_hard(self, rng):
        sdf = window_sdf()
        with precision(np.float64):
            component = InferenceComponent(tiny_surrogate())
            result = check_component(
                component, sdf, "inference", 1e-3, probes=12, step=1e-5, rng=rng,
                candidates=np.abs(sdf.values) > 1e-2,
            )
        assert result.passed, result.max_rel_error

    def test_save_and_load(self, tmp_path):
        surrogate = tiny_surrogate()
        path = surrogate.save(tmp_path / "model.unw")
        loaded = load_surrogate(path)
        assert loaded.manifest == surrogate.manifest
        sdf = window_sdf()
        assert np.array_equal(loaded.predict(sdf).values, surrogate.predict(sdf).values)

    def test_load_rejects_foreign_manifest(self, tmp_path):
        path = save_checkpoint(tmp_path / "other.unw", {"w": np.zeros(2)}, {"kind": "other"})
        with pytest.raises(CheckpointError):
            load_surrogate(path)

    def test_load_rejects_mismatched_weights(self, tmp_path):
        surrogate = tiny_surrogate()
        state = UNet(tiny_unet_config(channels=[4, 4])).state_dict()
        path = save_checkpoint(tmp_path / "bad.unw", state, surrogate.manifest.model_dump(mode="json"))
        with pytest.raises(CheckpointError):
            load_surrogate(path)


class TestErrorGradientCorr:
    def test_ramp_gradient(self):
        spacing = (0.5, 0.25, 2.0)
        i = np.arange(6, dtype=float)
        values = np.broadcast_to((3.0 * i * spacing[0])[:, None, None], (6, 4, 3))
        assert np.allclose(nearest_neighbor_gradient(values, spacing), 3.0)

    def test_perfect_prediction_is_degenerate(self, small_spec, rng):
        field = VectorField3(small_spec, rng.normal(size=small_spec.dims + (3,)))
        assert error_gradient_corr(field, field) == (0.0, True)

    def test_range(self, small_spec, rng):
        pred = VectorField3(small_spec, rng.normal(size=small_spec.dims + (3,)))
        target = VectorField3(small_spec, rng.normal(size=small_spec.dims + (3,)))
        corr, degenerate = error_gradient_corr(pred, target)
        assert not degenerate
        assert -1.0 <= corr <= 1.0

    def test_shape_mismatch(self, small_spec):
        a = VectorField3(small_spec, np.zeros(small_spec.dims + (3,)))
        other = GridSpec(origin=(0.0, 0.0, 0.0), spacing=(1.0, 1.0, 1.0), dims=(2, 2, 2))
        with pytest.raises(ShapeMismatchError):
            error_gradient_corr(a, VectorField3(other, np.zeros((2, 2, 2, 3))))


class TestTraining:
    def test_loss_decreases(self, tmp_path):
        dataset = tiny_dataset()
        tcfg = TrainConfig(epochs=40, batch_size=2, learning_rate=1e-2, preset="desk")
        result = train(dataset, tiny_unet_config(), tcfg, out_dir=tmp_path)

        assert len(result.history) == 40
        assert result.history[-1].train_mse < 0.5 * result.history[0].train_mse
        best = min(range(40), key=lambda i: result.history[i].val_mse) + 1
        assert result.best_epoch == best
        assert result.best.manifest.best_epoch == best
        assert result.best.manifest.v_max == dataset.normalization

        for name in ("metrics.csv", "best.unw", "final.unw", "surrogate.json"):
            assert (tmp_path / name).is_file()
        frame = read_table(tmp_path / "metrics.csv")
        assert list(frame.columns) == ["epoch", "train_mse", "val_mse", "corr_grad_err"]
        assert len(frame) == 40
        assert all(-1.0 <= float(v) <= 1.0 for v in frame["corr_grad_err"])

    def test_training_is_deterministic(self):
        dataset = tiny_dataset(6)
        tcfg = TrainConfig(epochs=2, batch_size=2, learning_rate=1e-2)
        first = train(dataset, tiny_unet_config(), tcfg)
        second = train(dataset, tiny_unet_config(), tcfg)
        assert [r.train_mse for r in first.history] == [r.train_mse for r in second.history]

    def test_sharded_gradients_match(self):
        dataset = tiny_dataset(6)
        ucfg = tiny_unet_config()
        model = UNet(ucfg)
        scale = corpus_sdf_scale(dataset.samples)
        x = np.stack([build_input(s.sdf, ucfg, scale) for s in dataset.samples]).astype(np.float32)
        y = np.stack([np.moveaxis(s.velocity.values, -1, 0) / dataset.normalization for s in dataset.samples])
        y = y.astype(np.float32)
        loss, grads = batch_gradients(model, x, y)
        with ThreadPoolExecutor(max_workers=3) as pool:
            sharded_loss, sharded = batch_gradients(model, x, y, pool, shards=3)
        assert sharded_loss == pytest.approx(loss, rel=1e-5)
        for a, b in zip(grads, sharded):
            assert np.allclose(a, b, rtol=1e-3, atol=1e-6)

    def test_divergence_raises(self, monkeypatch):
        monkeypatch.setattr(
            "shapeflow.services.surrogate.trainer.batch_gradients",
            lambda *args, **kwargs: (float("nan"), []),
        )
        with pytest.raises(TrainingDivergedError):
            train(tiny_dataset(4), tiny_unet_config(), TrainConfig(epochs=1, batch_size=2))

    def test_empty_training_split(self):
        dataset = tiny_dataset(2)
        empty = Dataset(dataset.samples, dataset.normalization, ([], [0, 1]))
        with pytest.raises(ValueError):
            train(empty, tiny_unet_config(), TrainConfig(epochs=1))


class TestAblation:
    def test_labels(self):
        assert variant_label(AblationVariant(attention=True, mask_mode="hard")) == "attn-hard"
        assert variant_label(AblationVariant(attention=False, mask_mode="hard")) == "noattn-hard"
        sigmoid = AblationVariant(attention=True, mask_mode="sigmoid", mask_temperature=0.1)
        assert variant_label(sigmoid) == "attn-sigmoid-k0.1"

    def test_variant_config(self):
        base = tiny_unet_config(mask_temperature=0.7)
        config = variant_config(base, AblationVariant(attention=False, mask_mode="sigmoid"))
        assert config.attention is False
        assert config.mask_mode == "sigmoid"
        assert config.mask_temperature == 0.7
        assert config.channels == base.channels

    def test_report(self, tmp_path):
        variants = [
            AblationVariant(attention=True, mask_mode="hard"),
            AblationVariant(attention=True, mask_mode="sigmoid", mask_temperature=0.5),
        ]
        rows = run_ablation(
            tiny_dataset(6), variants, tiny_unet_config(), TrainConfig(epochs=1, batch_size=2), out_dir=tmp_path
        )
        assert [r["variant"] for r in rows] == ["attn-hard", "attn-sigmoid-k0.5"]
        frame = read_table(tmp_path / "ablation.csv")
        assert list(frame.columns) == REPORT_COLUMNS
        assert list(frame["temperature"]) == ["", "0.5"]
        assert (tmp_path / "attn-hard" / "best.unw").is_file()
        assert all(-1.0 <= float(v) <= 1.0 for v in frame["corr_grad_err"])
