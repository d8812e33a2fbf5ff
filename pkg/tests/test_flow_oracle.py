"""
Tests for the analytic flow oracle, sample hygiene and dataset persistence.
"""

import numpy as np
import pytest

from shapeflow.core.exceptions import DatasetFormatError, SpecMismatchError
from shapeflow.models.dataset import Sample
from shapeflow.models.design import DesignParams
from shapeflow.models.fields import GridSpec, ScalarField3, VectorField3
from shapeflow.models.schemas import OracleConfig, SamplingRanges
from shapeflow.services.flow_oracle import (
    MANIFEST_COLUMNS,
    assemble_dataset,
    filter_samples,
    generate_samples,
    ingest_external,
    load_samples,
    make_sample,
    save_dataset,
    split_indices,
    synth_flow,
    wake_deficit,
    write_sample,
)
from shapeflow.services.geometry import sample_designs, sdf_grid
from shapeflow.utils.io import read_table, write_field

FLOW_GRID = GridSpec(origin=(-4.0, -4.0, -4.0), spacing=(0.25, 0.25, 0.25), dims=(33, 33, 33))
SAMPLE_GRID = GridSpec(origin=(-3.0, -3.0, -3.0), spacing=(0.3, 0.3, 0.3), dims=(32, 20, 20))
WINDOW = (16, 8, 8)
SPHERE = DesignParams(r_a=1.0, r_b=1.0, L=0.0)


def small_designs(count: int, seed: int = 0):
    ranges = SamplingRanges(r_a=(0.6, 1.0), r_b=(0.6, 1.0), L=(2.0, 3.0), seed=seed)
    return sample_designs(ranges, count)


class TestSynthFlow:
    def test_zero_inside_and_finite(self):
        sdf = sdf_grid(SPHERE, FLOW_GRID)
        velocity = synth_flow(sdf, OracleConfig())
        assert np.all(np.isfinite(velocity.values))
        assert np.all(velocity.values[sdf.values <= 0] == 0.0)
        assert np.all(velocity.magnitude() <= 100.0 + 1e-9)

    def test_flow_along_freestream(self):
        velocity = synth_flow(sdf_grid(SPHERE, FLOW_GRID), OracleConfig(freestream=(0.0, 50.0, 0.0)))
        assert np.all(velocity.values[..., 0] == 0.0)
        assert np.all(velocity.values[..., 2] == 0.0)

    def test_boundary_layer_recovers_freestream(self):
        sdf = sdf_grid(SPHERE, FLOW_GRID)
        velocity = synth_flow(sdf, OracleConfig(wake_factor=0.0))
        # far corner upstream: sdf ~ 5.9, exp(-11.8) is negligible
        assert velocity.values[0, 0, 0, 0] == pytest.approx(100.0, rel=1e-4)

    def test_wake_slows_downstream(self):
        sdf = sdf_grid(SPHERE, FLOW_GRID)
        velocity = synth_flow(sdf, OracleConfig())
        upstream, downstream = velocity.values[8, 16, 16, 0], velocity.values[24, 16, 16, 0]
        assert sdf.values[8, 16, 16] == pytest.approx(sdf.values[24, 16, 16])
        assert downstream < upstream

    def test_no_wake_is_symmetric(self):
        velocity = synth_flow(sdf_grid(SPHERE, FLOW_GRID), OracleConfig(wake_factor=0.0))
        assert velocity.values[8, 16, 16, 0] == pytest.approx(velocity.values[24, 16, 16, 0])

    def test_wider_front_radius_slows_flow(self):
        spec = GridSpec(origin=(-4.0, -4.0, -4.0), spacing=(0.25, 0.25, 0.25), dims=(41, 33, 33))
        means = [
            synth_flow(sdf_grid(DesignParams(r_a=r_a, r_b=0.6, L=2.0), spec), OracleConfig()).values[..., 0].mean()
            for r_a in (1.0, 1.2, 1.4)
        ]
        assert means[0] > means[1] > means[2]

    def test_aligned_body_is_fastest(self):
        spec = GridSpec(origin=(-4.0, -4.0, -4.0), spacing=(0.25, 0.25, 0.25), dims=(41, 33, 33))

        def mean_ux(theta_z):
            design = DesignParams(r_a=0.8, r_b=0.8, L=3.0, theta_z=theta_z)
            return synth_flow(sdf_grid(design, spec), OracleConfig()).values[..., 0].mean()

        aligned = mean_ux(0.0)
        for theta_z in (-0.5, -0.3, 0.3, 0.5):
            assert mean_ux(theta_z) < aligned, theta_z

    def test_wake_kernel_range(self):
        w = wake_deficit(sdf_grid(SPHERE, FLOW_GRID), OracleConfig())
        assert np.all(w >= 0.0) and np.all(w < 1.0)
        assert np.all(w[0] == 0.0)
        # nothing upstream of the body accumulates occupancy
        assert w[4, 16, 16] < 1e-3
        assert w[24, 16, 16] > 0.5

    def test_noise_is_seeded_and_kept_out_of_the_body(self):
        sdf = sdf_grid(SPHERE, FLOW_GRID)
        cfg = OracleConfig(noise_level=0.01)
        a = synth_flow(sdf, cfg, noise_seed=3)
        b = synth_flow(sdf, cfg, noise_seed=3)
        c = synth_flow(sdf, cfg, noise_seed=4)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)
        assert np.all(a.values[sdf.values <= 0] == 0.0)


class TestSamples:
    def test_make_sample_window(self):
        sample = make_sample(SPHERE, SAMPLE_GRID, WINDOW, OracleConfig(), "s00000")
        assert sample.sdf.spec.dims == WINDOW
        assert sample.velocity.spec == sample.sdf.spec
        assert sample.sdf.values.min() < 0

    def test_generation_is_deterministic_across_threads(self):
        designs = small_designs(6)
        serial = generate_samples(designs, SAMPLE_GRID, WINDOW, OracleConfig(noise_level=0.01))
        pooled = generate_samples(designs, SAMPLE_GRID, WINDOW, OracleConfig(noise_level=0.01), threads=3)
        assert [s.sample_id for s in serial] == ["s00000", "s00001", "s00002", "s00003", "s00004", "s00005"]
        for a, b in zip(serial, pooled):
            assert a.sample_id == b.sample_id
            assert np.array_equal(a.velocity.values, b.velocity.values)

    def test_inject_nan(self):
        samples = generate_samples(small_designs(4), SAMPLE_GRID, WINDOW, OracleConfig(), inject_nan=[2])
        assert np.isnan(samples[2].velocity.values[8, 4, 4]).all()
        assert all(np.all(np.isfinite(s.velocity.values)) for i, s in enumerate(samples) if i != 2)


class TestFilter:
    def test_nan_rejected_with_first_node(self):
        samples = generate_samples(small_designs(3), SAMPLE_GRID, WINDOW, OracleConfig(), inject_nan=[1])
        retained, report = filter_samples(samples)
        assert len(retained) == 2
        assert report.retained == [0, 2]
        (record,) = report.rejected
        assert record.reason == "nan"
        assert record.node == (8, 4, 4)
        assert record.sample_id == "s00001"

    def test_umag_threshold(self):
        samples = generate_samples(small_designs(3), SAMPLE_GRID, WINDOW, OracleConfig())
        retained, report = filter_samples(samples, threshold=1.0)
        assert retained == []
        assert {r.reason for r in report.rejected} == {"umag"}
        assert all(r.max_umag > 1.0 for r in report.rejected)

    @pytest.mark.parametrize("speed, kept", [(159.9, True), (160.0, True), (160.1, False)])
    def test_default_magnitude_boundary(self, small_spec, speed, kept):
        velocity = np.zeros((*small_spec.dims, 3))
        velocity[..., 1] = 1.0
        velocity[2, 1, 1] = (0.0, speed, 0.0)
        sample = Sample(
            None,
            ScalarField3(small_spec, np.ones(small_spec.dims)),
            VectorField3(small_spec, velocity),
            "edge",
        )
        retained, report = filter_samples([sample])
        assert (len(retained) == 1) is kept
        if not kept:
            (record,) = report.rejected
            assert record.reason == "umag"
            assert record.node == (2, 1, 1)
            assert record.max_umag == pytest.approx(speed)

    def test_filter_is_idempotent(self):
        samples = generate_samples(small_designs(5), SAMPLE_GRID, WINDOW, OracleConfig(), inject_nan=[1, 3])
        retained, first = filter_samples(samples)
        again, second = filter_samples(retained)
        assert first.num_rejected == 2
        assert second.num_rejected == 0
        assert [s.sample_id for s in again] == [s.sample_id for s in retained]

    def test_defaults_keep_clean_samples(self):
        samples = generate_samples(small_designs(3), SAMPLE_GRID, WINDOW, OracleConfig())
        retained, report = filter_samples(samples)
        assert len(retained) == 3
        assert report.num_rejected == 0


class TestDataset:
    def test_split_sizes(self):
        train, val = split_indices(896, seed=0)
        assert (len(train), len(val)) == (768, 128)
        assert not set(train) & set(val)
        assert sorted(train + val) == list(range(896))

    def test_split_is_seeded(self):
        assert split_indices(70, seed=5) == split_indices(70, seed=5)
        assert split_indices(70, seed=5) != split_indices(70, seed=6)

    def test_assemble_normalizes_by_corpus_max(self):
        samples = generate_samples(small_designs(7), SAMPLE_GRID, WINDOW, OracleConfig(), inject_nan=[0])
        dataset, report = assemble_dataset(samples)
        assert report.num_rejected == 1
        assert len(dataset.samples) == 6
        assert dataset.normalization == pytest.approx(max(s.velocity.magnitude().max() for s in dataset.samples))
        assert len(dataset.train_samples) + len(dataset.val_samples) == 6

    def test_assemble_with_fixed_normalization(self):
        samples = generate_samples(small_designs(2), SAMPLE_GRID, WINDOW, OracleConfig())
        dataset, _ = assemble_dataset(samples, v_max=120.0)
        assert dataset.normalization == 120.0

    def test_assemble_nothing_left(self):
        samples = generate_samples(small_designs(2), SAMPLE_GRID, WINDOW, OracleConfig(), inject_nan=[0, 1])
        with pytest.raises(ValueError):
            assemble_dataset(samples)


class TestPersistence:
    def test_save_and_load(self, tmp_path):
        samples = generate_samples(small_designs(4), SAMPLE_GRID, WINDOW, OracleConfig(), inject_nan=[3])
        _, report = filter_samples(samples)
        manifest = save_dataset(tmp_path, samples, report)

        frame = read_table(manifest)
        assert list(frame.columns) == MANIFEST_COLUMNS
        assert list(frame["retained"]) == ["true", "true", "true", "false"]
        assert list(frame["reject_reason"]) == ["", "", "", "nan"]

        loaded = load_samples(tmp_path)
        assert [s.sample_id for s in loaded] == ["s00000", "s00001", "s00002"]
        for original, back in zip(samples, loaded):
            assert back.params == original.params
            assert np.array_equal(back.velocity.values, original.velocity.values)
            assert np.array_equal(back.sdf.values, original.sdf.values)
        assert len(load_samples(tmp_path, retained_only=False)) == 4

    def test_manifest_is_byte_stable(self, tmp_path):
        samples = generate_samples(small_designs(3), SAMPLE_GRID, WINDOW, OracleConfig())
        _, report = filter_samples(samples)
        first = save_dataset(tmp_path / "a", samples, report).read_bytes()
        second = save_dataset(tmp_path / "b", samples, report).read_bytes()
        assert first == second

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_samples(tmp_path)

    def test_ingest_pair(self, tmp_path):
        sample = make_sample(SPHERE, SAMPLE_GRID, WINDOW, OracleConfig(), "ext")
        sdf_path, _ = write_sample(tmp_path, sample)
        loaded = ingest_external(sdf_path)
        assert loaded.sample_id == "ext"
        assert loaded.params is None
        assert np.array_equal(loaded.velocity.values, sample.velocity.values)

    def test_ingest_grid_mismatch(self, tmp_path):
        sample = make_sample(SPHERE, SAMPLE_GRID, WINDOW, OracleConfig(), "ext")
        sdf_path, vel_path = write_sample(tmp_path, sample)
        shifted = sample.velocity.spec.window((0, 0, 0), (8, 8, 8))
        write_field(vel_path, VectorField3(shifted, np.zeros((8, 8, 8, 3))))
        with pytest.raises(SpecMismatchError):
            ingest_external(sdf_path)

    def test_ingest_wrong_kind(self, tmp_path):
        sample = make_sample(SPHERE, SAMPLE_GRID, WINDOW, OracleConfig(), "ext")
        sdf_path, vel_path = write_sample(tmp_path, sample)
        write_field(vel_path, ScalarField3(sample.sdf.spec, sample.sdf.values))
        with pytest.raises(DatasetFormatError, match="vector"):
            ingest_external(sdf_path)

    def test_ingest_needs_sibling_name(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            ingest_external(tmp_path / "field.dsf")

    def test_sample_grid_agreement(self):
        sdf = ScalarField3(SAMPLE_GRID, np.zeros(SAMPLE_GRID.dims))
        other = VectorField3(FLOW_GRID, np.zeros(FLOW_GRID.dims + (3,)))
        with pytest.raises(ValueError):
            Sample(None, sdf, other)
