#!/usr/bin/env python3
"""
Unit tests for the data_synth module.
"""
import json
import numpy as np
import pytest
from unittest.mock import patch
from misdd.data_synth import (
    DatasetSpec,
    DefectType,
    MAX_DEFECT_AREA,
    MIN_DEFECT_AREA,
    allocate_defects,
    generate_dataset,
    inject_defect,
    load_dataset,
    make_normal_sample,
)
from misdd.tensor_io import CorruptFileError


def _tree(root):
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


class TestDatasetSpec:
    """Test cases for DatasetSpec validation."""

    def test_default_is_valid(self):
        """Test that the default spec validates."""
        DatasetSpec().validate()

    @pytest.mark.parametrize(
        "changes, field",
        [
            ({"n_train_normal": 0}, "n_train_normal"),
            ({"image_size": 8}, "image_size"),
            ({"classes": ("tile", "tile")}, "classes"),
            ({"classes": ("marble",)}, "marble"),
            ({"defect_mix": {"rgb_only": 0.5, "depth_only": 0.4}}, "sum to 1"),
            ({"defect_mix": {"scratch": 1.0}}, "scratch"),
        ],
    )
    def test_invalid_field_named(self, changes, field):
        """Test that an invalid spec names the offending field."""
        spec = DatasetSpec(**changes)
        with pytest.raises(ValueError, match=field):
            spec.validate()

    def test_dict_round_trip(self):
        """Test the JSON form of a spec."""
        spec = DatasetSpec(classes=("cable",), seed=9)
        assert DatasetSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


class TestSamples:
    """Test cases for normal samples and defect injection."""

    def _normal(self, seed=0, class_name="tile", size=32):
        return make_normal_sample("s", class_name, size, np.random.default_rng(seed))

    @pytest.mark.parametrize("class_name", ["tile", "foam", "cable", "plate"])
    def test_normal_sample_invariants(self, class_name):
        """Test shapes, value range and empty mask of normal samples."""
        sample = self._normal(class_name=class_name)
        sample.validate()

        assert sample.rgb.shape == (32, 32, 3)
        assert sample.depth.shape == (32, 32, 1)
        assert sample.label == 0
        assert not sample.gt_mask.any()

    def test_depth_only_keeps_rgb(self):
        """Test that a depth defect leaves the RGB channels bit-identical."""
        normal = self._normal()
        anomalous = inject_defect(normal, DefectType.DEPTH_ONLY, np.random.default_rng(1))

        np.testing.assert_array_equal(anomalous.rgb, normal.rgb)
        assert anomalous.gt_mask.any()
        assert anomalous.rgb_delta == 0.0
        assert anomalous.depth_delta > 0.0

    def test_rgb_only_keeps_depth(self):
        """Test that a colour defect leaves the depth map bit-identical."""
        normal = self._normal()
        anomalous = inject_defect(normal, "rgb_only", np.random.default_rng(2))

        np.testing.assert_array_equal(anomalous.depth, normal.depth)
        assert anomalous.depth_delta == 0.0

    def test_combined_mask_is_union(self):
        """Test that the combined mask is the union of changed pixels."""
        normal = self._normal()
        anomalous = inject_defect(normal, DefectType.COMBINED, np.random.default_rng(3))
        changed = (anomalous.rgb != normal.rgb).any(-1) | (anomalous.depth != normal.depth).any(-1)

        np.testing.assert_array_equal(anomalous.gt_mask.astype(bool), changed)
        assert anomalous.label == 1
        anomalous.validate()

    @pytest.mark.parametrize("seed", range(10))
    def test_area_bounds(self, seed):
        """Test that the defect area stays between 0.5% and 10% of the image."""
        normal = self._normal(seed)
        anomalous = inject_defect(normal, DefectType.COMBINED, np.random.default_rng(seed))
        area = anomalous.gt_mask.sum() / anomalous.gt_mask.size

        assert MIN_DEFECT_AREA <= area <= MAX_DEFECT_AREA

    def test_same_rng_state_same_output(self):
        """Test that identical random state gives identical defects."""
        normal = self._normal()
        a = inject_defect(normal, "combined", np.random.default_rng(5))
        b = inject_defect(normal, "combined", np.random.default_rng(5))

        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.gt_mask, b.gt_mask)

    def test_reject_anomalous_input(self):
        """Test that defects are only injected into normal samples."""
        anomalous = inject_defect(self._normal(), "rgb_only", np.random.default_rng(0))
        with pytest.raises(ValueError, match="normal"):
            inject_defect(anomalous, "rgb_only", np.random.default_rng(0))

    def test_retry_cap(self):
        """Test that a degenerate region generator ends in an error."""
        empty = np.zeros((32, 32), dtype=bool)
        with (
            patch("misdd.data_synth._ellipse_region", return_value=empty),
            patch("misdd.data_synth._polyline_region", return_value=empty),
        ):
            with pytest.raises(RuntimeError, match="attempts"):
                inject_defect(self._normal(), "rgb_only", np.random.default_rng(0))


class TestAllocateDefects:
    """Test cases for allocate_defects."""

    def test_exact_counts(self):
        """Test largest-remainder counts over the mix."""
        spec = DatasetSpec(n_test_anomalous=7)
        types = allocate_defects(spec, "tile")

        assert len(types) == 7
        counts = {t: types.count(t) for t in DefectType}
        assert counts[DefectType.RGB_ONLY] == 3
        assert counts[DefectType.DEPTH_ONLY] == 3
        assert counts[DefectType.COMBINED] == 1

    def test_single_type(self):
        """Test a mix concentrated on one defect type."""
        spec = DatasetSpec(n_test_anomalous=5, defect_mix={"rgb_only": 1.0})
        assert allocate_defects(spec, "foam") == [DefectType.RGB_ONLY] * 5


class TestGenerateDataset:
    """Test cases for generate_dataset and load_dataset."""

    def test_splits_and_labels(self, tiny_dataset, tiny_spec):
        """Test that training holds only normals and test holds both labels."""
        train = tiny_dataset.split("train")
        test = tiny_dataset.split("test")

        assert len(train) == 2 * tiny_spec.n_train_normal
        assert all(r.label == 0 for r in train)
        assert {r.label for r in test} == {0, 1}
        assert len(tiny_dataset.split("test", "foam")) == 5

    def test_manifest_lists_every_sample(self, tiny_dataset):
        """Test the manifest entries."""
        manifest = json.loads((tiny_dataset.root / "manifest.json").read_text())

        assert len(manifest["samples"]) == len(tiny_dataset)
        entry = manifest["samples"][0]
        assert {"id", "split", "class_name", "label", "defect_type"} <= set(entry)

    def test_deterministic(self, tmp_path, tiny_spec):
        """Test that the same seed gives byte-identical trees."""
        generate_dataset(tiny_spec, tmp_path / "a")
        generate_dataset(tiny_spec, tmp_path / "b")

        assert _tree(tmp_path / "a") == _tree(tmp_path / "b")

    def test_workers_do_not_change_content(self, tmp_path, tiny_spec):
        """Test that threaded generation writes the same bytes."""
        generate_dataset(tiny_spec, tmp_path / "a", workers=1)
        generate_dataset(tiny_spec, tmp_path / "b", workers=3)

        assert _tree(tmp_path / "a") == _tree(tmp_path / "b")

    def test_load_round_trip(self, tiny_dataset):
        """Test that a loaded sample matches its record."""
        loaded = load_dataset(tiny_dataset.root)
        record = loaded.split("test")[-1]
        sample = loaded.load(record.id)

        assert sample.label == record.label
        assert sample.gt_mask.any() == bool(record.label)
        sample.validate()

    def test_export_bit_identical(self, tmp_path, tiny_dataset):
        """Test that re-exporting a dataset reproduces its files."""
        tiny_dataset.export(tmp_path / "copy")

        assert _tree(tmp_path / "copy") == _tree(tiny_dataset.root)

    def test_rgb_only_mix_depth_untouched(self, tmp_path):
        """Test that a colour-only mix records no depth change."""
        spec = DatasetSpec(
            classes=("plate",),
            n_train_normal=1,
            n_test_normal=0,
            n_test_anomalous=4,
            image_size=32,
            defect_mix={"rgb_only": 1.0},
        )
        dataset = generate_dataset(spec, tmp_path / "d")

        for record in dataset.split("test"):
            assert record.depth_delta == 0.0
            assert record.rgb_delta > 0.0

    def test_single_label_test_split_warns(self, tmp_path):
        """Test that a test split without anomalies is flagged."""
        spec = DatasetSpec(classes=("tile",), n_train_normal=1, n_test_anomalous=0, image_size=16)
        with patch("misdd.data_synth.logger") as mock_logger:
            generate_dataset(spec, tmp_path / "d")

        mock_logger.warning.assert_called_once()
        assert "undefined" in mock_logger.warning.call_args.args[0]

    def test_invalid_spec(self, tmp_path):
        """Test that an invalid spec writes nothing."""
        with pytest.raises(ValueError, match="n_train_normal"):
            generate_dataset(DatasetSpec(n_train_normal=0), tmp_path / "d")
        assert not (tmp_path / "d").exists()

    def test_missing_tensor_names_sample(self, tiny_dataset):
        """Test that a missing tensor file names the sample id."""
        record = tiny_dataset.split("train")[0]
        (tiny_dataset.root / record.file_names()["depth"]).unlink()

        with pytest.raises(FileNotFoundError, match=record.id):
            load_dataset(tiny_dataset.root)

    def test_corrupt_manifest(self, tiny_dataset):
        """Test that a malformed manifest is reported as corrupt."""
        (tiny_dataset.root / "manifest.json").write_text("{not json")
        with pytest.raises(CorruptFileError):
            load_dataset(tiny_dataset.root)
