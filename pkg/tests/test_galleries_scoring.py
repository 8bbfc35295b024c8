#!/usr/bin/env python3
"""
Unit tests for the galleries_scoring module.
"""
from unittest.mock import patch
import numpy as np
import pytest
import torch
from PIL import Image
from misdd.galleries_scoring import (
    build_galleries,
    detect,
    detect_batch,
    export_heatmap,
    harmonic_fuse,
    image_score,
    load_galleries,
    memory_bank_score,
    pixel_map,
    save_galleries,
)
from misdd.missing_config import (
    COMPLETE,
    ModalityIndicator,
    complete_schedule,
    sample_missing_schedule,
)
from misdd.tensor_io import read_tensor
from misdd.text_branch import TextEmbeddingPair


def _pair():
    e = torch.eye(4)
    return TextEmbeddingPair(e[0], e[1])


@pytest.fixture
def galleries(tiny_dataset, tiny_model):
    samples = list(tiny_dataset.samples("train"))
    return build_galleries(tiny_model, samples, complete_schedule(len(samples)))


@pytest.fixture
def test_samples(tiny_dataset):
    return list(tiny_dataset.samples("test"))


class TestImageScore:
    """Test cases for image_score and pixel_map."""

    def test_direction(self):
        """Test that features near the abnormal text score above one half."""
        pair = _pair()
        assert image_score(torch.eye(4)[0], pair).item() < 0.5
        assert image_score(torch.eye(4)[1], pair).item() > 0.5
        assert image_score(torch.eye(4)[2], pair).item() == pytest.approx(0.5)

    def test_temperature(self):
        """Test the softmax temperature on a hand-computed case."""
        score = image_score(torch.eye(4)[1], _pair(), temperature=1.0)
        assert score.item() == pytest.approx(np.e / (np.e + 1))

    def test_rejects_non_unit(self):
        """Test the unit-norm precondition."""
        with pytest.raises(ValueError, match="unit-norm"):
            image_score(torch.ones(4), _pair())

    def test_pixel_map_shapes(self):
        """Test batched and single token maps."""
        tokens = torch.nn.functional.normalize(torch.randn(2, 4, 4), dim=-1)
        batched = pixel_map({1: tokens, 2: tokens}, _pair(), image_size=8)
        single = pixel_map({1: tokens[0]}, _pair(), image_size=8)

        assert batched.shape == (2, 8, 8)
        assert single.shape == (8, 8)
        assert 0.0 <= float(batched.min()) and float(batched.max()) <= 1.0

    def test_pixel_map_constant(self):
        """Test that equal token scores upsample to a constant map."""
        tokens = torch.eye(4)[1].expand(4, 4)
        expected = image_score(torch.eye(4)[1], _pair()).item()

        torch.testing.assert_close(
            pixel_map({1: tokens}, _pair(), 8), torch.full((8, 8), expected)
        )

    def test_pixel_map_missing_layer(self):
        """Test that required layers must be present."""
        tokens = torch.eye(4)[:4]
        with pytest.raises(ValueError, match="Missing layer"):
            pixel_map({1: tokens}, _pair(), 8, layers=[1, 2])

    def test_pixel_map_non_square(self):
        """Test that the token count must form a square grid."""
        with pytest.raises(ValueError, match="square"):
            pixel_map({1: torch.eye(4)[:3]}, _pair(), 8)


class TestFusion:
    """Test cases for harmonic_fuse and memory_bank_score."""

    def test_harmonic_identities(self):
        """Test H(a, a) = a, H(0, b) = 0 and a hand-computed mean."""
        b = torch.tensor([0.0, 0.2, 0.7, 1.0])
        torch.testing.assert_close(harmonic_fuse(0.7, torch.tensor(0.7)), torch.tensor(0.7))
        torch.testing.assert_close(harmonic_fuse(0.0, b), torch.zeros(4))
        torch.testing.assert_close(harmonic_fuse(0.4, b)[1], torch.tensor(2 * 0.4 * 0.2 / 0.6))

    def test_harmonic_bounds(self):
        """Test that the fused map stays below the larger input."""
        p_map = torch.rand(5, 5)
        fused = harmonic_fuse(0.9, p_map)

        assert float(fused.max()) <= 0.9 + 1e-6
        assert float(fused.min()) >= 0.0

    def test_harmonic_out_of_range(self):
        """Test that scores outside [0, 1] are rejected."""
        with pytest.raises(ValueError):
            harmonic_fuse(1.5, torch.zeros(2))
        with pytest.raises(ValueError):
            harmonic_fuse(0.5, torch.full((2,), -0.1))

    def test_memory_bank(self):
        """Test nearest-neighbour distances against the gallery."""
        gallery = torch.eye(4)[:2]
        scores = memory_bank_score(torch.eye(4), gallery)

        torch.testing.assert_close(scores, torch.tensor([0.0, 0.0, 1.0, 1.0]))
        with pytest.raises(ValueError, match="empty"):
            memory_bank_score(torch.eye(4), torch.zeros(0, 4))


class TestGalleries:
    """Test cases for build_galleries and their persistence."""

    def test_contents(self, galleries):
        """Test gallery sizes and the text rows."""
        assert len(galleries.rgb) == len(galleries.depth) == 8
        assert sorted(galleries.rgb.tokens) == [1, 3]
        assert galleries.text.entries.shape == (4, 16)
        pair = galleries.text_pair("tile")
        torch.testing.assert_close(pair.normal, galleries.text.entries[2])

    def test_unknown_class(self, galleries):
        """Test that the text gallery names a missing class."""
        with pytest.raises(ValueError, match="cable"):
            galleries.text_pair("cable")

    def test_empty_modality_warns(self, tiny_dataset, tiny_model):
        """Test the warning when no training sample has a modality."""
        samples = list(tiny_dataset.samples("train"))
        schedule = sample_missing_schedule(len(samples), "3d", 1.0, seed=0)
        with patch("misdd.galleries_scoring.logger") as mock_logger:
            result = build_galleries(tiny_model, samples, schedule)

        assert result.depth.empty
        assert len(result.rgb) == 8
        mock_logger.warning.assert_called_once()
        assert "3d" in mock_logger.warning.call_args.args[0]

    def test_save_load(self, tmp_path, galleries):
        """Test that stored galleries restore bit-exactly."""
        save_galleries(tmp_path / "galleries", galleries)
        restored = load_galleries(tmp_path / "galleries")

        assert torch.equal(restored.rgb.entries, galleries.rgb.entries)
        assert torch.equal(restored.depth.tokens[3], galleries.depth.tokens[3])
        assert restored.text.labels == galleries.text.labels


class TestDetect:
    """Test cases for detect and detect_batch."""

    def test_score_ranges(self, tiny_model, galleries, test_samples):
        """Test that image scores and pixel maps lie in [0, 1]."""
        scores = detect_batch(tiny_model, test_samples, galleries, [COMPLETE] * len(test_samples))

        assert len(scores) == len(test_samples)
        for score in scores:
            assert 0.0 <= score.s_im <= 1.0
            assert score.s_px.shape == (16, 16)
            assert score.s_px.dtype == np.float32
            assert 0.0 <= score.s_px.min() and score.s_px.max() <= 1.0

    def test_single_matches_batch(self, tiny_model, galleries, test_samples):
        """Test that scoring alone equals scoring within a batch."""
        ind = ModalityIndicator(1, 0)
        batch = detect_batch(tiny_model, test_samples[:3], galleries, [ind] * 3)
        single = detect(test_samples[1], tiny_model, galleries, ind)

        assert single.s_im == pytest.approx(batch[1].s_im, abs=1e-6)
        np.testing.assert_allclose(single.s_px, batch[1].s_px, atol=1e-6)

    def test_memory_bank_raises_scores(self, tiny_model, galleries, test_samples):
        """Test that the memory bank only raises pixel scores before fusion."""
        inds = [COMPLETE] * 2
        plain = detect_batch(tiny_model, test_samples[:2], galleries, inds)
        banked = detect_batch(tiny_model, test_samples[:2], galleries, inds, memory_bank=True)

        for a, b in zip(plain, banked):
            assert a.s_im == pytest.approx(b.s_im)
            assert (b.s_px >= a.s_px - 1e-6).all()

    def test_memory_bank_empty_gallery(self, tiny_dataset, tiny_model, test_samples):
        """Test that the memory bank needs both visual galleries."""
        samples = list(tiny_dataset.samples("train"))
        schedule = sample_missing_schedule(len(samples), "rgb", 1.0, seed=0)
        galleries = build_galleries(tiny_model, samples, schedule)
        with pytest.raises(ValueError, match="rgb gallery is empty"):
            detect_batch(tiny_model, test_samples[:1], galleries, [COMPLETE], memory_bank=True)

    def test_export_heatmap(self, tmp_path, tiny_model, galleries, test_samples):
        """Test the grayscale, overlay and raw files of a heatmap."""
        sample = test_samples[0]
        ind = ModalityIndicator(0, 1)
        score = detect(sample, tiny_model, galleries, ind)
        paths = export_heatmap(tmp_path / "heatmaps", sample, score, ind)

        assert [p.name for p in paths] == [
            f"{sample.id}.png",
            f"{sample.id}.overlay.png",
            f"{sample.id}.score.bin",
        ]
        with Image.open(paths[0]) as gray:
            assert gray.size == (16, 16) and gray.mode == "L"
        with Image.open(paths[1]) as overlay:
            assert overlay.mode == "RGB"
        np.testing.assert_array_equal(read_tensor(paths[2]), score.s_px)
