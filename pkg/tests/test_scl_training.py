#!/usr/bin/env python3
"""
Unit tests for the scl_training module.
"""
from dataclasses import replace
from unittest.mock import patch
import math
import numpy as np
import pytest
import torch
from misdd.data_synth import PseudoDefect, synthesize_defects
from misdd.missing_config import ModalityIndicator, complete_schedule, sample_missing_schedule
from misdd.nn_core import finite_difference_check, load_module_records, module_records
from misdd.scl_training import (
    TrainConfig,
    _branch_targets,
    contrastive_loss,
    dense_loss,
    epoch_log_csv,
    few_shot_subset,
    stack_pairs,
    train,
)
from misdd.text_branch import TextEmbeddingPair
from misdd.vision_encoder import images_to_tensor

FAST = TrainConfig(epochs=2, batch_size=4, image_size=16, lr=0.02, lr_min=1e-4)


def _axes():
    e = torch.eye(4)
    return TextEmbeddingPair(e[0], e[1]), e


def _training_samples(dataset):
    return list(dataset.samples("train"))


def _loss(model, samples, schedule, targets=None):
    features = model.encode_samples(samples, list(schedule.assignments), schedule.level)
    text = stack_pairs([model.text_pair(s.class_name) for s in samples])
    tokens = targets or {"rgb": None, "3d": None}
    pooled = {k: None if v is None else v.amax(dim=1) for k, v in tokens.items()}
    total = contrastive_loss(
        features["rgb"].pooled,
        features["3d"].pooled,
        text,
        targets_rgb=pooled["rgb"],
        targets_3d=pooled["3d"],
    ).total
    return total + dense_loss(
        features["rgb"].per_layer,
        features["3d"].per_layer,
        text,
        targets_rgb=tokens["rgb"],
        targets_3d=tokens["3d"],
    )


class TestContrastiveLoss:
    """Test cases for contrastive_loss and dense_loss."""

    def test_hand_computed(self):
        """Test features sitting on the normal text embedding."""
        pair, e = _axes()
        breakdown = contrastive_loss(e[0], e[0], pair)

        assert breakdown.l_rgb_n.item() == 0.0
        assert breakdown.l_rgb_an.item() == pytest.approx(math.sqrt(2))
        assert breakdown.total.item() == pytest.approx(-2 * math.sqrt(2))

    def test_bounds(self):
        """Test that the signed total stays in [-4, 4]."""
        pair, e = _axes()
        assert contrastive_loss(-e[0], -e[0], pair).total.item() >= -4
        assert contrastive_loss(e[1], e[1], pair).total.item() == pytest.approx(2 * math.sqrt(2))

    def test_absent_branch(self):
        """Test that a branch given as None contributes nothing."""
        pair, e = _axes()
        breakdown = contrastive_loss(e[2], None, pair)

        assert breakdown.l_3d_n.item() == 0.0 and breakdown.l_3d_an.item() == 0.0
        assert breakdown.total.item() == pytest.approx(0.0)

    def test_no_branch(self):
        """Test that at least one branch is required."""
        pair, _ = _axes()
        with pytest.raises(ValueError, match="At least one"):
            contrastive_loss(None, None, pair)

    def test_rejects_non_unit_features(self):
        """Test the unit-norm precondition."""
        pair, e = _axes()
        with pytest.raises(ValueError, match="unit-norm"):
            contrastive_loss(2 * e[0], None, pair)

    def test_skip_missing_terms(self):
        """Test that samples missing a modality drop out of its average."""
        pair, e = _axes()
        f_rgb = torch.stack([e[0], e[1]])
        inds = [ModalityIndicator(1, 1), ModalityIndicator(0, 1)]
        kept = contrastive_loss(f_rgb, None, pair, inds, skip_missing_terms=True)
        averaged = contrastive_loss(f_rgb, None, pair, inds)

        assert kept.l_rgb_n.item() == pytest.approx(0.0)
        assert averaged.l_rgb_n.item() == pytest.approx(math.sqrt(2) / 2)

    def test_per_sample_text(self):
        """Test per-sample text rows against a shared pair."""
        pair, e = _axes()
        features = torch.stack([e[0], e[2]])
        shared = contrastive_loss(features, None, pair)
        stacked = contrastive_loss(features, None, stack_pairs([pair, pair]))

        torch.testing.assert_close(shared.total, stacked.total)

    def test_defect_target_flips_terms(self):
        """Test that a defect target pulls a feature toward the abnormal text."""
        pair, e = _axes()
        normal = contrastive_loss(e[0], None, pair)
        defect = contrastive_loss(e[0], None, pair, targets_rgb=torch.tensor([1.0]))
        half = contrastive_loss(e[0], None, pair, targets_rgb=torch.tensor([0.5]))

        assert normal.total.item() == pytest.approx(-math.sqrt(2))
        assert defect.total.item() == pytest.approx(math.sqrt(2))
        assert half.total.item() == pytest.approx(0.0)

    def test_dense_token_targets(self):
        """Test that token targets flip only the defective tokens."""
        pair, e = _axes()
        tokens = torch.stack([e[0], e[1]]).unsqueeze(0)
        targets = torch.tensor([[0.0, 1.0]])
        loss = dense_loss({1: tokens}, None, pair, targets_rgb=targets)

        # Both tokens sit on their target text.
        assert loss.item() == pytest.approx(-math.sqrt(2))

    def test_branch_targets_hide_missing_modality(self):
        """Test that a missing modality carries no defect target."""
        mask = np.zeros((16, 16), dtype=bool)
        mask[:4, :4] = True
        item = PseudoDefect(None, mask, mask)

        targets = _branch_targets([item], [ModalityIndicator(0, 1)], 4)

        assert targets["rgb"].sum().item() == 0.0
        assert targets["3d"][0, 0].item() == 1.0
        assert targets["3d"][0, 1:].sum().item() == 0.0

    def test_dense_loss_averages_layers(self):
        """Test that the dense term is the mean over layers."""
        pair, e = _axes()
        on_normal = e[0].expand(1, 4, 4)
        on_abnormal = e[1].expand(1, 4, 4)
        loss = dense_loss({1: on_normal, 2: on_abnormal}, None, pair)

        assert loss.item() == pytest.approx(0.0)
        with pytest.raises(ValueError, match="layer"):
            dense_loss({}, None, pair)


class TestFewShotSubset:
    """Test cases for few_shot_subset."""

    def test_k_per_class(self, tiny_dataset):
        """Test that K records per class are kept, in manifest order."""
        view = few_shot_subset(tiny_dataset, 2, seed=0)
        classes = [r.class_name for r in view.records]

        assert classes.count("tile") == classes.count("foam") == 2
        kept = {r.id for r in view.records}
        order = [r.id for r in tiny_dataset.split("train")]
        assert [r.id for r in view.records] == [i for i in order if i in kept]

    def test_seeded(self, tiny_dataset):
        """Test that the selection is a function of the seed."""
        assert few_shot_subset(tiny_dataset, 1, 5) == few_shot_subset(tiny_dataset, 1, 5)

    @pytest.mark.parametrize("k", [0, 5])
    def test_invalid_k(self, tiny_dataset, k):
        """Test that K must lie in [1, class size]."""
        with pytest.raises(ValueError, match="K"):
            few_shot_subset(tiny_dataset, k, seed=0)


class TestTrain:
    """Test cases for train."""

    def test_encoder_untouched(self, tiny_dataset, tiny_model):
        """Test that only prompts and the text suffix change."""
        samples = _training_samples(tiny_dataset)
        schedule = sample_missing_schedule(len(samples), "both", 0.5, seed=0)
        encoder_before = [r.array.tobytes() for r in module_records(tiny_model.encoder, "e")]
        ccp_before = tiny_model.prompts.ccp.detach().clone()

        result = train(tiny_model, samples, schedule, FAST)

        encoder_after = [r.array.tobytes() for r in module_records(tiny_model.encoder, "e")]
        assert encoder_before == encoder_after
        assert not torch.equal(ccp_before, tiny_model.prompts.ccp)
        assert [log.epoch for log in result.epochs] == [0, 1]
        assert all(log.steps == 2 for log in result.epochs)
        assert result.epochs[1].lr < result.epochs[0].lr

    def test_galleries_skip_missing(self, tiny_dataset, tiny_model):
        """Test that galleries hold only present modalities."""
        samples = _training_samples(tiny_dataset)
        schedule = sample_missing_schedule(len(samples), "rgb", 0.5, seed=0)

        galleries = train(tiny_model, samples, schedule, replace(FAST, use_scl=False)).galleries

        assert len(galleries.rgb) == 4
        assert len(galleries.depth) == 8
        assert galleries.rgb.tokens[1].shape == (4 * 16, 16)
        assert galleries.text.labels == ("foam", "tile")

    def test_scl_disabled_drops_prompts(self, tiny_dataset, tiny_model):
        """Test that without contrastive training the galleries hold warmup features."""
        samples = _training_samples(tiny_dataset)
        with patch("misdd.scl_training.logger") as mock_logger:
            result = train(
                tiny_model, samples, complete_schedule(len(samples)), replace(FAST, use_scl=False)
            )
        plain = tiny_model.encoder.encode(images_to_tensor([s.rgb for s in samples]), "rgb")

        assert result.epochs == []
        assert tiny_model.prompts is None
        torch.testing.assert_close(result.galleries.rgb.entries, plain.pooled)
        assert "prompts dropped" in mock_logger.info.call_args_list[0].args[0]

    def test_pseudo_defects_in_batches(self, tiny_dataset, tiny_model):
        """Test that every batch draws pseudo-defects at the configured rate."""
        samples = _training_samples(tiny_dataset)
        with patch(
            "misdd.scl_training.synthesize_defects", wraps=synthesize_defects
        ) as mock_synth:
            train(
                tiny_model,
                samples,
                complete_schedule(len(samples)),
                replace(FAST, epochs=1, defect_rate=0.25),
            )

        assert mock_synth.call_count == 2
        assert all(call.args[1] == 0.25 for call in mock_synth.call_args_list)
        assert sum(len(call.args[0]) for call in mock_synth.call_args_list) == len(samples)

    def test_training_reproducible(self, tiny_dataset, tiny_model):
        """Test that a restarted run with the same seed logs identical losses."""
        samples = _training_samples(tiny_dataset)
        snapshot = module_records(tiny_model, "model")
        first = train(tiny_model, samples, complete_schedule(len(samples)), FAST)
        load_module_records(tiny_model, snapshot, "model")
        second = train(tiny_model, samples, complete_schedule(len(samples)), FAST)

        assert first.epochs == second.epochs

    def test_nan_loss(self, tiny_dataset, tiny_model):
        """Test that a NaN loss names the epoch and step."""
        samples = _training_samples(tiny_dataset)
        with patch("misdd.scl_training.dense_loss", return_value=torch.tensor(float("nan"))):
            with pytest.raises(FloatingPointError, match="epoch 0, step 0"):
                train(tiny_model, samples, complete_schedule(len(samples)), FAST)

    def test_schedule_mismatch(self, tiny_dataset, tiny_model):
        """Test that the schedule must cover every sample."""
        samples = _training_samples(tiny_dataset)
        with pytest.raises(ValueError, match="Schedule"):
            train(tiny_model, samples, complete_schedule(3), FAST)
        with pytest.raises(ValueError, match="Empty"):
            train(tiny_model, [], complete_schedule(1), FAST)

    def test_config_validation(self):
        """Test the learning rate ordering."""
        with pytest.raises(ValueError, match="lr_min"):
            TrainConfig(lr=0.01, lr_min=0.1).validate()

    def test_epoch_log_csv(self, tiny_dataset, tiny_model):
        """Test the loss log header and row count."""
        samples = _training_samples(tiny_dataset)[:4]
        result = train(tiny_model, samples, complete_schedule(4), replace(FAST, epochs=1))
        lines = epoch_log_csv(result.epochs).splitlines()

        assert lines[0] == "epoch,lr,l_rgb_n,l_3d_n,l_rgb_an,l_3d_an,total,dense,steps"
        assert len(lines) == 2


class TestGradients:
    """Finite-difference checks of the training objective."""

    def test_prompt_and_suffix_gradients(self, float64, tiny_dataset, tiny_model):
        """Test analytic gradients w.r.t. CCP, MSP, MAP and the text suffix."""
        samples = _training_samples(tiny_dataset)[:2]
        schedule = sample_missing_schedule(2, "rgb", 0.5, seed=0)
        groups = tiny_model.prompts.groups()
        params = groups["ccp"] + groups["msp"] + groups["map"] + [tiny_model.text.suffix]
        assert all(p.dtype == torch.float64 for p in params)

        error = finite_difference_check(
            lambda: _loss(tiny_model, samples, schedule),
            params,
            epsilon=1e-5,
            max_entries=10_000,
        )

        assert error < 1e-4

    def test_suffix_gradient_nonzero(self, tiny_dataset, tiny_model):
        """Test that the abnormal term reaches the text suffix."""
        samples = _training_samples(tiny_dataset)[:2]
        _loss(tiny_model, samples, complete_schedule(2)).backward()

        assert tiny_model.text.suffix.grad.abs().sum() > 0
        assert tiny_model.prompts.ccp.grad.abs().sum() > 0

    def test_defect_target_gradients(self, float64, tiny_dataset, tiny_model):
        """Test analytic gradients of the objective with defect targets."""
        samples = _training_samples(tiny_dataset)[:2]
        generator = torch.Generator().manual_seed(0)
        targets = {
            "rgb": (torch.rand(2, 16, generator=generator) > 0.7).double(),
            "3d": (torch.rand(2, 16, generator=generator) > 0.7).double(),
        }
        groups = tiny_model.prompts.groups()
        params = groups["ccp"] + groups["msp"] + groups["map"] + [tiny_model.text.suffix]

        error = finite_difference_check(
            lambda: _loss(tiny_model, samples, complete_schedule(2), targets),
            params,
            epsilon=1e-5,
            max_entries=500,
        )

        assert error < 1e-4
