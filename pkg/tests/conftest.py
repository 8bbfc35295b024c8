#!/usr/bin/env python3
"""
pytest configuration file for misdd tests.
"""
import sys
from pathlib import Path

import pytest
import torch

# Add the project root to the path so we can import misdd modules
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from misdd.data_synth import DatasetSpec, generate_dataset  # noqa: E402
from misdd.model import build_model  # noqa: E402
from misdd.nn_core import freeze  # noqa: E402
from misdd.prompts import PromptConfig  # noqa: E402
from misdd.text_branch import (  # noqa: E402
    TextConfig,
    Vocabulary,
    build_text_encoder,
    load_templates,
)
from misdd.vision_encoder import EncoderConfig, build_encoder  # noqa: E402


@pytest.fixture
def tiny_spec() -> DatasetSpec:
    """Two classes of 16x16 samples: 4 training normals, 2 + 3 test samples each."""
    return DatasetSpec(
        classes=("tile", "foam"),
        n_train_normal=4,
        n_test_normal=2,
        n_test_anomalous=3,
        image_size=16,
        seed=3,
    )


@pytest.fixture
def tiny_dataset(tmp_path, tiny_spec):
    return generate_dataset(tiny_spec, tmp_path / "dataset")


@pytest.fixture
def tiny_encoder_config() -> EncoderConfig:
    return EncoderConfig(
        image_size=16,
        patch_size=4,
        depth=3,
        width=16,
        heads=2,
        prompt_depth=2,
        feature_layers=(1, 3),
        embed_dim=16,
    )


@pytest.fixture
def tiny_text_config() -> TextConfig:
    return TextConfig(width=16, layers=1, heads=2, context_length=12, embed_dim=16, n_ctx=2)


@pytest.fixture
def tiny_prompt_config() -> PromptConfig:
    return PromptConfig(l_ccp=2, l_msp=2, l_map=2, prompt_depth=2, width=16, heads=2)


@pytest.fixture
def float64():
    """Runs the test with float64 as the torch default dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def tiny_model(tiny_dataset, tiny_encoder_config, tiny_text_config, tiny_prompt_config):
    """Untrained model on the tiny dataset with a frozen encoder and text backbone."""
    templates = load_templates().with_classes(tiny_dataset.class_names)
    vocab = Vocabulary.from_templates(templates, tiny_text_config.n_ctx)
    text = build_text_encoder(vocab, tiny_text_config, seed=0)
    text.freeze_backbone()
    encoder = freeze(build_encoder(tiny_encoder_config, seed=0)).eval()
    return build_model(encoder, text, vocab, templates, tiny_prompt_config, seed=0)
