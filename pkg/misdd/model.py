from .context import RunContext
from .data_synth import PairedSample
from .missing_config import MissingLevel, ModalityIndicator, apply_input_missing
from .nn_core import count_parameters, load_module_records, module_records
from .prompts import PromptBundle, PromptConfig, init_prompts
from .tensor_io import TensorRecord, load_checkpoint, save_checkpoint
from .text_branch import (
    PromptTemplates,
    TextConfig,
    TextEmbeddingPair,
    TextEncoder,
    Vocabulary,
    build_semantic_duality,
)
from .tools import derive_seed
from .vision_encoder import DualEncoder, EncoderConfig, VisualFeatures, images_to_tensor
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any
import torch
import torch.nn as nn


@dataclass(frozen=True)
class ParameterRow:
    component: str
    count: int
    learnable: bool


class MisddModel(nn.Module):
    """
    Frozen dual encoder and text encoder plus the learnable prompts and text suffix.
    """

    def __init__(
        self,
        encoder: DualEncoder,
        text: TextEncoder,
        vocab: Vocabulary,
        templates: PromptTemplates,
        prompts: PromptBundle | None = None,
    ):
        super().__init__()
        if text.config.embed_dim != encoder.config.embed_dim:
            raise ValueError(
                f"Text embedding dim {text.config.embed_dim} != visual embedding dim "
                f"{encoder.config.embed_dim}"
            )
        if prompts is not None:
            prompts.check_encoder(encoder.config.width, encoder.config.depth)
        self.encoder = encoder
        self.text = text
        self.prompts = prompts
        self.vocab = vocab
        self.templates = templates

    @property
    def image_size(self) -> int:
        return self.encoder.config.image_size

    def encode_samples(
        self,
        samples: Sequence[PairedSample],
        indicators: Sequence[ModalityIndicator],
        level: MissingLevel | str = MissingLevel.INPUT,
    ) -> dict[str, VisualFeatures]:
        """
        Encodes samples with both branches under their availability indicators.

        Input level zero-fills the missing images before encoding; feature
        level zeroes the missing modality's patch features instead.

        Returns:
            dict[str, VisualFeatures]: Features keyed "rgb" and "3d".
        """
        if len(samples) != len(indicators):
            raise ValueError(f"Got {len(indicators)} indicators for {len(samples)} samples")
        for sample in samples:
            if sample.image_size != self.image_size:
                raise ValueError(
                    f"sample {sample.id}: image size {sample.image_size} differs from "
                    f"the model's {self.image_size}"
                )
        if MissingLevel(level) is MissingLevel.INPUT:
            masked = [apply_input_missing(s, ind) for s, ind in zip(samples, indicators)]
            rgb = images_to_tensor([m.rgb for m in masked])
            depth = images_to_tensor([m.depth for m in masked])
            return {
                "rgb": self.encoder.encode(rgb, "rgb", self.prompts),
                "3d": self.encoder.encode(depth, "3d", self.prompts),
            }
        rgb = images_to_tensor([s.rgb for s in samples])
        depth = images_to_tensor([s.depth for s in samples])
        return self.encoder.encode_pair(rgb, depth, self.prompts, list(indicators))

    def text_pair(self, class_name: str, context: RunContext | None = None) -> TextEmbeddingPair:
        """The class's semantic duality under the model's templates and states."""
        return build_semantic_duality(
            self.text,
            self.vocab,
            class_name,
            self.templates.states,
            templates=self.templates.templates,
            context=context,
        )

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def parameter_table(self) -> list[ParameterRow]:
        """
        Parameter counts per component; the rows partition every parameter of the model.
        """
        groups = self.prompts.groups() if self.prompts is not None else {}
        text_total = count_parameters(self.text)
        suffix = self.text.suffix.numel()
        rows = [
            ParameterRow("vision encoder", count_parameters(self.encoder), False),
            ParameterRow("text encoder", text_total - suffix, False),
            ParameterRow("CCP", sum(p.numel() for p in groups.get("ccp", [])), True),
            ParameterRow("MSP", sum(p.numel() for p in groups.get("msp", [])), True),
            ParameterRow("MAP", sum(p.numel() for p in groups.get("map", [])), True),
            ParameterRow("text suffix", suffix, True),
        ]
        return rows


def build_model(
    encoder: DualEncoder,
    text: TextEncoder,
    vocab: Vocabulary,
    templates: PromptTemplates,
    prompt_config: PromptConfig,
    seed: int,
) -> MisddModel:
    """
    Wraps a warmed-up encoder pair and text encoder with freshly initialised prompts.

    No prompts are created when every prompt kind is disabled.
    """
    prompts = (
        init_prompts(prompt_config, derive_seed(seed, "prompts"))
        if prompt_config.enabled
        else None
    )
    return MisddModel(encoder, text, vocab, templates, prompts)


def model_records(model: MisddModel) -> list[TensorRecord]:
    records = module_records(model.encoder, "encoder") + module_records(model.text, "text")
    if model.prompts is not None:
        records += module_records(model.prompts, "prompts")
    return records


def save_model(
    path: str | Path, model: MisddModel, meta: dict[str, Any] | None = None
) -> Path:
    """
    Writes the model as a checkpoint container.

    Args:
        path (str | Path): The checkpoint directory.
        model (MisddModel): The model.
        meta (dict[str, Any] | None, optional): Extra metadata stored under "run".

    Returns:
        Path: The checkpoint directory.
    """
    full_meta = {
        "encoder": model.encoder.config.to_dict(),
        "text": model.text.config.to_dict(),
        "prompts": model.prompts.config.to_dict() if model.prompts is not None else None,
        "vocab": model.vocab.to_dict(),
        "templates": model.templates.to_dict(),
        "run": meta or {},
    }
    return save_checkpoint(path, model_records(model), full_meta)


def load_model(path: str | Path) -> tuple[MisddModel, dict[str, Any]]:
    """
    Rebuilds a model from a checkpoint container.

    Args:
        path (str | Path): The checkpoint directory.

    Returns:
        tuple[MisddModel, dict[str, Any]]: The model (trainable flags restored) and
        the run metadata.

    Raises:
        FileNotFoundError: If the checkpoint does not exist.
        CorruptFileError: If the container is malformed.
        ValueError: If the tensors do not fit the recorded configuration.
    """
    records, meta = load_checkpoint(path)
    vocab = Vocabulary.from_dict(meta["vocab"])
    encoder = DualEncoder(EncoderConfig.from_dict(meta["encoder"]))
    text = TextEncoder(vocab, TextConfig.from_dict(meta["text"]))
    prompts = (
        PromptBundle(PromptConfig.from_dict(meta["prompts"]))
        if meta.get("prompts")
        else None
    )
    dtype = torch.float64 if records and records[0].array.dtype.name == "float64" else torch.float32
    modules: list[tuple[nn.Module, str]] = [(encoder, "encoder"), (text, "text")]
    if prompts is not None:
        modules.append((prompts, "prompts"))
    for module, prefix in modules:
        module.to(dtype)
        load_module_records(module, records, prefix)
    encoder.eval()
    model = MisddModel(
        encoder, text, vocab, PromptTemplates.from_dict(meta["templates"]), prompts
    )
    return model, meta.get("run", {})
