from .context import RunContext
from .logger import logger, format_log_message as flm
from .nn_core import ResidualAttentionBlock, freeze, seeded
from .safeguards import require_finite
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Any
import json
import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_TEMPLATE = "a photo of a {}"
DEFAULT_STATES: tuple[str, ...] = ("with crack", "with hole", "with contamination", "damaged")

# Softmax temperature of every vision-text score.
TEMPERATURE: float = 0.07

# Cosine above which the normal and abnormal embeddings count as indistinguishable.
DUALITY_COSINE_LIMIT: float = 1.0 - 1e-4


@dataclass(frozen=True)
class PromptTemplates:
    """General templates, class names, state phrases and spare words of the text prompts."""

    templates: tuple[str, ...] = (DEFAULT_TEMPLATE,)
    classes: tuple[str, ...] = ()
    states: tuple[str, ...] = DEFAULT_STATES
    extra_words: tuple[str, ...] = ()

    def validate(self) -> None:
        if not self.templates:
            raise ValueError("Prompt templates: 'templates' must not be empty")
        for template in self.templates:
            if template.count("{}") != 1:
                raise ValueError(f"Prompt template {template!r} must contain one '{{}}'")
        if not self.states:
            raise ValueError("Prompt templates: 'states' must not be empty")

    def with_classes(self, classes: Iterable[str]) -> "PromptTemplates":
        """Returns a copy whose class list also holds the given names."""
        merged = list(self.classes)
        merged += [c for c in classes if c not in merged]
        return PromptTemplates(self.templates, tuple(merged), self.states, self.extra_words)

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PromptTemplates":
        return cls(
            templates=tuple(data.get("templates", [DEFAULT_TEMPLATE])),
            classes=tuple(data.get("classes", [])),
            states=tuple(data.get("states", DEFAULT_STATES)),
            extra_words=tuple(data.get("extra_words", [])),
        )


def load_templates(path: str | Path | None = None) -> PromptTemplates:
    """
    Reads a prompt template file, defaulting to the one shipped with the package.

    Args:
        path (str | Path | None, optional): A JSON file with templates, classes and states.

    Returns:
        PromptTemplates: The validated templates.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If the file is not valid JSON or misses required entries.
    """
    if path is None:
        text = resources.files("misdd").joinpath("prompt_templates.json").read_text("utf-8")
        source = "packaged prompt_templates.json"
    else:
        text = Path(path).read_text(encoding="utf-8")
        source = str(path)
    try:
        templates = PromptTemplates.from_dict(json.loads(text))
    except (json.JSONDecodeError, AttributeError, TypeError) as e:
        raise ValueError(f"{source}: invalid prompt template file: {e}") from e
    templates.validate()
    return templates


def _words(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """
    Closed word list plus n_ctx reserved suffix slots.

    Word ids follow first appearance; the suffix slots take the ids right after
    the last word.
    """

    def __init__(self, words: Sequence[str], n_ctx: int):
        if len(set(words)) != len(words):
            raise ValueError("Vocabulary words must be unique")
        if n_ctx < 0:
            raise ValueError("Vocabulary n_ctx must be >= 0")
        self.words = list(words)
        self.n_ctx = n_ctx
        self._ids = {w: i for i, w in enumerate(self.words)}

    @property
    def n_words(self) -> int:
        return len(self.words)

    def __len__(self) -> int:
        return self.n_words + self.n_ctx

    def word_id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise ValueError(f"Word {word!r} is not in the vocabulary") from None

    def suffix_ids(self, count: int) -> list[int]:
        if count > self.n_ctx:
            raise ValueError(f"Requested {count} suffix slots, vocabulary reserves {self.n_ctx}")
        return [self.n_words + k for k in range(count)]

    def is_suffix(self, token_id: int) -> bool:
        return token_id >= self.n_words

    @classmethod
    def from_templates(cls, templates: PromptTemplates, n_ctx: int) -> "Vocabulary":
        words: list[str] = []
        phrases = [t.replace("{}", " ") for t in templates.templates]
        phrases += list(templates.classes) + list(templates.states) + list(templates.extra_words)
        for phrase in phrases:
            for word in _words(phrase):
                if word not in words:
                    words.append(word)
        return cls(words, n_ctx)

    @classmethod
    def from_template_file(
        cls, path: str | Path | None, n_ctx: int, classes: Iterable[str] = ()
    ) -> "Vocabulary":
        return cls.from_templates(load_templates(path).with_classes(classes), n_ctx)

    def to_dict(self) -> dict[str, Any]:
        return {"words": self.words, "n_ctx": self.n_ctx}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Vocabulary":
        return cls(list(data["words"]), int(data["n_ctx"]))


@dataclass(frozen=True)
class TextPromptSpec:
    """
    A normal prompt [template][class] or an abnormal one [template][class][state][X].
    """

    general_text: str
    class_name: str
    state: str | None = None
    n_ctx: int = 0

    def validate(self) -> None:
        if "{}" not in self.general_text:
            raise ValueError(f"General text {self.general_text!r} has no class slot")
        if self.state is None and self.n_ctx:
            raise ValueError("Normal text prompts carry no learnable suffix")
        if self.n_ctx < 0:
            raise ValueError("TextPromptSpec.n_ctx must be >= 0")

    @property
    def abnormal(self) -> bool:
        return self.state is not None


def tokenize(spec: TextPromptSpec, vocab: Vocabulary) -> list[int]:
    """
    Maps a prompt to token ids.

    Args:
        spec (TextPromptSpec): The prompt.
        vocab (Vocabulary): The closed vocabulary.

    Returns:
        list[int]: Word ids, followed by n_ctx reserved suffix ids for abnormal prompts.

    Raises:
        ValueError: On an out-of-vocabulary word or too many suffix slots.
    """
    spec.validate()
    words = _words(spec.general_text.format(spec.class_name)) + _words(spec.state or "")
    return [vocab.word_id(w) for w in words] + vocab.suffix_ids(spec.n_ctx)


@dataclass(frozen=True)
class TextConfig:
    width: int = 64
    layers: int = 2
    heads: int = 4
    context_length: int = 16
    embed_dim: int = 64
    n_ctx: int = 4

    def validate(self) -> None:
        if self.width < 1 or self.heads < 1 or self.width % self.heads:
            raise ValueError("TextConfig.width must be a positive multiple of heads")
        if self.layers < 1:
            raise ValueError("TextConfig.layers must be >= 1")
        if self.n_ctx < 0:
            raise ValueError("TextConfig.n_ctx must be >= 0")
        if self.context_length < 1:
            raise ValueError("TextConfig.context_length must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TextConfig":
        return cls(**data)


class TextEncoder(nn.Module):
    """
    Small text transformer: token embeddings, nn_core blocks, the last token's
    state through a projection, unit-normalised.

    Reserved suffix ids read their embeddings from `suffix`, the only part that
    stays trainable once the backbone is frozen.
    """

    def __init__(self, vocab: Vocabulary, config: TextConfig):
        super().__init__()
        config.validate()
        if vocab.n_ctx < config.n_ctx:
            raise ValueError(
                f"Vocabulary reserves {vocab.n_ctx} suffix slots, text config needs {config.n_ctx}"
            )
        self.config = config
        self.n_words = vocab.n_words
        self.token_embedding = nn.Embedding(vocab.n_words, config.width)
        self.positional_embedding = nn.Parameter(
            torch.randn(config.context_length, config.width) * 0.01
        )
        self.blocks = nn.ModuleList(
            ResidualAttentionBlock(config.width, config.heads) for _ in range(config.layers)
        )
        self.ln_final = nn.LayerNorm(config.width)
        self.text_projection = nn.Linear(config.width, config.embed_dim, bias=False)
        self.suffix = nn.Parameter(torch.randn(config.n_ctx, config.width) * 0.02)

    def freeze_backbone(self) -> None:
        """Freezes everything but the learnable suffix."""
        freeze(self)
        self.suffix.requires_grad_(True)

    def forward(self, ids: Sequence[int]) -> torch.Tensor:
        if not ids:
            raise ValueError("Cannot encode an empty token sequence")
        if len(ids) > self.config.context_length:
            raise ValueError(
                f"Token sequence of length {len(ids)} exceeds context length "
                f"{self.config.context_length}"
            )
        rows = []
        for token_id in ids:
            if token_id >= self.n_words:
                rows.append(self.suffix[token_id - self.n_words])
            else:
                rows.append(self.token_embedding.weight[token_id])
        x = torch.stack(rows) + self.positional_embedding[: len(ids)]
        for block in self.blocks:
            x = block(x)
        out = self.text_projection(self.ln_final(x[-1]))
        require_finite(out, "text embedding")
        return F.normalize(out, dim=-1)


def build_text_encoder(vocab: Vocabulary, config: TextConfig, seed: int) -> TextEncoder:
    with seeded(seed):
        return TextEncoder(vocab, config)


def encode_text(encoder: TextEncoder, ids: Sequence[int]) -> torch.Tensor:
    """
    Encodes token ids into a unit-norm embedding.

    Raises:
        ValueError: If the sequence is empty or too long.
    """
    return encoder(ids)


@dataclass
class TextEmbeddingPair:
    """Unit-norm normal and abnormal text embeddings of one class."""

    normal: torch.Tensor
    abnormal: torch.Tensor

    def stack(self) -> torch.Tensor:
        """(2, e) rows ordered normal, abnormal."""
        return torch.stack([self.normal, self.abnormal])

    def detach(self) -> "TextEmbeddingPair":
        return TextEmbeddingPair(self.normal.detach(), self.abnormal.detach())

    def cosine(self) -> float:
        return float(torch.dot(self.normal, self.abnormal))


def _mean_direction(vectors: list[torch.Tensor]) -> torch.Tensor:
    return F.normalize(torch.stack(vectors).mean(dim=0), dim=-1)


def build_semantic_duality(
    encoder: TextEncoder,
    vocab: Vocabulary,
    class_name: str,
    states: Iterable[str] = DEFAULT_STATES,
    n_ctx: int | None = None,
    templates: Sequence[str] = (DEFAULT_TEMPLATE,),
    context: RunContext | None = None,
) -> TextEmbeddingPair:
    """
    Builds the normal and abnormal text embeddings of one class.

    The normal embedding averages the normal prompt over the general templates.
    The abnormal embedding averages over every template, state and suffix
    variant (fixed: state only; learnable: state plus n_ctx suffix slots).
    States are deduplicated and sorted first.

    Args:
        encoder (TextEncoder): The text encoder.
        vocab (Vocabulary): Its vocabulary.
        class_name (str): The class word.
        states (Iterable[str], optional): State phrases.
        n_ctx (int | None, optional): Learnable suffix length; defaults to the encoder's.
        templates (Sequence[str], optional): General templates.
        context (RunContext | None, optional): Logging context.

    Returns:
        TextEmbeddingPair: Both embeddings, differentiable w.r.t. the suffix.

    Raises:
        ValueError: If the state list or template list is empty.
    """
    states = sorted(set(states))
    if not states:
        raise ValueError("State list must not be empty")
    if not templates:
        raise ValueError("Template list must not be empty")
    n_ctx = encoder.config.n_ctx if n_ctx is None else n_ctx

    normal = _mean_direction(
        [encoder(tokenize(TextPromptSpec(t, class_name), vocab)) for t in templates]
    )
    abnormal = _mean_direction(
        [
            encoder(tokenize(TextPromptSpec(t, class_name, state, suffix), vocab))
            for t in templates
            for state in states
            for suffix in sorted({0, n_ctx})
        ]
    )
    pair = TextEmbeddingPair(normal, abnormal)
    if pair.cosine() >= DUALITY_COSINE_LIMIT:
        context = context or RunContext({"id": "000000", "cell": "text"})
        logger.warning(
            flm(
                f"Normal and abnormal text embeddings of '{class_name}' coincide "
                f"(cosine {pair.cosine():.6f}).",
                context.ident,
                context.verbose,
            )
        )
    return pair
