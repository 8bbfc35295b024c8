from .context import RunContext
from .data_synth import PairedSample, synthesize_defects
from .logger import logger, format_log_message as flm
from .missing_config import Modality, ModalityIndicator, apply_feature_missing
from .nn_core import ResidualAttentionBlock, freeze, seeded
from .prompts import PromptBundle
from .safeguards import require_finite
from .text_branch import (
    DEFAULT_STATES,
    DEFAULT_TEMPLATE,
    TEMPERATURE,
    TextEncoder,
    Vocabulary,
    build_semantic_duality,
)
from .tools import derive_seed, round_half_up
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from itertools import chain
from typing import Any
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# Share of changed pixels at which a token counts as fully defective.
DEFECT_COVERAGE: float = 0.25
# Extra loss weight of defective tokens.
DEFECT_WEIGHT: float = 4.0


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 8
    width: int = 64
    heads: int = 4
    prompt_depth: int = 6
    feature_layers: tuple[int, ...] = (2, 4, 6, 8)
    embed_dim: int = 64

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def validate(self) -> None:
        """
        Raises:
            ValueError: Naming the first inconsistent field.
        """
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValueError(
                f"EncoderConfig.image_size {self.image_size} is not divisible by "
                f"patch_size {self.patch_size}"
            )
        if self.depth < 1:
            raise ValueError("EncoderConfig.depth must be >= 1")
        if self.width < 1 or self.heads < 1 or self.width % self.heads:
            raise ValueError("EncoderConfig.width must be a positive multiple of heads")
        if not 0 <= self.prompt_depth <= self.depth:
            raise ValueError("EncoderConfig.prompt_depth must be in [0, depth]")
        if not self.feature_layers or any(
            not 1 <= layer <= self.depth for layer in self.feature_layers
        ):
            raise ValueError(
                "EncoderConfig.feature_layers must be a non-empty subset of [1, depth]"
            )

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["feature_layers"] = list(self.feature_layers)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EncoderConfig":
        data = dict(data)
        data["feature_layers"] = tuple(data["feature_layers"])
        return cls(**data)


@dataclass(frozen=True)
class WarmupConfig:
    epochs: int = 20
    mask_ratio: float = 0.4
    lr: float = 1e-3
    batch_size: int = 16
    align_epochs: int = 10
    defect_rate: float = 0.5

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("WarmupConfig.epochs must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("WarmupConfig.mask_ratio must be in (0, 1)")
        if self.lr <= 0:
            raise ValueError("WarmupConfig.lr must be positive")
        if self.batch_size < 1:
            raise ValueError("WarmupConfig.batch_size must be >= 1")
        if self.align_epochs < 0:
            raise ValueError("WarmupConfig.align_epochs must be >= 0")
        if not 0.0 <= self.defect_rate <= 1.0:
            raise ValueError("WarmupConfig.defect_rate must be in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "WarmupConfig":
        return cls(**data)


@dataclass
class VisualFeatures:
    """
    Encoder output of one batch.

    per_layer maps an exported layer (1-based) to unit-norm patch tokens
    (B, n_patches, e) with prompt tokens stripped; pooled is (B, e) unit-norm;
    seq_lengths is the token count inside every block.
    """

    per_layer: dict[int, torch.Tensor]
    pooled: torch.Tensor
    seq_lengths: tuple[int, ...] = field(default=())


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stacks H x W x C float arrays into a (B, C, H, W) float32 tensor."""
    array = np.stack([np.asarray(i, dtype=np.float32) for i in images])
    return torch.from_numpy(array).permute(0, 3, 1, 2).contiguous()


class PatchEmbed(nn.Module):
    """Linear patch projection plus class token and learned positional embeddings."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.patch_size = config.patch_size
        self.image_size = config.image_size
        scale = config.width**-0.5
        self.proj = nn.Linear(3 * config.patch_size**2, config.width)
        self.class_embedding = nn.Parameter(torch.randn(config.width) * scale)
        self.positional_embedding = nn.Parameter(
            torch.randn(config.n_patches + 1, config.width) * scale
        )

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, n_patches, 3 * p * p), row-major patch order."""
        b, c, h, w = images.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"Image {h}x{w} is not divisible by patch size {p}")
        if h != self.image_size or w != self.image_size:
            raise ValueError(
                f"Image {h}x{w} does not match the encoder image size {self.image_size}"
            )
        patches = images.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return patches.reshape(b, (h // p) * (w // p), c * p * p)

    def assemble(self, patch_features: torch.Tensor) -> torch.Tensor:
        """Prepends the class token and adds positional embeddings."""
        cls = self.class_embedding.expand(patch_features.shape[0], 1, -1)
        return torch.cat([cls, patch_features], dim=1) + self.positional_embedding

    def forward(
        self, images: torch.Tensor, feature_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        features = self.proj(self.patchify(images))
        if feature_mask is not None:
            features = features * feature_mask
        return self.assemble(features)


class VisionBranch(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed(config)
        self.ln_pre = nn.LayerNorm(config.width)
        self.blocks = nn.ModuleList(
            ResidualAttentionBlock(config.width, config.heads) for _ in range(config.depth)
        )
        self.ln_post = nn.LayerNorm(config.width)
        self.proj = nn.Linear(config.width, config.embed_dim, bias=False)

    def head(self, tokens: torch.Tensor) -> torch.Tensor:
        """Maps residual-stream tokens into the unit-norm joint embedding space."""
        return F.normalize(self.proj(self.ln_post(tokens)), dim=-1)

    def run_blocks(
        self,
        x: torch.Tensor,
        branch: str = "rgb",
        prompts: PromptBundle | None = None,
    ) -> tuple[torch.Tensor, dict[int, torch.Tensor], tuple[int, ...]]:
        """
        Runs the blocks, injecting prompts at layers 0..prompt_depth-1.

        Returns:
            The final tokens, the exported layers' raw tokens (prompts stripped)
            and the per-block sequence lengths.
        """
        msp = prompts.modality_prompt(branch, x[:, 1:]) if prompts is not None else None
        carry = None
        exported: dict[int, torch.Tensor] = {}
        lengths = []
        for j, block in enumerate(self.blocks):
            if prompts is not None and j < prompts.prompt_depth:
                extended = prompts.extend(branch, block.attn, x, j, msp, carry)
                carry = extended.map_refined
                lengths.append(extended.tokens.shape[1])
                x = block(extended.tokens)[:, extended.n_prompt :]
            else:
                lengths.append(x.shape[1])
                x = block(x)
            if j + 1 in self.config.feature_layers:
                exported[j + 1] = x[:, 1:]
        return x, exported, tuple(lengths)

    def forward(
        self,
        images: torch.Tensor,
        branch: str = "rgb",
        prompts: PromptBundle | None = None,
        feature_mask: torch.Tensor | None = None,
    ) -> VisualFeatures:
        features = self.patch_embed.proj(self.patch_embed.patchify(images))
        if feature_mask is not None:
            features = features * feature_mask
        return self.encode_features(features, branch, prompts)

    def encode_features(
        self,
        patch_features: torch.Tensor,
        branch: str = "rgb",
        prompts: PromptBundle | None = None,
    ) -> VisualFeatures:
        """Encodes projected patch features (B, n_patches, d)."""
        x = self.ln_pre(self.patch_embed.assemble(patch_features))
        x, exported, lengths = self.run_blocks(x, branch, prompts)
        pooled = self.head(x[:, 0])
        require_finite(pooled, f"{branch} pooled feature")
        return VisualFeatures(
            per_layer={layer: self.head(t) for layer, t in exported.items()},
            pooled=pooled,
            seq_lengths=lengths,
        )


class DualEncoder(nn.Module):
    """RGB and 3D branches of one architecture with separate weights."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.branches = nn.ModuleDict({m.value: VisionBranch(config) for m in Modality})

    @property
    def dtype(self) -> torch.dtype:
        return self.branches["rgb"].patch_embed.proj.weight.dtype

    def prepare(self, images: torch.Tensor, branch: Modality | str) -> torch.Tensor:
        """Batches, casts, and replicates single-channel depth to three channels."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        images = images.to(self.dtype)
        if Modality(branch) is Modality.THREE_D and images.shape[1] == 1:
            images = images.expand(-1, 3, -1, -1)
        if images.shape[1] != 3:
            raise ValueError(f"{Modality(branch).value} input has {images.shape[1]} channels")
        return images

    def encode(
        self,
        images: torch.Tensor,
        branch: Modality | str,
        prompts: PromptBundle | None = None,
        feature_mask: torch.Tensor | None = None,
    ) -> VisualFeatures:
        """
        Encodes a batch with one branch.

        Args:
            images (torch.Tensor): (B, C, H, W) or (C, H, W); depth may have C = 1.
            branch (Modality | str): "rgb" or "3d".
            prompts (PromptBundle | None, optional): Prompts to inject.
            feature_mask (torch.Tensor | None, optional): (B, 1, 1) availability
                mask applied to the projected patch features.

        Returns:
            VisualFeatures: Exported layers, pooled feature and sequence lengths.

        Raises:
            ValueError: On a prompt/config mismatch, a bad image shape, or
                        non-finite activations.
        """
        name = Modality(branch).value
        if prompts is not None:
            prompts.check_encoder(self.config.width, self.config.depth)
        return self.branches[name](self.prepare(images, name), name, prompts, feature_mask)

    def encode_pair(
        self,
        rgb: torch.Tensor,
        depth: torch.Tensor,
        prompts: PromptBundle | None = None,
        indicators: ModalityIndicator | Sequence[ModalityIndicator] | None = None,
    ) -> dict[str, VisualFeatures]:
        """
        Encodes an RGB batch and a depth batch.

        With indicators, feature-level missing is applied: both inputs are
        complete and the projected patch features of a missing modality are
        zeroed before positional embeddings are added.
        """
        if prompts is not None:
            prompts.check_encoder(self.config.width, self.config.depth)
        features = {}
        for name, images in (("rgb", rgb), ("3d", depth)):
            embed = self.branches[name].patch_embed
            features[name] = embed.proj(embed.patchify(self.prepare(images, name)))
        if indicators is not None:
            features["rgb"], features["3d"] = apply_feature_missing(
                features["rgb"], features["3d"], indicators
            )
        return {
            name: self.branches[name].encode_features(f, name, prompts)
            for name, f in features.items()
        }


def patch_embed(encoder: DualEncoder, image: torch.Tensor, branch: Modality | str) -> torch.Tensor:
    """Embedded tokens (B, n_patches + 1, d) of a batch before the first block."""
    name = Modality(branch).value
    return encoder.branches[name].patch_embed(encoder.prepare(image, name))


def encode(
    encoder: DualEncoder,
    image: torch.Tensor,
    branch: Modality | str,
    prompts: PromptBundle | None = None,
) -> VisualFeatures:
    return encoder.encode(image, branch, prompts)


def build_encoder(config: EncoderConfig, seed: int) -> DualEncoder:
    with seeded(derive_seed(seed, "encoder")):
        return DualEncoder(config)


class MaskedReconstruction(nn.Module):
    """Mask token and linear pixel decoder used only while warming up one branch."""

    def __init__(self, branch: VisionBranch):
        super().__init__()
        config = branch.config
        self.branch = branch
        self.mask_token = nn.Parameter(torch.zeros(config.width))
        self.decoder = nn.Linear(config.width, 3 * config.patch_size**2)

    def forward(
        self, images: torch.Tensor, generator: torch.Generator, mask_ratio: float
    ) -> torch.Tensor:
        embed = self.branch.patch_embed
        patches = embed.patchify(images)
        features = embed.proj(patches)
        b, n, _ = features.shape
        k = min(n, max(1, round_half_up(mask_ratio * n)))
        order = torch.rand(b, n, generator=generator).argsort(dim=1)
        mask = torch.zeros(b, n, dtype=torch.bool).scatter_(1, order[:, :k], True)
        features = torch.where(mask.unsqueeze(-1), self.mask_token.expand_as(features), features)
        x, _, _ = self.branch.run_blocks(self.branch.ln_pre(embed.assemble(features)))
        error = ((self.decoder(x[:, 1:]) - patches) ** 2).mean(dim=-1)
        return error[mask].mean()


def token_targets(masks: np.ndarray, patch_size: int) -> torch.Tensor:
    """
    Per-token defect targets (B, n_patches) in row-major patch order.

    A token's target is the fraction of its pixels set in the (B, H, W) mask,
    divided by DEFECT_COVERAGE and capped at 1.
    """
    masks = torch.from_numpy(np.asarray(masks, dtype=np.float32)).unsqueeze(1)
    coverage = F.avg_pool2d(masks, patch_size).flatten(1)
    return (coverage / DEFECT_COVERAGE).clamp(max=1.0)


def defect_alignment_loss(
    features: torch.Tensor,
    text_rows: torch.Tensor,
    targets: torch.Tensor,
    temperature: float = TEMPERATURE,
) -> torch.Tensor:
    """
    Soft cross-entropy of the normal/abnormal text softmax against defect targets.

    Terms are weighted 1 + DEFECT_WEIGHT * target so that the few defective
    tokens are not drowned by the normal ones.

    Args:
        features (torch.Tensor): Unit-norm pooled features (B, e) or tokens (B, n, e).
        text_rows (torch.Tensor): (B, 2, e) normal and abnormal rows of each sample's class.
        targets (torch.Tensor): (B,) or (B, n) abnormal targets in [0, 1].
        temperature (float, optional): Softmax temperature.

    Returns:
        torch.Tensor: The weighted mean cross-entropy.
    """
    if features.dim() == 2:
        features, targets = features.unsqueeze(1), targets.unsqueeze(1)
    logits = torch.einsum("bne,bke->bnk", features, text_rows.to(features.dtype)) / temperature
    log_p = torch.log_softmax(logits, dim=-1)
    targets = targets.to(features.dtype)
    entropy = -((1.0 - targets) * log_p[..., 0] + targets * log_p[..., 1])
    weights = 1.0 + DEFECT_WEIGHT * targets
    return (weights * entropy).sum() / weights.sum()


@dataclass
class WarmupResult:
    encoder: DualEncoder
    mae_losses: dict[str, list[float]]
    align_losses: list[float]


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _branch_inputs(samples: Sequence[PairedSample], dtype: torch.dtype) -> dict[str, torch.Tensor]:
    return {
        "rgb": images_to_tensor([s.rgb for s in samples]).to(dtype),
        "3d": images_to_tensor([s.depth for s in samples]).expand(-1, 3, -1, -1).to(dtype),
    }


def warmup_pretrain(
    normals: Sequence[PairedSample],
    config: EncoderConfig,
    warmup: WarmupConfig,
    seed: int,
    text: TextEncoder | None = None,
    vocab: Vocabulary | None = None,
    templates: Sequence[str] = (DEFAULT_TEMPLATE,),
    states: Sequence[str] = DEFAULT_STATES,
    context: RunContext | None = None,
) -> WarmupResult:
    """
    Trains both branches on normal samples, then freezes them.

    Stage one is masked-patch reconstruction per branch. Stage two, run when a
    text encoder is given, trains both branches and the text encoder on
    normals of which a share carries an injected defect: every token and every
    pooled feature is pushed toward its class's abnormal text where its own
    modality changed and toward the normal text elsewhere.

    Args:
        normals (Sequence[PairedSample]): Complete normal training samples.
        config (EncoderConfig): Encoder architecture.
        warmup (WarmupConfig): Warmup schedule.
        seed (int): Seed of every random stream used.
        text (TextEncoder | None, optional): Text encoder to align (frozen afterwards,
            suffix excepted).
        vocab (Vocabulary | None, optional): Vocabulary of the text encoder.
        templates (Sequence[str], optional): General templates of the prompts.
        states (Sequence[str], optional): State phrases of the abnormal prompts.
        context (RunContext | None, optional): Logging context.

    Returns:
        WarmupResult: The frozen encoder and per-epoch losses.

    Raises:
        ValueError: If there are no normal samples.
    """
    context = context or RunContext({"id": "000000", "cell": "warmup"})
    if not normals:
        raise ValueError("Warmup needs at least one normal training sample")
    config.validate()
    warmup.validate()
    encoder = build_encoder(config, seed)
    inputs = _branch_inputs(normals, encoder.dtype)
    n = len(normals)

    mae_losses: dict[str, list[float]] = {}
    for name, images in inputs.items():
        with seeded(derive_seed(seed, "mae-head", name)):
            head = MaskedReconstruction(encoder.branches[name])
        optimizer = torch.optim.AdamW(head.parameters(), lr=warmup.lr)
        generator = torch.Generator().manual_seed(derive_seed(seed, "mae-mask", name) % 2**63)
        rng = np.random.default_rng(derive_seed(seed, "mae-order", name))
        history = []
        for epoch in range(warmup.epochs):
            total = 0.0
            for index in _batches(n, warmup.batch_size, rng):
                loss = head(images[torch.from_numpy(index)], generator, warmup.mask_ratio)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(index)
            history.append(total / n)
            logger.debug(
                flm(
                    f"Warmup {name} epoch {epoch}: reconstruction loss {history[-1]:.5f}",
                    context.ident,
                    context.verbose,
                )
            )
        mae_losses[name] = history

    align_losses: list[float] = []
    if text is not None and vocab is not None:
        if warmup.align_epochs and warmup.defect_rate == 0.0:
            logger.warning(
                flm(
                    "Pseudo-defect rate is 0; text alignment sees no abnormal token.",
                    context.ident,
                    context.verbose,
                )
            )
        if warmup.align_epochs:
            align_losses = _align(
                encoder, text, vocab, normals, warmup, seed, templates, states, context
            )
        text.freeze_backbone()

    freeze(encoder)
    encoder.eval()
    logger.info(
        flm(
            f"Warmup finished on {n} normals in {context.get_elapsed_time():.1f}s",
            context.ident,
            context.verbose,
        )
    )
    return WarmupResult(encoder, mae_losses, align_losses)


def _align(
    encoder: DualEncoder,
    text: TextEncoder,
    vocab: Vocabulary,
    normals: Sequence[PairedSample],
    warmup: WarmupConfig,
    seed: int,
    templates: Sequence[str],
    states: Sequence[str],
    context: RunContext,
) -> list[float]:
    params = list(chain(encoder.parameters(), text.parameters()))
    for param in params:
        param.requires_grad_(True)
    optimizer = torch.optim.AdamW(params, lr=warmup.lr)
    defect_rng = np.random.default_rng(derive_seed(seed, "align-defects"))
    order_rng = np.random.default_rng(derive_seed(seed, "align-order"))
    patch = encoder.config.patch_size
    n = len(normals)

    history = []
    for epoch in range(warmup.align_epochs):
        items = synthesize_defects(normals, warmup.defect_rate, defect_rng)
        inputs = _branch_inputs([i.sample for i in items], encoder.dtype)
        targets = {
            "rgb": token_targets(np.stack([i.rgb_mask for i in items]), patch),
            "3d": token_targets(np.stack([i.depth_mask for i in items]), patch),
        }
        total = 0.0
        for index in _batches(n, warmup.batch_size, order_rng):
            rows = torch.from_numpy(index)
            names = [normals[i].class_name for i in index]
            pairs = {
                c: build_semantic_duality(
                    text, vocab, c, states, templates=templates, context=context
                ).stack()
                for c in sorted(set(names))
            }
            text_rows = torch.stack([pairs[c] for c in names])
            loss = torch.zeros((), dtype=encoder.dtype)
            for name, images in inputs.items():
                features = encoder.encode(images[rows], name)
                token_target = targets[name][rows]
                loss = loss + defect_alignment_loss(
                    features.pooled, text_rows, token_target.amax(dim=1)
                )
                loss = loss + torch.stack(
                    [
                        defect_alignment_loss(t, text_rows, token_target)
                        for t in features.per_layer.values()
                    ]
                ).mean()
            require_finite(loss, f"warmup alignment loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(index)
        history.append(total / n)
        logger.debug(
            flm(
                f"Warmup alignment epoch {epoch}: loss {history[-1]:.5f}",
                context.ident,
                context.verbose,
            )
        )
    return history
