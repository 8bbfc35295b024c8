from .context import RunContext
from .data_synth import (
    PairedSample,
    PseudoDefect,
    SampleRecord,
    SyntheticDataset,
    synthesize_defects,
)
from .galleries_scoring import GallerySet, build_galleries
from .logger import logger, format_log_message as flm
from .missing_config import Modality, MissingSchedule, ModalityIndicator, mask_tensor
from .model import MisddModel
from .safeguards import require_unit_norm
from .text_branch import TextEmbeddingPair
from .tools import derive_seed
from .vision_encoder import token_targets
from collections.abc import Sequence
from dataclasses import asdict, dataclass, fields
from typing import Any
import csv
import io
import math
import numpy as np
import torch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_min: float = 1e-5
    epochs: int = 30
    batch_size: int = 8
    image_size: int = 64
    seed: int = 0
    use_ccp: bool = True
    use_msp: bool = True
    use_map: bool = True
    use_scl: bool = True
    skip_missing_terms: bool = False
    dense_weight: float = 1.0
    defect_rate: float = 0.5

    def validate(self) -> None:
        if not 0 < self.lr_min < self.lr:
            raise ValueError("TrainConfig.lr_min must be positive and below lr")
        if self.epochs < 1:
            raise ValueError("TrainConfig.epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("TrainConfig.batch_size must be >= 1")
        if self.dense_weight < 0:
            raise ValueError("TrainConfig.dense_weight must be >= 0")
        if not 0.0 <= self.defect_rate <= 1.0:
            raise ValueError("TrainConfig.defect_rate must be in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        return cls(**data)


@dataclass
class LossBreakdown:
    """
    The four vision-text distances and their signed total
    l_rgb_n + l_3d_n - l_rgb_an - l_3d_an.
    """

    l_rgb_n: torch.Tensor
    l_3d_n: torch.Tensor
    l_rgb_an: torch.Tensor
    l_3d_an: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.l_rgb_n + self.l_3d_n - self.l_rgb_an - self.l_3d_an

    def as_floats(self) -> dict[str, float]:
        return {
            "l_rgb_n": float(self.l_rgb_n),
            "l_3d_n": float(self.l_3d_n),
            "l_rgb_an": float(self.l_rgb_an),
            "l_3d_an": float(self.l_3d_an),
            "total": float(self.total),
        }


def _weights(
    ind: ModalityIndicator | Sequence[ModalityIndicator] | None,
    modality: Modality,
    like: torch.Tensor,
    skip_missing: bool,
) -> torch.Tensor:
    if ind is None or not skip_missing:
        return torch.ones(like.shape[0], dtype=like.dtype)
    return mask_tensor(ind, modality, like).reshape(-1)


def _pair_distances(
    features: torch.Tensor,
    text: TextEmbeddingPair,
    weights: torch.Tensor,
    targets: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    normal = text.normal.to(features.dtype)
    abnormal = text.abnormal.to(features.dtype)
    if features.dim() == 3 and normal.dim() == 2:
        normal, abnormal = normal.unsqueeze(-2), abnormal.unsqueeze(-2)
    d_n = torch.linalg.vector_norm(features - normal, dim=-1)
    d_an = torch.linalg.vector_norm(features - abnormal, dim=-1)
    if targets is not None:
        # Target 1 swaps the roles of the two texts.
        signs = 1.0 - 2.0 * targets.to(features.dtype).reshape(d_n.shape)
        d_n, d_an = signs * d_n, signs * d_an
    if features.dim() == 3:
        # Dense tokens: per-sample mean over tokens first.
        d_n, d_an = d_n.mean(dim=-1), d_an.mean(dim=-1)
    denominator = weights.sum().clamp_min(1.0)
    return (weights * d_n).sum() / denominator, (weights * d_an).sum() / denominator


def contrastive_loss(
    f_rgb: torch.Tensor | None,
    f_3d: torch.Tensor | None,
    text: TextEmbeddingPair,
    ind: ModalityIndicator | Sequence[ModalityIndicator] | None = None,
    skip_missing_terms: bool = False,
    targets_rgb: torch.Tensor | None = None,
    targets_3d: torch.Tensor | None = None,
) -> LossBreakdown:
    """
    Symmetric vision-text contrastive objective on unit vectors.

    Each branch contributes its Euclidean distance to the normal text embedding
    and minus its distance to the abnormal one, averaged over the batch. A
    branch given as None contributes nothing. With skip_missing_terms, samples
    whose modality is missing drop out of that branch's average. A defect
    target t in [0, 1] scales a term by 1 - 2t, so a defective sample or
    token is pulled toward the abnormal text instead.

    Args:
        f_rgb (torch.Tensor | None): RGB features (e,), (B, e) or tokens (B, n, e).
        f_3d (torch.Tensor | None): 3D features of the same shape.
        text (TextEmbeddingPair): Normal and abnormal text embeddings; rows may
            be (e,) or per-sample (B, e).
        ind: Availability of the batch's samples.
        skip_missing_terms (bool, optional): Drop missing-modality terms per sample.
        targets_rgb (torch.Tensor | None, optional): RGB defect targets (B,) or (B, n).
        targets_3d (torch.Tensor | None, optional): 3D defect targets (B,) or (B, n).

    Returns:
        LossBreakdown: The four distances and the signed total in [-4, 4].

    Raises:
        ValueError: If both branches are None or an input is not unit-norm.
    """
    if f_rgb is None and f_3d is None:
        raise ValueError("At least one visual feature is required")
    require_unit_norm(text.normal, "normal text embedding")
    require_unit_norm(text.abnormal, "abnormal text embedding")
    terms = {}
    for name, modality, features, targets in (
        ("rgb", Modality.RGB, f_rgb, targets_rgb),
        ("3d", Modality.THREE_D, f_3d, targets_3d),
    ):
        if features is None:
            zero = torch.zeros((), dtype=text.normal.dtype)
            terms[name] = (zero, zero)
            continue
        require_unit_norm(features, f"{name} feature")
        if features.dim() == 1:
            features = features.unsqueeze(0)
        weights = _weights(ind, modality, features, skip_missing_terms)
        terms[name] = _pair_distances(features, text, weights, targets)
    return LossBreakdown(terms["rgb"][0], terms["3d"][0], terms["rgb"][1], terms["3d"][1])


def dense_loss(
    tokens_rgb: dict[int, torch.Tensor] | None,
    tokens_3d: dict[int, torch.Tensor] | None,
    text: TextEmbeddingPair,
    ind: ModalityIndicator | Sequence[ModalityIndicator] | None = None,
    skip_missing_terms: bool = False,
    targets_rgb: torch.Tensor | None = None,
    targets_3d: torch.Tensor | None = None,
) -> torch.Tensor:
    """
    The signed four-distance objective on patch tokens, averaged over tokens and layers.

    Args:
        tokens_rgb: Layer -> (B, n, e) unit-norm RGB tokens, or None.
        tokens_3d: Layer -> (B, n, e) unit-norm 3D tokens, or None.
        text (TextEmbeddingPair): Normal and abnormal text embeddings.
        ind: Availability of the batch's samples.
        skip_missing_terms (bool, optional): Drop missing-modality terms per sample.
        targets_rgb: (B, n) RGB token defect targets shared by every layer, or None.
        targets_3d: (B, n) 3D token defect targets shared by every layer, or None.

    Returns:
        torch.Tensor: Scalar in [-4, 4].
    """
    layers = sorted((tokens_rgb or tokens_3d or {}).keys())
    if not layers:
        raise ValueError("Dense loss needs at least one exported layer")
    per_layer = [
        contrastive_loss(
            tokens_rgb[layer] if tokens_rgb is not None else None,
            tokens_3d[layer] if tokens_3d is not None else None,
            text,
            ind,
            skip_missing_terms,
            targets_rgb,
            targets_3d,
        ).total
        for layer in layers
    ]
    return torch.stack(per_layer).mean()


def stack_pairs(pairs: Sequence[TextEmbeddingPair]) -> TextEmbeddingPair:
    """Per-sample text rows (B, e) from one pair per sample."""
    return TextEmbeddingPair(
        torch.stack([p.normal for p in pairs]), torch.stack([p.abnormal for p in pairs])
    )


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    l_rgb_n: float
    l_3d_n: float
    l_rgb_an: float
    l_3d_an: float
    total: float
    dense: float
    steps: int


def epoch_log_csv(rows: Sequence[EpochLog]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([f.name for f in fields(EpochLog)])
    for row in rows:
        writer.writerow(
            [f"{v:.8f}" if isinstance(v, float) else v for v in asdict(row).values()]
        )
    return buffer.getvalue()


@dataclass(frozen=True)
class TrainingView:
    """Training records taking part in a run; records outside it are fully missing."""

    records: tuple[SampleRecord, ...]
    k: int | None = None
    seed: int | None = None


def few_shot_subset(dataset: SyntheticDataset, k: int, seed: int) -> TrainingView:
    """
    Keeps K training samples per class; the rest become fully unavailable.

    Args:
        dataset (SyntheticDataset): The dataset; the test split is untouched.
        k (int): Samples per class.
        seed (int): Selection seed.

    Returns:
        TrainingView: The retained records in manifest order.

    Raises:
        ValueError: If K < 1 or K exceeds a class's training size.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    retained: set[str] = set()
    for class_name in dataset.class_names:
        records = dataset.split("train", class_name)
        if k > len(records):
            raise ValueError(
                f"K={k} exceeds the {len(records)} training samples of class '{class_name}'"
            )
        rng = np.random.default_rng(derive_seed(seed, "fewshot", class_name))
        retained.update(records[i].id for i in rng.choice(len(records), size=k, replace=False))
    return TrainingView(
        tuple(r for r in dataset.split("train") if r.id in retained), k=k, seed=seed
    )


@dataclass
class TrainResult:
    epochs: list[EpochLog]
    galleries: GallerySet


def train(
    model: MisddModel,
    samples: Sequence[PairedSample],
    schedule: MissingSchedule,
    config: TrainConfig,
    context: RunContext | None = None,
) -> TrainResult:
    """
    Trains the prompts and the text suffix with symmetric contrastive learning,
    then builds the galleries.

    Only parameters still marked trainable (prompts and text suffix) are
    updated; SGD with momentum and weight decay, cosine-annealed per epoch.
    Each batch sample is swapped for an injected-defect copy with probability
    defect_rate; the tokens its present modalities changed get target 1.
    With use_scl off the prompts are dropped, so the galleries and every later
    score come from the warmup features alone.

    Args:
        model (MisddModel): Model with a frozen encoder pair and text backbone.
        samples (Sequence[PairedSample]): Training normals in schedule order.
        schedule (MissingSchedule): Their availability.
        config (TrainConfig): Optimiser schedule and ablation switches.
        context (RunContext | None, optional): Logging context.

    Returns:
        TrainResult: Per-epoch logs and the galleries of the final model.

    Raises:
        ValueError: If there are no training samples or the schedule length differs.
        FloatingPointError: If the loss becomes NaN (names epoch and step).
    """
    context = context or RunContext({"id": "000000", "cell": "train"})
    config.validate()
    if not samples:
        raise ValueError("Empty effective training set")
    if len(samples) != schedule.n:
        raise ValueError(f"Schedule covers {schedule.n} samples, got {len(samples)}")

    params = model.trainable_parameters()
    logs: list[EpochLog] = []
    if not config.use_scl:
        # Untrained prompts only perturb the warmup features.
        model.prompts = None
        logger.info(
            flm(
                "Contrastive training disabled; prompts dropped, galleries use warmup features.",
                context.ident,
                context.verbose,
            )
        )
    elif not params:
        logger.warning(
            flm(
                "Nothing trainable; skipping contrastive training.",
                context.ident,
                context.verbose,
            )
        )
    else:
        logs = _fit(model, samples, schedule, config, params, context)

    galleries = build_galleries(model, samples, schedule, context)
    return TrainResult(logs, galleries)


def _branch_targets(
    items: Sequence[PseudoDefect], inds: Sequence[ModalityIndicator], patch_size: int
) -> dict[str, torch.Tensor]:
    """Token defect targets per branch; a missing modality shows no defect."""
    return {
        "rgb": token_targets(
            np.stack([i.rgb_mask & bool(ind.m_rgb) for i, ind in zip(items, inds)]), patch_size
        ),
        "3d": token_targets(
            np.stack([i.depth_mask & bool(ind.m_3d) for i, ind in zip(items, inds)]), patch_size
        ),
    }


def _fit(
    model: MisddModel,
    samples: Sequence[PairedSample],
    schedule: MissingSchedule,
    config: TrainConfig,
    params: list[torch.nn.Parameter],
    context: RunContext,
) -> list[EpochLog]:
    optimizer = torch.optim.SGD(
        params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=config.epochs, eta_min=config.lr_min
    )
    model.encoder.eval()
    patch_size = model.encoder.config.patch_size
    logs = []
    n = len(samples)
    for epoch in range(config.epochs):
        lr = optimizer.param_groups[0]["lr"]
        rng = np.random.default_rng(derive_seed(config.seed, "epoch", epoch))
        defect_rng = np.random.default_rng(derive_seed(config.seed, "defects", epoch))
        order = rng.permutation(n)
        sums = np.zeros(6)
        steps = 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            index = order[start : start + config.batch_size]
            inds = [schedule[i] for i in index]
            items = synthesize_defects([samples[i] for i in index], config.defect_rate, defect_rng)
            batch = [i.sample for i in items]
            targets = _branch_targets(items, inds, patch_size)
            features = model.encode_samples(batch, inds, schedule.level)
            pairs = {
                c: model.text_pair(c, context) for c in sorted({s.class_name for s in batch})
            }
            text = stack_pairs([pairs[s.class_name] for s in batch])
            breakdown = contrastive_loss(
                features["rgb"].pooled,
                features["3d"].pooled,
                text,
                inds,
                config.skip_missing_terms,
                targets["rgb"].amax(dim=1),
                targets["3d"].amax(dim=1),
            )
            dense = dense_loss(
                features["rgb"].per_layer,
                features["3d"].per_layer,
                text,
                inds,
                config.skip_missing_terms,
                targets["rgb"],
                targets["3d"],
            )
            loss = breakdown.total + config.dense_weight * dense
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"Loss is {loss.item()} at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            values = breakdown.as_floats()
            sums += [
                values["l_rgb_n"],
                values["l_3d_n"],
                values["l_rgb_an"],
                values["l_3d_an"],
                values["total"],
                float(dense),
            ]
            steps += 1
        scheduler.step()
        means = sums / steps
        logs.append(EpochLog(epoch, lr, *map(float, means), steps))
        logger.info(
            flm(
                f"Epoch {epoch}: lr {lr:.6f} total {means[4]:+.4f} dense {means[5]:+.4f}",
                context.ident,
                context.verbose,
            )
        )
    return logs
