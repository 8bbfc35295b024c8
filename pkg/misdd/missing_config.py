from .data_synth import PairedSample
from .tools import round_half_up
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any
import numpy as np
import torch


class MissingType(str, Enum):
    RGB = "rgb"
    THREE_D = "3d"
    BOTH = "both"
    NONE = "none"


class MissingLevel(str, Enum):
    INPUT = "input"
    FEATURE = "feature"


class Modality(str, Enum):
    RGB = "rgb"
    THREE_D = "3d"


@dataclass(frozen=True)
class ModalityIndicator:
    """
    Per-sample availability flags <M^rgb, M^3D>.

    The masks are constant over a sample, so only one flag per modality is kept
    and expanded to a mask on demand. The pair <0, 0> is not representable.
    """

    m_rgb: int
    m_3d: int

    def __post_init__(self) -> None:
        if self.m_rgb not in (0, 1) or self.m_3d not in (0, 1):
            raise ValueError("Indicator flags must be 0 or 1")
        if self.m_rgb == 0 and self.m_3d == 0:
            raise ValueError("A sample cannot miss both modalities")

    def flag(self, modality: Modality | str) -> int:
        return self.m_rgb if Modality(modality) is Modality.RGB else self.m_3d

    def mask(self, modality: Modality | str, shape: tuple[int, ...]) -> np.ndarray:
        """Expand one flag to a constant float32 mask of the given shape."""
        return np.full(shape, self.flag(modality), dtype=np.float32)

    @property
    def complete(self) -> bool:
        return self.m_rgb == 1 and self.m_3d == 1


COMPLETE = ModalityIndicator(1, 1)


def indicator_for(rgb_missing: bool, threeD_missing: bool) -> ModalityIndicator:
    """
    Builds the availability indicator of one sample.

    Args:
        rgb_missing (bool): Whether the RGB image is missing.
        threeD_missing (bool): Whether the depth map is missing.

    Returns:
        ModalityIndicator: <0,1> if RGB is missing, <1,0> if 3D is missing, <1,1> otherwise.

    Raises:
        ValueError: If both modalities are reported missing.
    """
    if rgb_missing and threeD_missing:
        raise ValueError("A sample cannot miss both modalities")
    if rgb_missing:
        return ModalityIndicator(0, 1)
    if threeD_missing:
        return ModalityIndicator(1, 0)
    return ModalityIndicator(1, 1)


@dataclass(frozen=True)
class MissingSchedule:
    """
    Missing-modality assignment over the n samples of one split.

    Only (missing_type, eta, seed, level) are serialised; assignments are
    re-derived from them.
    """

    missing_type: MissingType
    eta: float
    seed: int
    level: MissingLevel
    assignments: tuple[ModalityIndicator, ...] = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.assignments)

    def __getitem__(self, index: int) -> ModalityIndicator:
        return self.assignments[index]

    def counts(self) -> dict[str, int]:
        """Numbers of rgb-missing, 3d-missing and complete samples."""
        return {
            "rgb_missing": sum(1 for a in self.assignments if a.m_rgb == 0),
            "3d_missing": sum(1 for a in self.assignments if a.m_3d == 0),
            "complete": sum(1 for a in self.assignments if a.complete),
        }

    def to_config(self) -> dict[str, Any]:
        return {
            "missing_type": self.missing_type.value,
            "eta": self.eta,
            "seed": self.seed,
            "level": self.level.value,
        }

    @classmethod
    def from_config(cls, config: dict[str, Any], n: int) -> "MissingSchedule":
        return sample_missing_schedule(
            n,
            MissingType(config["missing_type"]),
            float(config["eta"]),
            int(config["seed"]),
            MissingLevel(config["level"]),
        )


def sample_missing_schedule(
    n: int,
    missing_type: MissingType | str,
    eta: float,
    seed: int,
    level: MissingLevel | str = MissingLevel.INPUT,
) -> MissingSchedule:
    """
    Assigns availability indicators to n samples with exact missing counts.

    A seeded permutation picks round(eta * n) samples missing the named modality;
    for "both", two disjoint sets of round(eta * n / 2) samples miss RGB and 3D
    respectively.

    Args:
        n (int): Number of samples.
        missing_type (MissingType | str): rgb, 3d, both or none.
        eta (float): Missing rate in [0, 1].
        seed (int): Seed of the permutation.
        level (MissingLevel | str, optional): Where the mask is applied.

    Returns:
        MissingSchedule: The immutable schedule.

    Raises:
        ValueError: If eta is outside [0, 1] or n < 1.
    """
    missing_type = MissingType(missing_type)
    level = MissingLevel(level)
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"Missing rate eta must be in [0, 1], got {eta}")
    if n < 1:
        raise ValueError(f"Schedule needs at least one sample, got n={n}")

    order = np.random.default_rng(seed).permutation(n)
    rgb_missing = np.zeros(n, dtype=bool)
    depth_missing = np.zeros(n, dtype=bool)
    if missing_type is MissingType.RGB:
        rgb_missing[order[: round_half_up(eta * n)]] = True
    elif missing_type is MissingType.THREE_D:
        depth_missing[order[: round_half_up(eta * n)]] = True
    elif missing_type is MissingType.BOTH:
        k = min(round_half_up(eta * n / 2), n // 2)
        rgb_missing[order[:k]] = True
        depth_missing[order[k : 2 * k]] = True

    assignments = tuple(
        indicator_for(bool(r), bool(d)) for r, d in zip(rgb_missing, depth_missing)
    )
    return MissingSchedule(missing_type, eta, seed, level, assignments)


def complete_schedule(n: int, seed: int = 0) -> MissingSchedule:
    """Schedule with every modality present."""
    return sample_missing_schedule(n, MissingType.NONE, 0.0, seed)


@dataclass(frozen=True)
class MaskedPair:
    """The masked input pair X~ = <D^rgb * M^rgb, D^3D * M^3D>."""

    rgb: np.ndarray
    depth: np.ndarray
    indicator: ModalityIndicator


def apply_input_missing(sample: PairedSample, ind: ModalityIndicator) -> MaskedPair:
    """
    Applies input-level missing: the missing channel becomes an all-zero dummy input.

    Args:
        sample (PairedSample): The complete sample.
        ind (ModalityIndicator): Availability of the sample's modalities.

    Returns:
        MaskedPair: The elementwise-masked images; present channels are untouched.

    Raises:
        ValueError: If the RGB and depth spatial shapes disagree.
    """
    if sample.rgb.shape[:2] != sample.depth.shape[:2]:
        raise ValueError(
            f"sample {sample.id}: rgb {sample.rgb.shape} and depth {sample.depth.shape} disagree"
        )
    rgb = sample.rgb * ind.mask(Modality.RGB, (1, 1, 1)) if not ind.m_rgb else sample.rgb
    depth = (
        sample.depth * ind.mask(Modality.THREE_D, (1, 1, 1)) if not ind.m_3d else sample.depth
    )
    return MaskedPair(rgb=rgb, depth=depth, indicator=ind)


def mask_tensor(
    indicators: ModalityIndicator | Sequence[ModalityIndicator],
    modality: Modality | str,
    like: torch.Tensor,
) -> torch.Tensor:
    """
    Expands availability flags to a mask broadcastable against a batched tensor.

    Args:
        indicators: One indicator for the whole batch, or one per batch row.
        modality (Modality | str): Which flag to read.
        like (torch.Tensor): Tensor whose leading dim is the batch.

    Returns:
        torch.Tensor: Shape (B, 1, ..., 1) in like's dtype.
    """
    if isinstance(indicators, ModalityIndicator):
        indicators = [indicators] * like.shape[0]
    if len(indicators) != like.shape[0]:
        raise ValueError(
            f"Got {len(indicators)} indicators for a batch of {like.shape[0]}"
        )
    flags = torch.tensor(
        [ind.flag(modality) for ind in indicators], dtype=like.dtype, device=like.device
    )
    return flags.view(-1, *([1] * (like.dim() - 1)))


def apply_feature_missing(
    rgb_features: torch.Tensor,
    depth_features: torch.Tensor,
    ind: ModalityIndicator | Sequence[ModalityIndicator],
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Applies feature-level ("pseudo") missing: F~^m = F^m * M^m.

    The features are extracted from the complete input; the mask is broadcast
    over every feature axis. Masking is idempotent.

    Args:
        rgb_features (torch.Tensor): Batched RGB feature maps (B, ...).
        depth_features (torch.Tensor): Batched 3D feature maps (B, ...).
        ind: One indicator for the whole batch, or one per batch row.

    Returns:
        tuple[torch.Tensor, torch.Tensor]: The masked RGB and 3D features.

    Raises:
        ValueError: If the two feature maps differ in shape or batch size
                    disagrees with the indicators.
    """
    if rgb_features.shape != depth_features.shape:
        raise ValueError(
            f"Feature shapes disagree: rgb {tuple(rgb_features.shape)} "
            f"vs 3d {tuple(depth_features.shape)}"
        )
    return (
        rgb_features * mask_tensor(ind, Modality.RGB, rgb_features),
        depth_features * mask_tensor(ind, Modality.THREE_D, depth_features),
    )
