from .nn_core import consistent_attention, seeded
from .safeguards import require_finite
from dataclasses import asdict, dataclass
from typing import Any, NamedTuple
import torch
import torch.nn as nn
import torch.nn.functional as F

BRANCHES: tuple[str, ...] = ("rgb", "3d")
PROMPT_INIT_STD: float = 0.02


@dataclass(frozen=True)
class PromptConfig:
    """Lengths, depth and ablation switches of the cross-modal prompts."""

    l_ccp: int = 8
    l_msp: int = 8
    l_map: int = 8
    prompt_depth: int = 6
    width: int = 64
    heads: int = 4
    use_ccp: bool = True
    use_msp: bool = True
    use_map: bool = True

    @property
    def enabled(self) -> bool:
        return self.use_ccp or self.use_msp or self.use_map

    @property
    def extra_tokens(self) -> int:
        """Tokens prepended at every injection site."""
        return (
            self.l_ccp * self.use_ccp
            + self.l_msp * self.use_msp
            + self.l_map * self.use_map
        )

    def validate(self) -> None:
        for name in ("l_ccp", "l_msp", "l_map"):
            if getattr(self, name) < 1:
                raise ValueError(f"PromptConfig.{name} must be >= 1")
        if self.prompt_depth < 1:
            raise ValueError("PromptConfig.prompt_depth must be >= 1")
        if self.width < 1 or self.heads < 1 or self.width % self.heads:
            raise ValueError("PromptConfig.width must be a positive multiple of heads")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PromptConfig":
        return cls(**data)


class InjectedSequence(NamedTuple):
    tokens: torch.Tensor
    n_prompt: int
    map_refined: torch.Tensor | None


def _batched(prompt: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if prompt.dim() == like.dim():
        return prompt
    return prompt.unsqueeze(0).expand(like.shape[0], -1, -1)


def refine(attention: nn.Module, prompt: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """
    Refines a prompt against visual tokens with one attention pass.

    The attention runs over the stack [prompt ; tokens]; the first l rows of the
    result are the refined prompt.
    """
    prompt = _batched(prompt, tokens)
    l = prompt.shape[-2]
    return attention(torch.cat([prompt, tokens], dim=-2))[..., :l, :]


def generate_msp(
    x: torch.Tensor, msp_weights: nn.Linear, heads: int, length: int
) -> torch.Tensor:
    """
    Generates the modality-specific prompt from a branch's embedded input.

    Each head attends over W^h X with consistent self-attention; the heads are
    concatenated and the n token rows mean-pooled down to `length` rows over
    equal contiguous strides.

    Args:
        x (torch.Tensor): Embedded input tokens, (n, d) or (B, n, d).
        msp_weights (nn.Linear): The stacked head projections W^h.
        heads (int): Number of heads.
        length (int): Number of prompt rows l_msp.

    Returns:
        torch.Tensor: The prompt, (length, d) or (B, length, d).

    Raises:
        ValueError: If x is not finite or has no tokens.
    """
    require_finite(x, "MSP input")
    if x.shape[-2] == 0:
        raise ValueError("MSP input has no tokens")
    attended = consistent_attention(msp_weights(x), heads)
    pooled = F.adaptive_avg_pool1d(attended.transpose(-1, -2), length)
    return pooled.transpose(-1, -2)


def update_map(
    p3_layer: torch.Tensor,
    x: torch.Tensor,
    layer_idx: int,
    attention: nn.Module,
    prompt_depth: int,
) -> torch.Tensor:
    """
    Refines one layer's missing-aware prompt by attention over [P3 ; X].

    The result is the layer's effective MAP and is carried into the next
    layer's MAP slot.

    Args:
        p3_layer (torch.Tensor): The layer's MAP input, (l, d) or (B, l, d).
        x (torch.Tensor): The layer's visual tokens, (n, d) or (B, n, d); n may be 0.
        layer_idx (int): Index of the block.
        attention (nn.Module): The block's attention.
        prompt_depth (int): Number of injected layers.

    Returns:
        torch.Tensor: The refined MAP with p3_layer's row count.

    Raises:
        ValueError: If the layer is not an injection site or the widths differ.
    """
    if not 0 <= layer_idx < prompt_depth:
        raise ValueError(f"Layer {layer_idx} is outside the prompt depth {prompt_depth}")
    if p3_layer.shape[-1] != x.shape[-1]:
        raise ValueError(
            f"MAP width {p3_layer.shape[-1]} differs from token width {x.shape[-1]}"
        )
    return refine(attention, p3_layer, x)


def inject(
    layer_tokens: torch.Tensor,
    ccp: torch.Tensor | None,
    msp: torch.Tensor | None,
    map_layer: torch.Tensor | None,
    attention: nn.Module,
    layer_idx: int,
    prompt_depth: int,
) -> InjectedSequence:
    """
    Refines the three prompts against a layer's tokens and prepends them.

    Args:
        layer_tokens (torch.Tensor): The layer's tokens, (B, n, d).
        ccp (torch.Tensor | None): The shared consistency prompt.
        msp (torch.Tensor | None): The branch's modality-specific prompt.
        map_layer (torch.Tensor | None): The layer's missing-aware prompt input.
        attention (nn.Module): The block's attention.
        layer_idx (int): Index of the block.
        prompt_depth (int): Number of injected layers.

    Returns:
        InjectedSequence: [ccp'; msp'; map'; tokens], the prompt row count and
        the refined MAP (None without MAP).

    Raises:
        ValueError: If the layer is not an injection site.
    """
    if not 0 <= layer_idx < prompt_depth:
        raise ValueError(f"Layer {layer_idx} is not an injection site (depth {prompt_depth})")
    parts = []
    if ccp is not None and ccp.shape[-2]:
        parts.append(refine(attention, ccp, layer_tokens))
    if msp is not None and msp.shape[-2]:
        parts.append(refine(attention, msp, layer_tokens))
    map_refined = None
    if map_layer is not None and map_layer.shape[-2]:
        map_refined = update_map(
            _batched(map_layer, layer_tokens), layer_tokens, layer_idx, attention, prompt_depth
        )
        parts.append(map_refined)
    if not parts:
        return InjectedSequence(layer_tokens, 0, None)
    n_prompt = sum(p.shape[-2] for p in parts)
    return InjectedSequence(torch.cat(parts + [layer_tokens], dim=-2), n_prompt, map_refined)


class PromptBundle(nn.Module):
    """
    CCP, MSP head projections and per-branch, per-layer MAP.

    The CCP is one parameter serving both branches; MSP projections and MAP
    matrices are separate per branch. Disabled prompts are not created.
    """

    def __init__(self, config: PromptConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.width
        self.ccp = (
            nn.Parameter(torch.randn(config.l_ccp, d) * PROMPT_INIT_STD)
            if config.use_ccp
            else None
        )
        self.msp = (
            nn.ModuleDict({b: nn.Linear(d, d) for b in BRANCHES}) if config.use_msp else None
        )
        self.map = (
            nn.ModuleDict(
                {
                    b: nn.ParameterList(
                        nn.Parameter(torch.randn(config.l_map, d) * PROMPT_INIT_STD)
                        for _ in range(config.prompt_depth)
                    )
                    for b in BRANCHES
                }
            )
            if config.use_map
            else None
        )

    @property
    def prompt_depth(self) -> int:
        return self.config.prompt_depth

    def check_encoder(self, width: int, depth: int) -> None:
        """
        Raises:
            ValueError: If the bundle does not fit an encoder of this width and depth.
        """
        if width != self.config.width:
            raise ValueError(f"Prompt width {self.config.width} != encoder width {width}")
        if self.config.prompt_depth > depth:
            raise ValueError(
                f"Prompt depth {self.config.prompt_depth} exceeds encoder depth {depth}"
            )

    def modality_prompt(self, branch: str, x: torch.Tensor) -> torch.Tensor | None:
        """The branch's MSP from its embedded input, or None when disabled."""
        if self.msp is None:
            return None
        return generate_msp(x, self.msp[branch], self.config.heads, self.config.l_msp)

    def extend(
        self,
        branch: str,
        attention: nn.Module,
        x: torch.Tensor,
        layer_idx: int,
        msp: torch.Tensor | None,
        carry: torch.Tensor | None,
    ) -> InjectedSequence:
        """
        Builds the extended sequence of one injected layer.

        The MAP input of layer j is P3_j plus the refined MAP of layer j-1.
        """
        map_layer = None
        if self.map is not None:
            map_layer = self.map[branch][layer_idx]
            if carry is not None:
                map_layer = map_layer + carry
        return inject(
            x, self.ccp, msp, map_layer, attention, layer_idx, self.config.prompt_depth
        )

    def groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameters per prompt kind, for accounting."""
        return {
            "ccp": [self.ccp] if self.ccp is not None else [],
            "msp": list(self.msp.parameters()) if self.msp is not None else [],
            "map": list(self.map.parameters()) if self.map is not None else [],
        }


def init_prompts(config: PromptConfig, seed: int) -> PromptBundle:
    """
    Creates a prompt bundle whose values are a pure function of the seed.

    CCP and MAP entries are drawn from N(0, 0.02^2); MSP projections use the
    default linear-layer initialisation.

    Args:
        config (PromptConfig): Prompt lengths, depth and switches.
        seed (int): Initialisation seed.

    Returns:
        PromptBundle: The trainable bundle.
    """
    with seeded(seed):
        return PromptBundle(config)
