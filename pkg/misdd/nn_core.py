from .safeguards import require_finite
from .tensor_io import TensorRecord
from collections.abc import Callable, Iterable, Iterator
from contextlib import contextmanager
import math
import numpy as np
import torch
import torch.nn as nn

# Above this many trainable entries the finite-difference check samples a subset.
FD_MAX_ENTRIES: int = 10_000
# Gradient magnitude below which finite-difference errors are judged absolutely.
FD_GRADIENT_FLOOR: float = 1e-8


@contextmanager
def seeded(seed: int) -> Iterator[None]:
    """
    Runs the body with torch's global generator seeded, restoring it afterwards.

    Module construction uses the global generator for weight init, so building
    under this context makes the weights a pure function of the seed.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed % (2**63))
        yield


def stable_softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax with the row maximum subtracted before exponentiation."""
    shifted = logits - logits.amax(dim=dim, keepdim=True).detach()
    weights = torch.exp(shifted)
    return weights / weights.sum(dim=dim, keepdim=True)


def consistent_attention(
    v: torch.Tensor, heads: int, return_weights: bool = False
) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
    """
    Multi-head consistent self-attention on already projected tokens.

    Per head, softmax(V V^T / sqrt(d_k)) V with d_k = d / heads; the head outputs
    are concatenated back to width d. V plays the query, key and value roles.

    Args:
        v (torch.Tensor): Tokens of shape (..., n, d).
        heads (int): Number of heads; must divide d.
        return_weights (bool, optional): Also return the (..., heads, n, n) attention.

    Returns:
        torch.Tensor: Tokens of shape (..., n, d), optionally with the weights.

    Raises:
        ValueError: If d is not divisible by heads or the input is not finite.
    """
    d = v.shape[-1]
    if heads < 1 or d % heads:
        raise ValueError(f"Width {d} is not divisible by {heads} heads")
    require_finite(v, "attention input")
    d_k = d // heads
    split = v.reshape(*v.shape[:-1], heads, d_k).transpose(-2, -3)
    weights = stable_softmax(split @ split.transpose(-1, -2) / math.sqrt(d_k))
    out = (weights @ split).transpose(-2, -3).reshape(v.shape)
    if return_weights:
        return out, weights
    return out


class ConsistentSelfAttention(nn.Module):
    """
    Self-attention over V V^T similarities with one projection W^h per head.

    A single d x d linear map holds the stacked per-head projections; the head
    outputs are concatenated and sent through an output projection.
    """

    def __init__(self, width: int, heads: int):
        super().__init__()
        if heads < 1 or width % heads:
            raise ValueError(f"Width {width} is not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.value = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(consistent_attention(self.value(x), self.heads))


class MLP(nn.Module):
    def __init__(self, width: int, ratio: int = 4):
        super().__init__()
        self.fc = nn.Linear(width, width * ratio)
        self.act = nn.GELU()
        self.proj = nn.Linear(width * ratio, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.act(self.fc(x)))


class ResidualAttentionBlock(nn.Module):
    """Pre-norm transformer block: consistent self-attention then MLP, both residual."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = ConsistentSelfAttention(width, heads)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = MLP(width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x))
        return x + self.mlp(self.ln_2(x))


def freeze(module: nn.Module) -> nn.Module:
    """Marks every parameter of the module non-trainable and returns it."""
    for param in module.parameters():
        param.requires_grad_(False)
    return module


def count_parameters(module: nn.Module, trainable: bool | None = None) -> int:
    """
    Counts parameter entries.

    Args:
        module (nn.Module): The module to inspect.
        trainable (bool | None, optional): Count only trainable (True) or only
            frozen (False) entries; None counts all.

    Returns:
        int: Number of scalar entries.
    """
    return sum(
        p.numel()
        for p in module.parameters()
        if trainable is None or p.requires_grad == trainable
    )


def module_records(module: nn.Module, prefix: str) -> list[TensorRecord]:
    """
    Flattens a module's parameters into checkpoint records named "<prefix>/<name>".

    Args:
        module (nn.Module): The module to export.
        prefix (str): Name prefix of the records.

    Returns:
        list[TensorRecord]: One record per parameter, in registration order.
    """
    return [
        TensorRecord(
            f"{prefix}/{name}",
            param.detach().cpu().numpy().copy(),
            trainable=param.requires_grad,
        )
        for name, param in module.named_parameters()
    ]


def load_module_records(
    module: nn.Module, records: Iterable[TensorRecord], prefix: str
) -> None:
    """
    Restores parameter values and trainable flags written by module_records.

    Args:
        module (nn.Module): The module to fill; its architecture must match.
        records (Iterable[TensorRecord]): Records of a checkpoint.
        prefix (str): Name prefix the module was saved under.

    Raises:
        ValueError: If a parameter is missing from the records or a shape differs.
    """
    by_name = {
        r.name[len(prefix) + 1 :]: r for r in records if r.name.startswith(prefix + "/")
    }
    for name, param in module.named_parameters():
        record = by_name.get(name)
        if record is None:
            raise ValueError(f"Checkpoint has no tensor '{prefix}/{name}'")
        if tuple(record.array.shape) != tuple(param.shape):
            raise ValueError(
                f"Checkpoint tensor '{prefix}/{name}' has shape {record.array.shape}, "
                f"model expects {tuple(param.shape)}"
            )
        with torch.no_grad():
            param.copy_(torch.from_numpy(np.ascontiguousarray(record.array)))
        param.requires_grad_(record.trainable)


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    epsilon: float = 1e-6,
    max_entries: int = FD_MAX_ENTRIES,
    seed: int = 0,
) -> float:
    """
    Compares autograd gradients with central finite differences.

    Args:
        loss_fn (Callable[[], torch.Tensor]): Deterministic scalar loss closure.
        params (Iterable[torch.Tensor]): Candidate parameters; frozen ones are skipped.
        epsilon (float, optional): Step size in [1e-6, 1e-3].
        max_entries (int, optional): Above this many entries a seeded subset is checked.
        seed (int, optional): Seed of the subset.

    Returns:
        float: max |analytic - numeric| / max(|analytic|, |numeric|, FD_GRADIENT_FLOOR).

    Raises:
        ValueError: If epsilon is out of range, a parameter is not float64, or
                    there is nothing to check.
        RuntimeError: If two evaluations of loss_fn disagree.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in [1e-6, 1e-3], got {epsilon}")
    checked = [p for p in params if p.requires_grad]
    if not checked:
        raise ValueError("No trainable parameters to check")
    for p in checked:
        if p.dtype != torch.float64:
            raise ValueError("Finite-difference checks need float64 parameters")

    for p in checked:
        p.grad = None
    loss = loss_fn()
    if loss.numel() != 1:
        raise ValueError("loss_fn must return a scalar")
    loss.backward()
    analytic = [
        p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        for p in checked
    ]
    with torch.no_grad():
        if loss_fn().item() != loss.item():
            raise RuntimeError("loss_fn is not deterministic: two evaluations differ")

    entries = [(i, j) for i, p in enumerate(checked) for j in range(p.numel())]
    if len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        picks = np.sort(rng.choice(len(entries), size=max_entries, replace=False))
        entries = [entries[k] for k in picks]

    worst = 0.0
    with torch.no_grad():
        for i, j in entries:
            flat = checked[i].view(-1)
            original = flat[j].item()
            flat[j] = original + epsilon
            upper = loss_fn().item()
            flat[j] = original - epsilon
            lower = loss_fn().item()
            flat[j] = original
            numeric = (upper - lower) / (2 * epsilon)
            exact = analytic[i].view(-1)[j].item()
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), FD_GRADIENT_FLOOR)
            worst = max(worst, error)
    return worst
