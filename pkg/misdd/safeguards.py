from collections.abc import Sequence
import numpy as np
import torch

# Tolerance on the Euclidean norm of vectors that must lie on the unit sphere.
UNIT_NORM_TOLERANCE: float = 1e-4

ArrayLike = np.ndarray | torch.Tensor


def _as_numpy(value: ArrayLike) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def require_finite(value: ArrayLike, name: str) -> None:
    """
    Checks that every entry of an array or tensor is finite.

    Args:
        value (ArrayLike): The values to check.
        name (str): Name used in the error message.

    Raises:
        ValueError: If any entry is NaN or infinite.
    """
    if isinstance(value, torch.Tensor):
        ok = bool(torch.isfinite(value.detach()).all())
    else:
        ok = bool(np.isfinite(np.asarray(value)).all())
    if not ok:
        raise ValueError(f"{name} contains non-finite values")


def require_unit_norm(
    value: ArrayLike, name: str, tolerance: float = UNIT_NORM_TOLERANCE
) -> None:
    """
    Checks that every vector along the last axis has unit Euclidean norm.

    Args:
        value (ArrayLike): A vector or a stack of vectors.
        name (str): Name used in the error message.
        tolerance (float, optional): Allowed deviation of the norm from 1.

    Raises:
        ValueError: If a vector's norm deviates from 1 by more than the tolerance.
    """
    norms = np.linalg.norm(_as_numpy(value).astype(np.float64), axis=-1)
    if norms.size and float(np.max(np.abs(norms - 1.0))) > tolerance:
        raise ValueError(
            f"{name} must be unit-norm (max deviation {float(np.max(np.abs(norms - 1.0))):.3g})"
        )


def require_unit_interval(value: ArrayLike | float, name: str) -> None:
    """
    Checks that every entry lies in the closed interval [0, 1].

    Args:
        value (ArrayLike | float): The values to check.
        name (str): Name used in the error message.

    Raises:
        ValueError: If an entry is outside [0, 1] or not finite.
    """
    array = _as_numpy(value)  # type: ignore[arg-type]
    if not np.isfinite(array).all():
        raise ValueError(f"{name} must lie in [0, 1]")
    if array.size and (array.min() < 0.0 or array.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")


def require_same_shape(
    shapes: Sequence[tuple[int, ...]], names: Sequence[str]
) -> None:
    """
    Checks that a group of arrays share one shape.

    Args:
        shapes (Sequence[tuple[int, ...]]): The shapes to compare.
        names (Sequence[str]): Names used in the error message.

    Raises:
        ValueError: If the shapes differ.
    """
    if len(set(tuple(s) for s in shapes)) > 1:
        described = ", ".join(f"{n}={tuple(s)}" for n, s in zip(names, shapes))
        raise ValueError(f"Shape mismatch: {described}")
