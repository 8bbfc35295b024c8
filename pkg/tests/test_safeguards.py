#!/usr/bin/env python3
"""
Unit tests for the safeguards module.
"""
import numpy as np
import pytest
import torch
from misdd.safeguards import (
    require_finite,
    require_same_shape,
    require_unit_interval,
    require_unit_norm,
)


class TestRequireFinite:
    """Test cases for require_finite."""

    def test_finite_array_passes(self):
        """Test that finite numpy and torch values pass."""
        require_finite(np.zeros((2, 2)), "x")
        require_finite(torch.ones(3), "x")

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        """Test that NaN and infinities are rejected with the value's name."""
        with pytest.raises(ValueError, match="features"):
            require_finite(np.array([0.0, bad]), "features")

    def test_non_finite_tensor_rejected(self):
        """Test that a NaN inside a tensor is rejected."""
        with pytest.raises(ValueError):
            require_finite(torch.tensor([1.0, float("nan")]), "t")


class TestRequireUnitNorm:
    """Test cases for require_unit_norm."""

    def test_unit_rows_pass(self):
        """Test that normalised rows pass."""
        rows = torch.nn.functional.normalize(torch.randn(5, 8), dim=-1)
        require_unit_norm(rows, "rows")

    def test_non_unit_rejected(self):
        """Test that a row of norm 2 is rejected."""
        with pytest.raises(ValueError, match="unit-norm"):
            require_unit_norm(np.array([[2.0, 0.0]]), "rows")

    def test_tolerance(self):
        """Test that deviations inside the tolerance pass."""
        require_unit_norm(np.array([1.0 + 5e-5, 0.0]), "v")
        with pytest.raises(ValueError):
            require_unit_norm(np.array([1.0 + 5e-4, 0.0]), "v")


class TestRequireUnitInterval:
    """Test cases for require_unit_interval."""

    def test_bounds_inclusive(self):
        """Test that 0 and 1 are accepted."""
        require_unit_interval(np.array([0.0, 0.5, 1.0]), "map")
        require_unit_interval(1.0, "score")

    @pytest.mark.parametrize("bad", [-1e-9, 1.0 + 1e-9, np.nan])
    def test_outside_rejected(self, bad):
        """Test that values outside [0, 1] or NaN are rejected."""
        with pytest.raises(ValueError, match="score"):
            require_unit_interval(np.array([bad]), "score")


class TestRequireSameShape:
    """Test cases for require_same_shape."""

    def test_same_shape_passes(self):
        """Test that equal shapes pass."""
        require_same_shape([(2, 3), (2, 3)], ["a", "b"])

    def test_mismatch_names_both(self):
        """Test that a mismatch names every operand."""
        with pytest.raises(ValueError, match=r"a=\(2, 3\), b=\(3, 2\)"):
            require_same_shape([(2, 3), (3, 2)], ["a", "b"])
