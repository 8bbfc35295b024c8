#!/usr/bin/env python3
"""
Unit tests for the RunContext class.
"""
import time
from misdd.context import RunContext


class TestRunContext:
    """Test cases for the RunContext class."""

    def test_context_creation(self):
        """Test that RunContext can be created with ident, verbose level and seed."""
        ident = {"id": "test123", "cell": "rgb-eta0.5-full-s1"}
        context = RunContext(ident, verbose=2, seed=1)

        assert context.ident == ident
        assert context.verbose == 2
        assert context.seed == 1
        assert context.cell == "rgb-eta0.5-full-s1"
        assert isinstance(context.start_time, float)

    def test_context_defaults(self):
        """Test that RunContext defaults to verbose level 0 and seed 0."""
        context = RunContext({"id": "test123", "cell": "train"})

        assert context.verbose == 0
        assert context.seed == 0

    def test_missing_cell(self):
        """Test that a context without a cell reports "main"."""
        context = RunContext({"id": "test123"})

        assert context.cell == "main"

    def test_child_shares_id(self):
        """Test that a child context keeps the run id and verbosity."""
        parent = RunContext({"id": "abc123", "cell": "grid"}, verbose=1, seed=5)
        child = parent.child("3d-eta0.7-no-scl-s5")

        assert child.ident == {"id": "abc123", "cell": "3d-eta0.7-no-scl-s5"}
        assert child.verbose == 1
        assert child.seed == 5
        assert parent.cell == "grid"

    def test_child_seed_override(self):
        """Test that a child context can carry its own seed."""
        child = RunContext({"id": "abc123", "cell": "grid"}, seed=5).child("cell", seed=9)

        assert child.seed == 9

    def test_get_elapsed_time(self):
        """Test that get_elapsed_time returns the elapsed time."""
        context = RunContext({"id": "test123", "cell": "train"})

        time.sleep(0.01)

        assert context.get_elapsed_time() > 0.01
