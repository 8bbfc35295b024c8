#!/usr/bin/env python3
"""
Unit tests for the tools module.
"""
import pytest
from misdd.tools import (
    SEED_ENV_VAR,
    atomic_write_text,
    derive_seed,
    parse_float_list,
    parse_int_list,
    parse_proportions,
    publish_directory,
    resolve_seed,
    round_half_up,
)


class TestDeriveSeed:
    """Test cases for derive_seed."""

    def test_deterministic(self):
        """Test that the same keys give the same seed."""
        assert derive_seed(7, "train", 3) == derive_seed(7, "train", 3)

    def test_keys_separate_streams(self):
        """Test that different keys or base seeds give different seeds."""
        seeds = {derive_seed(7, "train"), derive_seed(7, "test"), derive_seed(8, "train")}
        assert len(seeds) == 3

    def test_range(self):
        """Test that derived seeds fit in 63 bits."""
        for key in range(50):
            assert 0 <= derive_seed(0, key) < 2**63


class TestResolveSeed:
    """Test cases for resolve_seed."""

    def test_flag_wins(self, monkeypatch):
        """Test that an explicit flag overrides the environment."""
        monkeypatch.setenv(SEED_ENV_VAR, "11")
        assert resolve_seed(3) == 3

    def test_environment_fallback(self, monkeypatch):
        """Test that MISDD_SEED is used when no flag is given."""
        monkeypatch.setenv(SEED_ENV_VAR, "11")
        assert resolve_seed(None) == 11

    def test_default_zero(self, monkeypatch):
        """Test the default seed without flag or environment."""
        monkeypatch.delenv(SEED_ENV_VAR, raising=False)
        assert resolve_seed(None) == 0

    def test_invalid_environment(self, monkeypatch):
        """Test that a non-integer MISDD_SEED is rejected."""
        monkeypatch.setenv(SEED_ENV_VAR, "seven")
        with pytest.raises(ValueError, match=SEED_ENV_VAR):
            resolve_seed(None)


class TestRoundHalfUp:
    """Test cases for round_half_up."""

    @pytest.mark.parametrize(
        "value, expected",
        [(0.5, 1), (1.5, 2), (2.5, 3), (2.4999, 2), (0.7 * 1000, 700), (0.3 * 1000 / 2, 150)],
    )
    def test_values(self, value, expected):
        """Test halves round up and representation error is absorbed."""
        assert round_half_up(value) == expected


class TestParsers:
    """Test cases for the list and proportion parsers."""

    def test_parse_int_list(self):
        """Test parsing a comma-separated integer list."""
        assert parse_int_list("1, 2,4") == [1, 2, 4]

    def test_parse_float_list(self):
        """Test parsing a comma-separated float list with a trailing comma."""
        assert parse_float_list("0.3,0.5,0.7,") == [0.3, 0.5, 0.7]

    def test_parse_proportions(self):
        """Test parsing a proportion list."""
        result = parse_proportions("rgb_only:0.4, depth_only:.4,combined:0.2")
        assert result == {"rgb_only": 0.4, "depth_only": 0.4, "combined": 0.2}

    def test_parse_proportions_malformed(self):
        """Test that a malformed proportion entry is rejected."""
        with pytest.raises(ValueError, match="Malformed"):
            parse_proportions("rgb_only=0.4")


class TestAtomicWrites:
    """Test cases for the write-then-rename helpers."""

    def test_atomic_write_text(self, tmp_path):
        """Test that the file is written with its parents and no leftovers."""
        target = tmp_path / "sub" / "out.csv"
        atomic_write_text(target, "a,b\n")

        assert target.read_text() == "a,b\n"
        assert [p.name for p in target.parent.iterdir()] == ["out.csv"]

    def test_publish_directory_replaces_target(self, tmp_path):
        """Test that an existing directory is replaced as a whole."""
        target = tmp_path / "run"
        target.mkdir()
        (target / "old.txt").write_text("old")
        staging = tmp_path / ".run.staging"
        staging.mkdir()
        (staging / "new.txt").write_text("new")

        publish_directory(staging, target)

        assert sorted(p.name for p in target.iterdir()) == ["new.txt"]
        assert not staging.exists()
        assert sorted(p.name for p in tmp_path.iterdir()) == ["run"]
