#!/usr/bin/env python3
"""
Unit tests for the prompts module.
"""
from dataclasses import replace
import pytest
import torch
import torch.nn as nn
from misdd.nn_core import (
    ConsistentSelfAttention,
    consistent_attention,
    count_parameters,
    seeded,
)
from misdd.prompts import (
    PromptConfig,
    generate_msp,
    init_prompts,
    inject,
    refine,
    update_map,
)


@pytest.fixture
def attention():
    with seeded(0):
        return ConsistentSelfAttention(16, 2)


class TestPromptConfig:
    """Test cases for PromptConfig."""

    def test_extra_tokens(self, tiny_prompt_config):
        """Test the prompt rows prepended per injection site."""
        assert tiny_prompt_config.extra_tokens == 6
        assert replace(tiny_prompt_config, use_msp=False).extra_tokens == 4
        off = replace(tiny_prompt_config, use_ccp=False, use_msp=False, use_map=False)
        assert off.extra_tokens == 0
        assert not off.enabled

    @pytest.mark.parametrize(
        "changes, field",
        [({"l_ccp": 0}, "l_ccp"), ({"prompt_depth": 0}, "prompt_depth"), ({"heads": 3}, "width")],
    )
    def test_invalid_fields(self, tiny_prompt_config, changes, field):
        """Test that an invalid field is named."""
        with pytest.raises(ValueError, match=field):
            replace(tiny_prompt_config, **changes).validate()


class TestPromptBundle:
    """Test cases for init_prompts and the bundle's parameter groups."""

    def test_group_sizes(self, tiny_prompt_config):
        """Test the parameter count of every prompt kind."""
        groups = init_prompts(tiny_prompt_config, seed=0).groups()
        d = tiny_prompt_config.width

        assert sum(p.numel() for p in groups["ccp"]) == tiny_prompt_config.l_ccp * d
        assert sum(p.numel() for p in groups["msp"]) == 2 * (d * d + d)
        assert sum(p.numel() for p in groups["map"]) == 2 * 2 * tiny_prompt_config.l_map * d

    def test_disabled_prompts_not_created(self, tiny_prompt_config):
        """Test that switched-off prompts hold no parameters."""
        bundle = init_prompts(replace(tiny_prompt_config, use_ccp=False, use_map=False), 0)

        assert bundle.ccp is None and bundle.map is None
        assert count_parameters(bundle) == 2 * (16 * 16 + 16)

    def test_seeded(self, tiny_prompt_config):
        """Test that prompt values are a function of the seed."""
        a = init_prompts(tiny_prompt_config, seed=7)
        b = init_prompts(tiny_prompt_config, seed=7)

        assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
        assert a.ccp.std().item() < 0.1

    def test_check_encoder(self, tiny_prompt_config):
        """Test the width and depth checks against an encoder."""
        bundle = init_prompts(tiny_prompt_config, seed=0)
        bundle.check_encoder(16, 3)
        with pytest.raises(ValueError, match="width"):
            bundle.check_encoder(32, 3)
        with pytest.raises(ValueError, match="depth"):
            bundle.check_encoder(16, 1)


class TestGenerateMsp:
    """Test cases for generate_msp."""

    @pytest.mark.parametrize("n", [16, 7, 2])
    def test_shape(self, n):
        """Test that any token count pools down to the prompt length."""
        with seeded(0):
            weights = nn.Linear(16, 16)
        out = generate_msp(torch.randn(3, n, 16), weights, heads=2, length=2)

        assert out.shape == (3, 2, 16)

    def test_mean_pooling(self):
        """Test pooling of an identity projection over equal strides."""
        weights = nn.Linear(2, 2)
        with torch.no_grad():
            weights.weight.copy_(torch.eye(2))
            weights.bias.zero_()
        x = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        out = generate_msp(x, weights, heads=2, length=1)

        attended = consistent_attention(x, heads=2)
        torch.testing.assert_close(out, attended.mean(dim=0, keepdim=True))

    def test_rejects_non_finite(self):
        """Test that a non-finite input is rejected."""
        x = torch.randn(4, 16)
        x[0, 0] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            generate_msp(x, nn.Linear(16, 16), heads=2, length=2)

    def test_rejects_empty(self):
        """Test that an input without tokens is rejected."""
        with pytest.raises(ValueError, match="no tokens"):
            generate_msp(torch.zeros(0, 16), nn.Linear(16, 16), heads=2, length=2)


class TestUpdateMap:
    """Test cases for update_map."""

    def test_keeps_row_count(self, attention):
        """Test that the refined prompt has the input's row count."""
        out = update_map(torch.randn(3, 16), torch.randn(5, 16), 0, attention, prompt_depth=2)
        assert out.shape == (3, 16)

    def test_empty_tokens(self, attention):
        """Test refinement against a layer without visual tokens."""
        p3 = torch.randn(2, 16)
        out = update_map(p3, torch.zeros(0, 16), 1, attention, prompt_depth=2)

        torch.testing.assert_close(out, attention(p3))

    def test_layer_outside_depth(self, attention):
        """Test that only injection sites can be refined."""
        with pytest.raises(ValueError, match="outside"):
            update_map(torch.randn(2, 16), torch.randn(4, 16), 2, attention, prompt_depth=2)

    def test_width_mismatch(self, attention):
        """Test that prompt and tokens must share a width."""
        with pytest.raises(ValueError, match="width"):
            update_map(torch.randn(2, 8), torch.randn(4, 16), 0, attention, prompt_depth=2)


class TestInject:
    """Test cases for inject and the bundle's extend."""

    def test_layout(self, attention):
        """Test the order and count of the prepended rows."""
        tokens = torch.randn(2, 5, 16)
        ccp, msp, p3 = torch.randn(1, 16), torch.randn(2, 2, 16), torch.randn(3, 16)
        out = inject(tokens, ccp, msp, p3, attention, 0, prompt_depth=2)

        assert out.n_prompt == 6
        assert out.tokens.shape == (2, 11, 16)
        torch.testing.assert_close(out.tokens[:, 6:], tokens)
        torch.testing.assert_close(out.tokens[:, :1], refine(attention, ccp, tokens))
        torch.testing.assert_close(out.tokens[:, 3:6], out.map_refined)

    def test_no_prompts(self, attention):
        """Test that without prompts the tokens pass through."""
        tokens = torch.randn(1, 5, 16)
        out = inject(tokens, None, None, None, attention, 0, prompt_depth=1)

        assert out.n_prompt == 0 and out.map_refined is None
        assert out.tokens is tokens

    def test_not_an_injection_site(self, attention):
        """Test that layers past the prompt depth are rejected."""
        with pytest.raises(ValueError, match="injection site"):
            inject(torch.randn(1, 5, 16), None, None, None, attention, 3, prompt_depth=3)

    def test_map_carry(self, tiny_prompt_config, attention):
        """Test that a layer's MAP input adds the previous layer's refined MAP."""
        bundle = init_prompts(replace(tiny_prompt_config, use_msp=False), seed=0)
        tokens = torch.randn(1, 5, 16)
        carry = torch.randn(1, 2, 16)
        out = bundle.extend("rgb", attention, tokens, 1, None, carry)
        expected = update_map(bundle.map["rgb"][1] + carry, tokens, 1, attention, 2)

        torch.testing.assert_close(out.map_refined, expected)
        assert out.n_prompt == 4

    def test_branches_share_ccp(self, tiny_prompt_config, attention):
        """Test that both branches refine the same CCP parameter."""
        bundle = init_prompts(tiny_prompt_config, seed=0)
        tokens = torch.randn(1, 5, 16)
        rgb = bundle.extend("rgb", attention, tokens, 0, None, None)
        depth = bundle.extend("3d", attention, tokens, 0, None, None)

        torch.testing.assert_close(rgb.tokens[:, :2], depth.tokens[:, :2])
        assert not torch.allclose(rgb.map_refined, depth.map_refined)
