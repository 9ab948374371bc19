"""Tests for aptdiff.tinynet."""

import pytest
import torch

from aptdiff.tinynet import LoRALinear, NetConfig, TinyUNet, build_net, tap_id, timestep_embedding

from .conftest import TINY_NET


def _inputs(config, batch=2, seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, config.in_channels, config.image_size, config.image_size, generator=gen)
    tokens = torch.randn(batch, 5, config.token_dim, generator=gen)
    return x, torch.tensor([3, 11][:batch]), tokens


# ---------------------------------------------------------------------------
# NetConfig
# ---------------------------------------------------------------------------


class TestNetConfig:
    def test_defaults_valid(self):
        cfg = NetConfig()
        assert cfg.tap_ids() == ("up.2.0", "up.1.0")
        assert cfg.resolution(1) == 16

    def test_lists_become_tuples(self):
        cfg = NetConfig.from_dict({**TINY_NET.to_dict()})
        assert cfg == TINY_NET
        assert isinstance(cfg.channel_multipliers, tuple)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="Unknown NetConfig keys"):
            NetConfig.from_dict({"depth": 3})

    def test_tap_without_attention(self):
        with pytest.raises(ValueError, match="Tap level"):
            NetConfig(attention_levels=(2,), tap_levels=(1,))

    def test_default_taps_sit_on_finest_attention_levels(self):
        cfg = NetConfig()
        assert cfg.tap_levels == (1, 2)
        assert set(cfg.tap_levels) <= set(cfg.attention_levels)
        assert [cfg.resolution(level) for level in cfg.tap_levels] == [16, 8]

    def test_full_resolution_tap_needs_attention(self):
        with pytest.raises(ValueError, match="no attention block"):
            NetConfig(tap_levels=(0, 1))
        cfg = NetConfig(attention_levels=(0, 1, 2), tap_levels=(0, 1))
        assert cfg.tap_ids() == ("up.1.0", "up.0.0")
        assert cfg.resolution(0) == 32

    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="num_heads"):
            NetConfig(num_heads=7)

    def test_image_size_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            NetConfig(image_size=30)


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------


class TestLoRALinear:
    def test_fresh_adapter_is_noop(self):
        layer = LoRALinear(6, 4)
        layer.attach(3, generator=torch.Generator().manual_seed(0))
        x = torch.randn(5, 6)
        assert torch.equal(layer(x, adapters_on=True), layer(x, adapters_on=False))

    def test_parameter_count(self):
        layer = LoRALinear(10, 7)
        layer.attach(32)
        assert sum(p.numel() for p in layer.adapter_parameters()) == 32 * (10 + 7)

    def test_rank_zero_has_no_params(self):
        layer = LoRALinear(4, 4)
        layer.attach(0)
        assert layer.adapter_parameters() == []

    def test_negative_rank(self):
        with pytest.raises(ValueError, match="rank"):
            LoRALinear(4, 4).attach(-1)

    def test_scale_interpolates(self):
        torch.manual_seed(0)
        layer = LoRALinear(4, 3)
        layer.attach(2, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            layer.lora_up.normal_()
        x = torch.randn(2, 4)
        layer.scale = 0.0
        y0 = layer(x, adapters_on=True)
        layer.scale = 1.0
        y1 = layer(x, adapters_on=True)
        layer.scale = 0.5
        y_half = layer(x, adapters_on=True)
        assert torch.allclose(y_half, 0.5 * (y0 + y1), atol=1e-6)
        assert torch.equal(y0, layer(x, adapters_on=False))


# ---------------------------------------------------------------------------
# TinyUNet
# ---------------------------------------------------------------------------


class TestTinyUNet:
    def test_output_shape(self):
        net = build_net(TINY_NET)
        x, t, tokens = _inputs(TINY_NET)
        eps, taps = net(x, t, tokens)
        assert eps.shape == x.shape
        assert taps is None

    def test_frozen_path_deterministic(self):
        net = build_net(TINY_NET)
        x, t, tokens = _inputs(TINY_NET)
        a, _ = net(x, t, tokens)
        b, _ = net(x, t, tokens)
        assert torch.equal(a, b)

    def test_build_is_seeded(self):
        a = build_net(TINY_NET, seed=3).state_dict()
        b = build_net(TINY_NET, seed=3).state_dict()
        c = build_net(TINY_NET, seed=4).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
        assert not all(torch.equal(a[k], c[k]) for k in a)

    def test_zero_init_adapters_match_prior(self):
        net = build_net(TINY_NET)
        net.attach_adapters(4, seed=0)
        x, t, tokens = _inputs(TINY_NET)
        on, _ = net(x, t, tokens, adapters_on=True)
        off, _ = net(x, t, tokens, adapters_on=False)
        assert torch.equal(on, off)

    def test_taps(self):
        net = build_net(TINY_NET)
        x, t, tokens = _inputs(TINY_NET)
        _, taps = net(x, t, tokens, capture_taps=True)
        assert set(taps.features) == {tap_id(0, 0), tap_id(1, 0)}
        assert taps.ids() == tuple(sorted(TINY_NET.tap_ids()))
        for key, attn in taps.attentions.items():
            level = int(key.split(".")[1])
            side = TINY_NET.resolution(level)
            assert attn.shape == (2, TINY_NET.num_heads, side * side, 5)
            assert torch.allclose(attn.sum(dim=-1), torch.ones(attn.shape[:-1]), atol=1e-5)
            assert taps.features[key].shape == (2, TINY_NET.channels(level), side, side)

    def test_adapter_params_exclude_base(self):
        net = build_net(TINY_NET)
        assert net.adapter_params() == []
        net.attach_adapters(2)
        adapter_ids = {id(p) for p in net.adapter_params()}
        assert adapter_ids
        expected = sum(
            2 * (layer.in_features + layer.out_features) for _, layer in net.lora_layers()
        )
        assert sum(p.numel() for p in net.adapter_params()) == expected
        assert not any(".lora_" in k for k in net.base_state_dict())
        assert all(".lora_" in k for k in net.adapter_state_dict())

    def test_freeze_base(self):
        net = build_net(TINY_NET)
        net.attach_adapters(2)
        net.freeze_base()
        trainable = [p for p in net.parameters() if p.requires_grad]
        assert {id(p) for p in trainable} == {id(p) for p in net.adapter_params()}

    def test_adapter_scale_zero_equals_prior(self):
        net = build_net(TINY_NET)
        net.attach_adapters(2)
        with torch.no_grad():
            for p in net.adapter_params():
                p.normal_(std=0.1)
        x, t, tokens = _inputs(TINY_NET)
        off, _ = net(x, t, tokens, adapters_on=False)
        on, _ = net(x, t, tokens, adapters_on=True)
        assert not torch.equal(on, off)
        net.set_adapter_scale(0.0)
        zero, _ = net(x, t, tokens, adapters_on=True)
        assert torch.equal(zero, off)

    def test_adapter_scale_range(self):
        with pytest.raises(ValueError, match="scale"):
            build_net(TINY_NET).set_adapter_scale(1.5)

    def test_scalar_timestep(self):
        net = build_net(TINY_NET)
        x, _, tokens = _inputs(TINY_NET)
        a, _ = net(x, 7, tokens)
        b, _ = net(x, torch.tensor([7, 7]), tokens)
        assert torch.allclose(a, b)

    @pytest.mark.parametrize(
        "tokens_shape",
        [(2, 0, 8), (3, 4, 8), (2, 4, 5), (2, 13, 8)],
    )
    def test_bad_tokens(self, tokens_shape):
        net = build_net(TINY_NET)
        x, t, _ = _inputs(TINY_NET)
        with pytest.raises(ValueError):
            net(x, t, torch.zeros(tokens_shape))

    def test_bad_image_shape(self):
        net = build_net(TINY_NET)
        _, t, tokens = _inputs(TINY_NET)
        with pytest.raises(ValueError, match="x_t must have shape"):
            net(torch.zeros(2, 3, 8, 8), t, tokens)

    def test_is_module(self):
        assert isinstance(build_net(TINY_NET), TinyUNet)


def test_timestep_embedding_shape():
    emb = timestep_embedding(torch.tensor([0, 5, 9]), 7)
    assert emb.shape == (3, 7)
    assert torch.allclose(emb[0, :3], torch.ones(3))
