"""Miniature conditional U-Net denoiser with toggleable low-rank adapters.

One parameter set serves as both models: with adapters off the network is
the frozen prior, with adapters on it is the fine-tuned model. Up-blocks at
the configured tap levels can report their hidden states and the
post-softmax cross-attention probabilities of every head.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetConfig:
    """Architecture of the toy denoiser.

    Levels are indexed from the input resolution (level 0) downwards; level
    ``l`` works at ``image_size / 2**l`` pixels.
    """

    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    attention_levels: tuple[int, ...] = (1, 2)
    num_heads: int = 2
    token_dim: int = 32
    max_tokens: int = 12
    tap_levels: tuple[int, ...] = (1, 2)

    def __post_init__(self) -> None:
        # JSON round trips hand us lists
        for name in ("channel_multipliers", "attention_levels", "tap_levels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @property
    def num_levels(self) -> int:
        return len(self.channel_multipliers)

    def channels(self, level: int) -> int:
        return self.base_channels * self.channel_multipliers[level]

    def resolution(self, level: int) -> int:
        return self.image_size // (2**level)

    def validate(self) -> None:
        """Raise ValueError if the architecture is inconsistent."""
        if self.num_levels < 1:
            raise ValueError("channel_multipliers must not be empty")
        if self.image_size <= 0 or self.image_size % (2 ** (self.num_levels - 1)):
            raise ValueError(
                f"image_size {self.image_size} must be divisible by "
                f"2^{self.num_levels - 1}"
            )
        if self.in_channels < 1 or self.base_channels < 1 or self.token_dim < 1:
            raise ValueError("Channel and token widths must be positive")
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        for level in self.attention_levels:
            if not 0 <= level < self.num_levels:
                raise ValueError(f"Attention level {level} out of range")
            if self.channels(level) % self.num_heads:
                raise ValueError(
                    f"num_heads {self.num_heads} does not divide "
                    f"{self.channels(level)} channels at level {level}"
                )
        for level in self.tap_levels:
            if level not in self.attention_levels:
                raise ValueError(
                    f"Tap level {level} has no attention block; "
                    f"tap levels must be a subset of {self.attention_levels}"
                )

    def tap_ids(self) -> tuple[str, ...]:
        """Tap identifiers in forward order (deepest up-block first)."""
        return tuple(
            tap_id(level, 0) for level in sorted(self.tap_levels, reverse=True)
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("channel_multipliers", "attention_levels", "tap_levels"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> NetConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"Unknown NetConfig keys: {sorted(unknown)}")
        return cls(**data)


def tap_id(level: int, index: int) -> str:
    return f"up.{level}.{index}"


@dataclass
class TapBundle:
    """Hidden states and cross-attention probabilities captured in one pass.

    ``attentions`` tensors have shape (batch, heads, queries, tokens).
    """

    features: dict[str, torch.Tensor] = field(default_factory=dict)
    attentions: dict[str, torch.Tensor] = field(default_factory=dict)

    def ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.features))


# ---------------------------------------------------------------------------
# Low-rank adapters
# ---------------------------------------------------------------------------


class LoRALinear(nn.Module):
    """Linear map with an optional rank-r delta: y = Wx + scale * (alpha/r) * B A x.

    The up-projection B starts at zero, so a fresh adapter changes nothing.
    """

    def __init__(self, in_features: int, out_features: int, bias: bool = True) -> None:
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=bias)
        self.rank = 0
        self.alpha = 0.0
        self.scale = 1.0
        self.lora_down: nn.Parameter | None = None
        self.lora_up: nn.Parameter | None = None

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def attach(
        self, rank: int, alpha: float | None = None, generator: torch.Generator | None = None
    ) -> None:
        """(Re)create the adapter factors; rank 0 removes them."""
        if rank < 0:
            raise ValueError(f"Adapter rank must be >= 0, got {rank}")
        self.rank = int(rank)
        self.alpha = float(alpha if alpha is not None else rank)
        if self.rank == 0:
            self.lora_down = None
            self.lora_up = None
            return
        down = torch.empty(self.rank, self.in_features)
        bound = 1.0 / math.sqrt(self.in_features)
        with torch.no_grad():
            down.uniform_(-bound, bound, generator=generator)
        self.lora_down = nn.Parameter(down)
        self.lora_up = nn.Parameter(torch.zeros(self.out_features, self.rank))

    def adapter_parameters(self) -> list[nn.Parameter]:
        if self.lora_down is None or self.lora_up is None:
            return []
        return [self.lora_down, self.lora_up]

    def forward(self, x: torch.Tensor, adapters_on: bool = False) -> torch.Tensor:
        out = self.base(x)
        if not adapters_on or self.lora_up is None or self.scale == 0.0:
            return out
        delta = F.linear(F.linear(x, self.lora_down), self.lora_up)
        return out + (self.scale * self.alpha / self.rank) * delta


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (batch, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / max(half, 1)
    )
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Attention(nn.Module):
    """Multi-head attention with adapter-capable q/k/v/out projections."""

    def __init__(self, dim: int, context_dim: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.q = LoRALinear(dim, dim, bias=False)
        self.k = LoRALinear(context_dim, dim, bias=False)
        self.v = LoRALinear(context_dim, dim, bias=False)
        self.out = LoRALinear(dim, dim)

    def forward(
        self, x: torch.Tensor, context: torch.Tensor, adapters_on: bool
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        h = self.heads
        q = self.q(x, adapters_on).reshape(b, n, h, d // h).transpose(1, 2)
        k = self.k(context, adapters_on).reshape(b, -1, h, d // h).transpose(1, 2)
        v = self.v(context, adapters_on).reshape(b, -1, h, d // h).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        probs = logits.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(out, adapters_on), probs


class SpatialTransformer(nn.Module):
    """Self-attention, cross-attention over caption tokens, feed-forward."""

    def __init__(self, channels: int, token_dim: int, heads: int) -> None:
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.ln1 = nn.LayerNorm(channels)
        self.self_attn = Attention(channels, channels, heads)
        self.ln2 = nn.LayerNorm(channels)
        self.cross_attn = Attention(channels, token_dim, heads)
        self.ln3 = nn.LayerNorm(channels)
        self.ff = nn.Sequential(
            nn.Linear(channels, 4 * channels),
            nn.GELU(),
            nn.Linear(4 * channels, channels),
        )

    def forward(
        self, x: torch.Tensor, context: torch.Tensor, adapters_on: bool
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, c, hgt, wid = x.shape
        h = self.norm(x).reshape(b, c, hgt * wid).transpose(1, 2)
        n = self.ln1(h)
        h = h + self.self_attn(n, n, adapters_on)[0]
        attn_out, probs = self.cross_attn(self.ln2(h), context, adapters_on)
        h = h + attn_out
        h = h + self.ff(self.ln3(h))
        h = h.transpose(1, 2).reshape(b, c, hgt, wid)
        return x + h, probs


# ---------------------------------------------------------------------------
# The denoiser
# ---------------------------------------------------------------------------


class TinyUNet(nn.Module):
    """Conditional epsilon-prediction U-Net.

    Parameters named ``*.lora_down`` / ``*.lora_up`` are the adapters; every
    other parameter is a base weight.
    """

    def __init__(self, config: NetConfig) -> None:
        super().__init__()
        self.config = config
        c0 = config.base_channels
        temb_dim = 4 * c0
        self.temb = nn.Sequential(
            nn.Linear(c0, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.pos_embedding = nn.Parameter(torch.randn(config.max_tokens, config.token_dim) * 0.02)
        self.conv_in = nn.Conv2d(config.in_channels, c0, 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsample = nn.ModuleList()
        ch = c0
        skip_channels = []
        for level in range(config.num_levels):
            out_ch = config.channels(level)
            self.down_res.append(ResBlock(ch, out_ch, temb_dim))
            ch = out_ch
            if level in config.attention_levels:
                self.down_attn[str(level)] = SpatialTransformer(
                    ch, config.token_dim, config.num_heads
                )
            skip_channels.append(ch)
            if level < config.num_levels - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid_res1 = ResBlock(ch, ch, temb_dim)
        deepest = config.num_levels - 1
        self.mid_attn = (
            SpatialTransformer(ch, config.token_dim, config.num_heads)
            if deepest in config.attention_levels
            else None
        )
        self.mid_res2 = ResBlock(ch, ch, temb_dim)

        self.up_res = nn.ModuleDict()
        self.up_attn = nn.ModuleDict()
        self.upsample = nn.ModuleDict()
        for level in reversed(range(config.num_levels)):
            out_ch = config.channels(level)
            self.up_res[str(level)] = ResBlock(ch + skip_channels[level], out_ch, temb_dim)
            ch = out_ch
            if level in config.attention_levels:
                self.up_attn[str(level)] = SpatialTransformer(
                    ch, config.token_dim, config.num_heads
                )
            if level > 0:
                self.upsample[str(level)] = nn.Conv2d(ch, config.channels(level - 1), 3, padding=1)
                ch = config.channels(level - 1)

        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, config.in_channels, 3, padding=1)

    # -- adapters -----------------------------------------------------------

    def lora_layers(self) -> list[tuple[str, LoRALinear]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, LoRALinear)]

    def attach_adapters(
        self, rank: int, alpha: float | None = None, seed: int = 0
    ) -> None:
        """Attach fresh zero-initialized adapters to every attention projection."""
        generator = torch.Generator().manual_seed(seed)
        for _name, layer in self.lora_layers():
            layer.attach(rank, alpha, generator)
        logger.debug("Attached rank-%d adapters to %d maps", rank, len(self.lora_layers()))

    @property
    def adapter_rank(self) -> int:
        layers = self.lora_layers()
        return layers[0][1].rank if layers else 0

    def adapter_params(self) -> list[nn.Parameter]:
        """Adapter parameters only; base weights are excluded."""
        params: list[nn.Parameter] = []
        for _name, layer in self.lora_layers():
            params.extend(layer.adapter_parameters())
        return params

    def set_adapter_scale(self, scale: float) -> None:
        """Blend factor for adapter deltas in adapters-on passes."""
        if not 0.0 <= scale <= 1.0:
            raise ValueError(f"Adapter scale must be in [0, 1], got {scale}")
        for _name, layer in self.lora_layers():
            layer.scale = float(scale)

    def base_state_dict(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if ".lora_" not in k}

    def adapter_state_dict(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if ".lora_" in k}

    def freeze_base(self) -> None:
        """Mark base weights as constants; only adapters stay trainable."""
        adapter_ids = {id(p) for p in self.adapter_params()}
        for p in self.parameters():
            p.requires_grad_(id(p) in adapter_ids)

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        x_t: torch.Tensor,
        t: int | torch.Tensor,
        tokens: torch.Tensor,
        adapters_on: bool = False,
        capture_taps: bool = False,
    ) -> tuple[torch.Tensor, TapBundle | None]:
        """Predict the noise in ``x_t``.

        Args:
            x_t: (batch, channels, size, size) noised images.
            t: integer timestep or (batch,) tensor of timesteps.
            tokens: (batch, length, token_dim) caption embeddings.
            adapters_on: use the adapter deltas (fine-tuned model) or not (prior).
            capture_taps: also return the up-block TapBundle.
        """
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x_t.ndim != 4 or tuple(x_t.shape[1:]) != expected:
            raise ValueError(f"x_t must have shape (B, {expected}), got {tuple(x_t.shape)}")
        if tokens.ndim != 3 or tokens.shape[1] == 0:
            raise ValueError("Token sequence must be non-empty (batch, length, dim)")
        if tokens.shape[0] != x_t.shape[0] or tokens.shape[2] != cfg.token_dim:
            raise ValueError(
                f"tokens shape {tuple(tokens.shape)} incompatible with batch "
                f"{x_t.shape[0]} and token_dim {cfg.token_dim}"
            )
        if tokens.shape[1] > cfg.max_tokens:
            raise ValueError(f"At most {cfg.max_tokens} tokens supported, got {tokens.shape[1]}")

        b = x_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long, device=x_t.device)
        if t.ndim == 0:
            t = t.expand(b)
        temb = self.temb(timestep_embedding(t, cfg.base_channels))
        context = tokens + self.pos_embedding[: tokens.shape[1]]

        taps = TapBundle() if capture_taps else None

        h = self.conv_in(x_t)
        skips = []
        for level in range(cfg.num_levels):
            h = self.down_res[level](h, temb)
            if str(level) in self.down_attn:
                h, _ = self.down_attn[str(level)](h, context, adapters_on)
            skips.append(h)
            if level < cfg.num_levels - 1:
                h = self.downsample[level](h)

        h = self.mid_res1(h, temb)
        if self.mid_attn is not None:
            h, _ = self.mid_attn(h, context, adapters_on)
        h = self.mid_res2(h, temb)

        for level in reversed(range(cfg.num_levels)):
            h = self.up_res[str(level)](torch.cat([h, skips[level]], dim=1), temb)
            if str(level) in self.up_attn:
                h, probs = self.up_attn[str(level)](h, context, adapters_on)
                if taps is not None and level in cfg.tap_levels:
                    key = tap_id(level, 0)
                    taps.features[key] = h
                    taps.attentions[key] = probs
            if level > 0:
                h = F.interpolate(h, scale_factor=2.0, mode="nearest")
                h = self.upsample[str(level)](h)

        eps_hat = self.conv_out(F.silu(self.norm_out(h)))
        return eps_hat, taps


def build_net(config: NetConfig, seed: int = 0) -> TinyUNet:
    """Construct a TinyUNet with deterministic initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = TinyUNet(config)
    return net
