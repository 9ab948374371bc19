"""Representation stabilization, attention alignment and the total objective.

The prior-side taps (adapters off) are treated as constants: every loss
detaches them before comparing, so gradients only reach the fine-tuned side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from aptdiff.constants import LAMBDA_ATTN, LAMBDA_DIST, VARIANCE_FLOOR
from aptdiff.tinynet import TapBundle

STAT_REDUCTIONS = ("channel", "layer")


@dataclass(frozen=True)
class RegWeights:
    lambda_dist: float = LAMBDA_DIST
    lambda_attn: float = LAMBDA_ATTN

    def __post_init__(self) -> None:
        for name in ("lambda_dist", "lambda_attn"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


def _check_ids(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor], kind: str) -> list[str]:
    if set(a) != set(b):
        raise ValueError(f"{kind} tap ids differ: {sorted(a)} vs {sorted(b)}")
    for key in a:
        if a[key].shape != b[key].shape:
            raise ValueError(
                f"{kind} tap '{key}' shape mismatch: "
                f"{tuple(a[key].shape)} vs {tuple(b[key].shape)}"
            )
    return sorted(a)


def feature_stats(
    h: torch.Tensor, reduction: str = "channel"
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and population std of a (B, C, H, W) activation.

    ``channel`` reduces over spatial positions, giving (B, C) statistics;
    ``layer`` reduces over channels and positions, giving (B, 1).
    """
    if h.ndim != 4:
        raise ValueError(f"Feature taps must be (B, C, H, W), got {tuple(h.shape)}")
    if reduction == "channel":
        flat = h.flatten(2)
    elif reduction == "layer":
        flat = h.flatten(1).unsqueeze(1)
    else:
        raise ValueError(f"Unknown stat reduction '{reduction}' (use {STAT_REDUCTIONS})")
    mu = flat.mean(dim=-1)
    var = (flat - mu.unsqueeze(-1)).pow(2).mean(dim=-1)
    sigma = var.clamp_min(VARIANCE_FLOOR).sqrt()
    return mu, sigma


def stat_losses(
    taps_theta: TapBundle, taps_phi: TapBundle, reduction: str = "channel"
) -> tuple[torch.Tensor, torch.Tensor]:
    """(L_mu, L_sigma): squared distances between activation statistics.

    Summed over layers and channels, averaged over the batch.
    """
    ids = _check_ids(taps_theta.features, taps_phi.features, "Feature")
    l_mu = torch.zeros(())
    l_sigma = torch.zeros(())
    for key in ids:
        mu_t, sd_t = feature_stats(taps_theta.features[key], reduction)
        mu_p, sd_p = feature_stats(taps_phi.features[key].detach(), reduction)
        l_mu = l_mu + (mu_t - mu_p).pow(2).sum(dim=-1).mean()
        l_sigma = l_sigma + (sd_t - sd_p).pow(2).sum(dim=-1).mean()
    return l_mu, l_sigma


def attn_align_loss(taps_theta: TapBundle, taps_phi: TapBundle) -> torch.Tensor:
    """(1/H) * ||sum_h A_theta - sum_h A_phi||^2 per tap, summed over taps.

    Attention tensors are (B, H, queries, tokens) or (H, queries, tokens).
    The squared norm is summed over queries and tokens and averaged over
    the batch.
    """
    if set(taps_theta.attentions) != set(taps_phi.attentions):
        raise ValueError(
            f"Attention tap ids differ: {sorted(taps_theta.attentions)} "
            f"vs {sorted(taps_phi.attentions)}"
        )
    total = torch.zeros(())
    for key in sorted(taps_theta.attentions):
        a_t = taps_theta.attentions[key]
        a_p = taps_phi.attentions[key].detach()
        if a_t.ndim == 3:
            a_t = a_t.unsqueeze(0)
        if a_p.ndim == 3:
            a_p = a_p.unsqueeze(0)
        if a_t.ndim != 4 or a_p.ndim != 4:
            raise ValueError(f"Attention tap '{key}' must be (B, H, Q, K)")
        if a_t.shape[1] != a_p.shape[1]:
            raise ValueError(
                f"Head count mismatch at '{key}': {a_t.shape[1]} vs {a_p.shape[1]}"
            )
        if a_t.shape != a_p.shape:
            raise ValueError(
                f"Attention tap '{key}' shape mismatch: "
                f"{tuple(a_t.shape)} vs {tuple(a_p.shape)}"
            )
        heads = a_t.shape[1]
        d = a_t.sum(dim=1) - a_p.sum(dim=1)
        total = total + d.pow(2).flatten(1).sum(dim=1).mean() / heads
    return total


def total_loss(
    weighted_dm: torch.Tensor | float,
    l_mu: torch.Tensor | float,
    l_sigma: torch.Tensor | float,
    l_attn: torch.Tensor | float,
    weights: RegWeights,
) -> torch.Tensor:
    """weighted_dm + lambda_dist * (L_mu + L_sigma) + lambda_attn * L_attn.

    Raises:
        ValueError: If any term is non-finite.
    """
    terms = {
        "weighted_dm": weighted_dm,
        "L_mu": l_mu,
        "L_sigma": l_sigma,
        "L_attn": l_attn,
    }
    for name, value in terms.items():
        if not math.isfinite(float(torch.as_tensor(value).detach())):
            raise ValueError(f"{name} is not finite: {float(torch.as_tensor(value))}")
    return (
        torch.as_tensor(weighted_dm)
        + weights.lambda_dist * (torch.as_tensor(l_mu) + torch.as_tensor(l_sigma))
        + weights.lambda_attn * torch.as_tensor(l_attn)
    )
