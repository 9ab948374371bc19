"""Adaptive affine augmentation: zoom-out and rotation of the clean image."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from aptdiff.constants import P_MAX, ROTATION_RANGE_DEG, ZOOM_OUT_RANGE

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentPolicy:
    """Zoom-out factors (>= 1), rotation bounds in degrees, padding value.

    ``fill=None`` pads with the per-channel mean of the image being augmented.
    """

    scale_range: tuple[float, float] = ZOOM_OUT_RANGE
    rotation_range: tuple[float, float] = ROTATION_RANGE_DEG
    fill: float | None = None
    p_max: float = P_MAX

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "rotation_range", tuple(float(v) for v in self.rotation_range))
        lo, hi = self.scale_range
        if lo < 1.0 or hi < lo:
            raise ValueError(f"Zoom-out range must satisfy 1 <= min <= max, got {self.scale_range}")
        rlo, rhi = self.rotation_range
        if rlo != -rhi or rhi < 0:
            raise ValueError(f"Rotation range must be symmetric about 0, got {self.rotation_range}")
        if not 0.0 <= self.p_max <= 1.0:
            raise ValueError(f"p_max must be in [0, 1], got {self.p_max}")


@dataclass(frozen=True)
class AugmentParams:
    applied: bool
    scale: float = 1.0
    angle: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def apply_affine(
    x0: torch.Tensor, scale: float, angle: float, fill: float | None = None
) -> torch.Tensor:
    """Shrink content by 1/scale about the center, then rotate by ``angle`` degrees.

    Accepts (C, H, W) or (B, C, H, W). Exposed regions take ``fill`` (or the
    per-channel image mean when ``fill`` is None).
    """
    if x0.ndim not in (3, 4):
        raise ValueError(f"Expected (C, H, W) or (B, C, H, W), got {tuple(x0.shape)}")
    if scale < 1.0:
        raise ValueError(f"Zoom-out scale must be >= 1, got {scale}")
    if scale == 1.0 and angle == 0.0:
        return x0.clone()
    channel_dim = x0.ndim - 3
    if fill is None:
        dims = [d for d in range(x0.ndim) if d != channel_dim]
        fill_values = [float(v) for v in x0.mean(dim=dims)]
    else:
        fill_values = [float(fill)] * x0.shape[channel_dim]
    return TF.affine(
        x0,
        angle=float(angle),
        translate=[0, 0],
        scale=1.0 / float(scale),
        shear=[0.0, 0.0],
        interpolation=InterpolationMode.BILINEAR,
        fill=fill_values,
    )


def maybe_augment(
    x0: torch.Tensor,
    p: float,
    policy: AugmentPolicy,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, bool, AugmentParams]:
    """With probability ``p`` apply a random zoom-out + rotation.

    Three draws are taken from ``rng`` on every call, so the stream advances
    identically whether or not the transform is applied.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Augmentation probability must be in [0, 1], got {p}")
    u = float(rng.random())
    scale = float(rng.uniform(*policy.scale_range))
    angle = float(rng.uniform(*policy.rotation_range))
    if u >= p:
        return x0, False, AugmentParams(applied=False)
    out = apply_affine(x0, scale, angle, policy.fill)
    logger.debug("Augmented sample: scale %.3f, angle %.2f (p=%.3f)", scale, angle, p)
    return out, True, AugmentParams(applied=True, scale=scale, angle=angle)


def empirical_rate(
    p: float,
    n: int,
    rng: np.random.Generator,
    policy: AugmentPolicy | None = None,
) -> float:
    """Fraction of ``n`` maybe_augment calls that applied the transform."""
    if n < 1:
        raise ValueError("n must be >= 1")
    policy = policy or AugmentPolicy()
    dummy = torch.zeros(3, 8, 8)
    hits = 0
    for _ in range(n):
        _, applied, _ = maybe_augment(dummy, p, policy, rng)
        hits += applied
    return hits / n
