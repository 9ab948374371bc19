"""Adaptive overfitting indicator.

Timesteps are grouped into B equal bins. Each bin keeps an exponential
moving average of the prior's and the fine-tuned model's denoising losses;
the gap between them gives gamma in [0, 1), which drives the augmentation
probability and the loss weight for that bin.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

from aptdiff.constants import EMA_ALPHA, NUM_BINS, NUM_TIMESTEPS

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BinMap:
    T: int = NUM_TIMESTEPS
    B: int = NUM_BINS

    def __post_init__(self) -> None:
        if self.T < 1 or self.B < 1:
            raise ValueError(f"T and B must be positive, got T={self.T}, B={self.B}")
        if self.T % self.B:
            raise ValueError(f"Bin count {self.B} must divide T={self.T}")

    @property
    def width(self) -> int:
        return self.T // self.B

    def bin_range(self, b: int) -> range:
        return range(b * self.width, (b + 1) * self.width)


def bin_of(t: int, binmap: BinMap) -> int:
    """floor(t / (T / B))."""
    if not 0 <= t < binmap.T:
        raise ValueError(f"Timestep {t} out of range [0, {binmap.T})")
    return int(t) // binmap.width


def temperature_for(mode: str | float, T: int) -> float:
    """Exponent multiplier: ``"full"`` -> T, ``"tenth"`` -> T / 10, or a number."""
    if isinstance(mode, (int, float)) and not isinstance(mode, bool):
        value = float(mode)
    elif mode == "full":
        value = float(T)
    elif mode == "tenth":
        value = T / 10.0
    else:
        raise ValueError(f"Unknown temperature mode {mode!r} (use 'full', 'tenth' or a number)")
    if not value > 0 or not math.isfinite(value):
        raise ValueError(f"Temperature must be a positive finite number, got {value}")
    return value


def compute_gamma(ema_phi_b: float, ema_theta_b: float, temperature: float) -> float:
    """1 - exp(-temperature * (ema_phi - ema_theta)), floored at 0."""
    for value in (ema_phi_b, ema_theta_b, temperature):
        if not math.isfinite(value):
            raise ValueError(f"Indicator inputs must be finite, got {value}")
    if temperature <= 0:
        raise ValueError(f"Temperature must be positive, got {temperature}")
    gap = ema_phi_b - ema_theta_b
    if gap <= 0.0:
        return 0.0
    return -math.expm1(-temperature * gap)


def augment_probability(gamma: float, p_max: float) -> float:
    """clamp(gamma, 0, p_max)."""
    if not 0.0 <= p_max <= 1.0:
        raise ValueError(f"p_max must be in [0, 1], got {p_max}")
    return min(max(gamma, 0.0), p_max)


def adaptive_weight(gamma: float) -> float:
    """1 - clamp(gamma, 0, 1)."""
    return 1.0 - min(max(gamma, 0.0), 1.0)


@dataclass(frozen=True)
class IndicatorState:
    """Per-bin loss averages and the derived gamma values.

    ``gamma`` is always recomputed from the two averages; use
    :func:`ema_update` to produce a new state.
    """

    num_bins: int = NUM_BINS
    alpha: float = EMA_ALPHA
    temperature: float = float(NUM_TIMESTEPS)
    ema_phi: tuple[float, ...] = field(default=())
    ema_theta: tuple[float, ...] = field(default=())
    seen_phi: tuple[bool, ...] = field(default=())
    seen_theta: tuple[bool, ...] = field(default=())
    gamma: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"EMA alpha must be in (0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError("Temperature must be positive")
        n = self.num_bins
        for name, default in (
            ("ema_phi", 0.0),
            ("ema_theta", 0.0),
            ("seen_phi", False),
            ("seen_theta", False),
            ("gamma", 0.0),
        ):
            value = getattr(self, name)
            if not value:
                object.__setattr__(self, name, (default,) * n)
            elif len(value) != n:
                raise ValueError(f"{name} must have {n} entries, got {len(value)}")
            else:
                object.__setattr__(self, name, tuple(value))

    def to_dict(self) -> dict:
        return {
            "num_bins": self.num_bins,
            "alpha": self.alpha,
            "temperature": self.temperature,
            "ema_phi": list(self.ema_phi),
            "ema_theta": list(self.ema_theta),
            "seen_phi": list(self.seen_phi),
            "seen_theta": list(self.seen_theta),
            "gamma": list(self.gamma),
        }

    @classmethod
    def from_dict(cls, data: dict) -> IndicatorState:
        """Restore a state; gamma is recomputed from the stored averages."""
        data = dict(data)
        stored = data.pop("gamma", None)
        state = cls(**data)
        gamma = tuple(
            compute_gamma(p, t, state.temperature)
            for p, t in zip(state.ema_phi, state.ema_theta)
        )
        if stored is not None and tuple(stored) != gamma:
            logger.warning("Stored gamma disagrees with its moving averages; recomputed")
        return replace(state, gamma=gamma)


def _ema(previous: float, seen: bool, value: float, alpha: float) -> float:
    if not seen:
        return float(value)
    return (1.0 - alpha) * previous + alpha * value


def ema_update(
    state: IndicatorState, bin: int, loss_phi: float, loss_theta: float
) -> IndicatorState:
    """Fold one pair of losses into bin ``bin`` and recompute its gamma.

    The first observation of a track seeds its average.

    Raises:
        ValueError: If ``bin`` is out of range or a loss is negative/non-finite.
    """
    if not 0 <= bin < state.num_bins:
        raise ValueError(f"Bin {bin} out of range [0, {state.num_bins})")
    for loss in (loss_phi, loss_theta):
        if not math.isfinite(loss) or loss < 0:
            raise ValueError(f"Losses must be finite and >= 0, got {loss}")

    ema_phi = list(state.ema_phi)
    ema_theta = list(state.ema_theta)
    seen_phi = list(state.seen_phi)
    seen_theta = list(state.seen_theta)
    gamma = list(state.gamma)

    ema_phi[bin] = _ema(ema_phi[bin], seen_phi[bin], loss_phi, state.alpha)
    ema_theta[bin] = _ema(ema_theta[bin], seen_theta[bin], loss_theta, state.alpha)
    seen_phi[bin] = True
    seen_theta[bin] = True
    gamma[bin] = compute_gamma(ema_phi[bin], ema_theta[bin], state.temperature)

    return replace(
        state,
        ema_phi=tuple(ema_phi),
        ema_theta=tuple(ema_theta),
        seen_phi=tuple(seen_phi),
        seen_theta=tuple(seen_theta),
        gamma=tuple(gamma),
    )


def new_indicator(
    binmap: BinMap, alpha: float = EMA_ALPHA, temperature_mode: str | float = "full"
) -> IndicatorState:
    return IndicatorState(
        num_bins=binmap.B,
        alpha=alpha,
        temperature=temperature_for(temperature_mode, binmap.T),
    )
