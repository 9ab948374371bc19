"""Shared constants used across aptdiff modules."""

from __future__ import annotations

import re

# Hyperparameter defaults (personalization recipe)
LAMBDA_DIST = 30.0
LAMBDA_ATTN = 3e-4
P_MAX = 0.8
NUM_BINS = 10
EMA_ALPHA = 0.1
ADAPTER_RANK = 32
BATCH_SIZE = 1
GUIDANCE_SCALE = 7.5

# Affine augmentation family
ZOOM_OUT_RANGE: tuple[float, float] = (1.0, 3.0)
ROTATION_RANGE_DEG: tuple[float, float] = (-15.0, 15.0)

# Diffusion schedule
NUM_TIMESTEPS = 1000
BETA_START = 1e-4
BETA_END = 0.02

# Floor applied to variances before the square root in feature statistics
VARIANCE_FLOOR = 1e-8

# Special tokens
PLACEHOLDER = "{}"
NULL_TOKEN = "<null>"
PAD_TOKEN = "<pad>"
DEFAULT_IDENTIFIER = "V*"

# Tokens: printable, no whitespace, no braces (braces mark the placeholder)
TOKEN_RE = re.compile(r"^[^\s{}]+$")

# CSV column orders (fixed for diff-ability)
INDICATOR_LOG_COLUMNS: tuple[str, ...] = (
    "step",
    "bin",
    "ema_phi",
    "ema_theta",
    "gamma",
)

TRAINING_LOG_COLUMNS: tuple[str, ...] = (
    "step",
    "t",
    "bin",
    "L_DM_theta",
    "L_DM_phi",
    "gamma",
    "weight",
    "L_mu",
    "L_sigma",
    "L_attn",
    "total",
    "augmented",
    "aug_scale",
    "aug_angle",
)

ABLATION_COLUMNS: tuple[str, ...] = (
    "variant",
    "ata",
    "rs",
    "aa",
    "steps",
    "delta_noise_first",
    "delta_noise_final",
    "gamma_low_noise_final",
    "gamma_high_noise_final",
    "final_total_loss",
)
