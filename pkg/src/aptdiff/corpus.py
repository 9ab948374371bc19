"""Procedural captioned corpus for the toy prior and reference sets.

Images are colored geometric shapes on backgrounds with a handful of scene
types. Captions spend most of their words on the background and leave a
single subject slot for the class word.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from aptdiff.cond import fill_template, read_manifest

logger = logging.getLogger(__name__)

SHAPES: tuple[str, ...] = ("circle", "square", "triangle", "ring", "cross", "diamond")

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.86, 0.12, 0.12),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.95, 0.85, 0.10),
    "orange": (0.98, 0.55, 0.10),
    "purple": (0.55, 0.20, 0.70),
    "white": (0.97, 0.97, 0.97),
    "black": (0.05, 0.05, 0.05),
}

# background key -> caption phrase
BACKGROUNDS: dict[str, str] = {
    "field": "in a green field",
    "sky": "under a blue sky",
    "night": "at night",
    "desert": "in the desert",
    "snow": "on the snow",
    "ocean": "by the ocean",
    "brick": "against a brick wall",
}

CAPTION_PREFIX = "a photo of a"

REFERENCE_TEMPLATE = "a photo of a {} in a green field"
REFERENCE_CLASS = "circle"


@dataclass(frozen=True)
class CorpusItem:
    """One captioned image: pixels in [-1, 1], layout (C, H, W)."""

    image: np.ndarray
    caption_template: str
    class_word: str

    @property
    def caption(self) -> str:
        return " ".join(fill_template(self.caption_template, self.class_word))


def vocabulary_words() -> list[str]:
    """Every word the corpus captions can use."""
    words: list[str] = []
    for text in (CAPTION_PREFIX, REFERENCE_TEMPLATE.replace("{}", ""), *BACKGROUNDS.values()):
        words.extend(text.split())
    words.extend(COLORS)
    words.extend(SHAPES)
    return list(dict.fromkeys(words))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(coords, coords, indexing="xy")


def render_background(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """(H, W, 3) RGB in [0, 1]."""
    xx, yy = _grid(size)
    img = np.zeros((size, size, 3), dtype=np.float64)
    if kind == "field":
        horizon = 0.4 + 0.1 * rng.random()
        img[:] = (0.55, 0.78, 0.95)
        img[yy > horizon] = (0.20, 0.62, 0.22)
    elif kind == "sky":
        for c, (top, bottom) in enumerate(((0.25, 0.65), (0.45, 0.85), (0.85, 1.0))):
            img[..., c] = top + (bottom - top) * yy
    elif kind == "night":
        img[:] = (0.04, 0.05, 0.18)
        stars = rng.random((size, size)) < 0.02
        img[stars] = (0.95, 0.95, 0.80)
    elif kind == "desert":
        img[:] = (0.93, 0.80, 0.50)
        img[yy > 0.7 + 0.05 * np.sin(8 * xx)] = (0.85, 0.60, 0.30)
    elif kind == "snow":
        img[:] = (0.80, 0.85, 0.92)
        img[yy > 0.5] = (0.97, 0.97, 1.0)
    elif kind == "ocean":
        img[:] = (0.60, 0.80, 0.95)
        sea = yy > 0.45
        img[sea] = (0.05, 0.25, 0.55)
        waves = sea & (np.sin(40 * yy + 6 * xx) > 0.85)
        img[waves] = (0.70, 0.85, 0.95)
    elif kind == "brick":
        img[:] = (0.62, 0.22, 0.15)
        rows = np.floor(yy * 8)
        mortar_y = (yy * 8) % 1 < 0.12
        mortar_x = ((xx * 4 + 0.5 * (rows % 2)) % 1) < 0.06
        img[mortar_y | mortar_x] = (0.85, 0.82, 0.78)
    else:
        raise ValueError(f"Unknown background '{kind}'")
    return img


def shape_mask(shape: str, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    """Boolean (H, W) mask of a shape centred at (cx, cy), in unit coordinates."""
    xx, yy = _grid(size)
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx**2 + dy**2 <= radius**2
    if shape == "square":
        return (np.abs(dx) <= radius * 0.85) & (np.abs(dy) <= radius * 0.85)
    if shape == "triangle":
        inside_y = (dy <= radius * 0.8) & (dy >= -radius)
        half_width = (dy + radius) / (1.8 * radius) * radius
        return inside_y & (np.abs(dx) <= half_width)
    if shape == "ring":
        r2 = dx**2 + dy**2
        return (r2 <= radius**2) & (r2 >= (0.55 * radius) ** 2)
    if shape == "cross":
        arm = radius * 0.3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= radius)
        )
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= radius
    raise ValueError(f"Unknown shape '{shape}'")


def _to_model_range(img: np.ndarray) -> np.ndarray:
    return (img.transpose(2, 0, 1) * 2.0 - 1.0).astype(np.float32)


def render_item(
    shape: str,
    color: str,
    background: str,
    size: int,
    rng: np.random.Generator,
) -> CorpusItem:
    radius = rng.uniform(0.14, 0.3)
    cx = rng.uniform(radius, 1.0 - radius)
    cy = rng.uniform(radius, 1.0 - radius)
    img = render_background(background, size, rng)
    img[shape_mask(shape, size, cx, cy, radius)] = COLORS[color]
    template = f"{CAPTION_PREFIX} {color} {{}} {BACKGROUNDS[background]}"
    return CorpusItem(_to_model_range(img), template, shape)


def make_corpus(n: int, image_size: int = 32, seed: int = 0) -> list[CorpusItem]:
    """Generate ``n`` captioned images deterministically from ``seed``."""
    if n < 1:
        raise ValueError("Corpus size must be >= 1")
    rng = np.random.default_rng(seed)
    items = []
    backgrounds = list(BACKGROUNDS)
    colors = list(COLORS)
    for _ in range(n):
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = colors[rng.integers(len(colors))]
        background = backgrounds[rng.integers(len(backgrounds))]
        items.append(render_item(shape, color, background, image_size, rng))
    return items


def render_concept(size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    """The personalized concept: a checkered orange/purple circle in a field."""
    xx, yy = _grid(size)
    img = render_background("field", size, np.random.default_rng(0))
    mask = shape_mask("circle", size, cx, cy, radius)
    checks = ((np.floor((xx - cx) * 10) + np.floor((yy - cy) * 10)) % 2) == 0
    img[mask & checks] = COLORS["orange"]
    img[mask & ~checks] = COLORS["purple"]
    return img


def make_reference_set(n: int = 1, image_size: int = 32, seed: int = 0) -> list[CorpusItem]:
    """1-10 views of the concept. The first view is always the canonical one."""
    if not 1 <= n <= 10:
        raise ValueError(f"Reference sets hold 1-10 images, got {n}")
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        if i == 0:
            cx, cy, radius = 0.5, 0.55, 0.26
        else:
            radius = rng.uniform(0.2, 0.3)
            cx = rng.uniform(radius, 1.0 - radius)
            cy = rng.uniform(0.45, 1.0 - radius)
        img = render_concept(image_size, cx, cy, radius)
        items.append(CorpusItem(_to_model_range(img), REFERENCE_TEMPLATE, REFERENCE_CLASS))
    return items


def load_image(path: str | Path, image_size: int) -> np.ndarray:
    """Read an image file as (3, size, size) float32 in [-1, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.Resampling.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return _to_model_range(arr)


def load_reference_set(manifest_path: str | Path, image_size: int) -> list[CorpusItem]:
    """Load reference images and captions listed in a caption manifest."""
    records = read_manifest(manifest_path)
    if not 1 <= len(records) <= 10:
        raise ValueError(f"Reference manifests list 1-10 images, got {len(records)}")
    items = [
        CorpusItem(load_image(r.image_path, image_size), r.caption_template, r.class_word)
        for r in records
    ]
    logger.info("Loaded %d reference images from %s", len(items), Path(manifest_path).name)
    return items
