"""Tests for aptdiff.corpus."""

import numpy as np
import pytest
from PIL import Image

from aptdiff.cond import ManifestRecord, write_manifest
from aptdiff.corpus import (
    BACKGROUNDS,
    REFERENCE_CLASS,
    SHAPES,
    load_image,
    load_reference_set,
    make_corpus,
    make_reference_set,
    render_background,
    shape_mask,
    vocabulary_words,
)


class TestCorpus:
    def test_deterministic(self):
        a = make_corpus(8, 16, seed=5)
        b = make_corpus(8, 16, seed=5)
        assert [i.caption for i in a] == [i.caption for i in b]
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))

    def test_seed_changes_corpus(self):
        a = make_corpus(8, 16, seed=5)
        b = make_corpus(8, 16, seed=6)
        assert [i.caption for i in a] != [i.caption for i in b]

    def test_image_layout_and_range(self):
        (item,) = make_corpus(1, 16)
        assert item.image.shape == (3, 16, 16)
        assert item.image.dtype == np.float32
        assert item.image.min() >= -1.0
        assert item.image.max() <= 1.0

    def test_captions_use_known_words(self):
        words = set(vocabulary_words())
        for item in make_corpus(30, 16, seed=1):
            assert set(item.caption.split()) <= words
            assert item.class_word in SHAPES
            assert "{}" in item.caption_template

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            make_corpus(0)


class TestRendering:
    @pytest.mark.parametrize("kind", sorted(BACKGROUNDS))
    def test_backgrounds(self, kind):
        img = render_background(kind, 16, np.random.default_rng(0))
        assert img.shape == (16, 16, 3)
        assert 0.0 <= img.min() and img.max() <= 1.0

    @pytest.mark.parametrize("shape", SHAPES)
    def test_masks_non_empty(self, shape):
        mask = shape_mask(shape, 32, 0.5, 0.5, 0.3)
        assert 0 < mask.sum() < 32 * 32

    def test_unknown_shape(self):
        with pytest.raises(ValueError, match="Unknown shape"):
            shape_mask("hexagon", 8, 0.5, 0.5, 0.2)

    def test_unknown_background(self):
        with pytest.raises(ValueError, match="Unknown background"):
            render_background("moon", 8, np.random.default_rng(0))


class TestReferenceSet:
    def test_first_view_canonical(self):
        a = make_reference_set(1, 16, seed=0)
        b = make_reference_set(3, 16, seed=9)
        assert np.array_equal(a[0].image, b[0].image)
        assert all(item.class_word == REFERENCE_CLASS for item in b)

    @pytest.mark.parametrize("n", [0, 11])
    def test_size_limits(self, n):
        with pytest.raises(ValueError, match="1-10"):
            make_reference_set(n)

    def test_load_from_manifest(self, tmp_path):
        pixels = np.zeros((20, 20, 3), dtype=np.uint8)
        pixels[..., 0] = 255
        Image.fromarray(pixels).save(tmp_path / "ref.png")
        write_manifest(
            tmp_path / "refs.tsv",
            [ManifestRecord(tmp_path / "ref.png", "a photo of a {} in a green field", "circle")],
        )
        (item,) = load_reference_set(tmp_path / "refs.tsv", 16)
        assert item.image.shape == (3, 16, 16)
        assert np.allclose(item.image[0], 1.0)
        assert np.allclose(item.image[1], -1.0)
        assert item.class_word == "circle"

    def test_load_image_converts_grayscale(self, tmp_path):
        Image.fromarray(np.full((8, 8), 128, dtype=np.uint8)).save(tmp_path / "g.png")
        img = load_image(tmp_path / "g.png", 8)
        assert img.shape == (3, 8, 8)
        assert np.allclose(img, 128 / 255 * 2 - 1, atol=1e-6)
