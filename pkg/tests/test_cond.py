"""Tests for aptdiff.cond."""

import pytest
import torch

from aptdiff.cond import (
    DuplicateIdentifierError,
    ManifestRecord,
    MissingPlaceholderError,
    UnknownTokenError,
    Vocabulary,
    build_pair,
    encode_caption,
    fill_template,
    read_manifest,
    write_manifest,
)
from aptdiff.constants import NULL_TOKEN, PAD_TOKEN

WORDS = ["a", "photo", "of", "in", "field", "dog", "cat"]


@pytest.fixture
def vocab():
    return Vocabulary(WORDS, token_dim=4, generator=torch.Generator().manual_seed(0))


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class TestVocabulary:
    def test_special_tokens_first(self, vocab):
        assert vocab.tokens[:2] == [PAD_TOKEN, NULL_TOKEN]
        assert len(vocab) == len(WORDS) + 2

    def test_encode_decode(self, vocab):
        ids = vocab.encode(["a", "dog"])
        assert vocab.decode(ids) == ["a", "dog"]

    def test_padding(self, vocab):
        ids = vocab.encode(["a", "dog"], pad_to=4)
        assert vocab.decode(ids) == ["a", "dog", PAD_TOKEN, PAD_TOKEN]

    def test_too_long(self, vocab):
        with pytest.raises(ValueError, match="limit"):
            vocab.encode(["a", "dog", "cat"], pad_to=2)

    def test_unknown_token(self, vocab):
        with pytest.raises(UnknownTokenError):
            vocab.token_id("horse")
        with pytest.raises(UnknownTokenError):
            vocab.decode([999])

    def test_bad_token_rejected(self):
        with pytest.raises(ValueError, match="disallowed"):
            Vocabulary(["two words"], token_dim=4)

    def test_embed_rows_in_order(self, vocab):
        a, b = vocab.token_id("dog"), vocab.token_id("cat")
        out = vocab.embed([a, b])
        assert torch.equal(out[0], vocab.weight[a])
        assert torch.equal(out[1], vocab.weight[b])

    def test_embed_permutation_equivariant(self, vocab):
        ids = torch.tensor([2, 5, 7])
        perm = torch.tensor([2, 0, 1])
        assert torch.equal(vocab.embed(ids[perm]), vocab.embed(ids)[perm])

    def test_embed_empty(self, vocab):
        assert vocab.embed([]).shape == (0, 4)

    def test_embed_out_of_range(self, vocab):
        with pytest.raises(UnknownTokenError):
            vocab.embed([len(vocab)])


class TestIdentifiers:
    def test_copy_init(self, vocab):
        vocab.register_identifier("V*", "dog")
        star = vocab.embed([vocab.token_id("V*")])[0]
        dog = vocab.embed([vocab.token_id("dog")])[0]
        assert torch.equal(star, dog)
        cos = torch.nn.functional.cosine_similarity(star, dog, dim=0)
        assert float(cos) == pytest.approx(1.0)
        assert vocab.is_identifier("V*")
        assert not vocab.is_identifier("dog")

    def test_duplicate(self, vocab):
        vocab.register_identifier("V*", "dog")
        with pytest.raises(DuplicateIdentifierError):
            vocab.register_identifier("V*", "cat")

    def test_existing_word_rejected(self, vocab):
        with pytest.raises(DuplicateIdentifierError):
            vocab.register_identifier("cat", "dog")

    def test_unknown_class(self, vocab):
        with pytest.raises(UnknownTokenError):
            vocab.register_identifier("V*", "horse")

    def test_freeze_base_only_identifiers_train(self, vocab):
        vocab.register_identifier("V*", "dog")
        vocab.freeze_base()
        assert not vocab.weight.requires_grad
        assert vocab.trainable_params() == [vocab.identifier_weight]
        loss = vocab.embed([vocab.token_id("V*"), vocab.token_id("dog")]).sum()
        loss.backward()
        assert vocab.identifier_weight.grad is not None
        assert vocab.weight.grad is None

    def test_no_identifiers_nothing_trainable(self, vocab):
        assert vocab.trainable_params() == []

    def test_spec_round_trip(self, vocab):
        vocab.register_identifier("V*", "dog")
        with torch.no_grad():
            vocab.identifier_weight.add_(1.0)
        restored = Vocabulary.from_spec(vocab.spec(), vocab.weight, vocab.identifier_weight)
        assert restored.tokens == vocab.tokens
        assert torch.equal(restored.table(), vocab.table())
        assert restored.identifiers == {"V*": "dog"}


# ---------------------------------------------------------------------------
# Conditioning pairs
# ---------------------------------------------------------------------------


class TestBuildPair:
    def test_differs_only_at_placeholder(self, vocab):
        vocab.register_identifier("V*", "dog")
        pair = build_pair("a photo of {} in a field", "V*", "dog", vocab)
        assert pair.placeholder_index == 3
        diffs = [i for i, (a, b) in enumerate(zip(pair.tokens_star, pair.tokens_class)) if a != b]
        assert diffs == [3]
        assert len(pair.null_tokens) == len(pair.tokens_star)

    def test_copy_init_embeddings_equal(self, vocab):
        vocab.register_identifier("V*", "dog")
        pair = build_pair("a photo of {} in a field", "V*", "dog", vocab)
        star = vocab.embed(list(pair.tokens_star))
        assert torch.equal(star, vocab.embed(list(pair.tokens_class)))

    def test_padded(self, vocab):
        vocab.register_identifier("V*", "dog")
        pair = build_pair("a {}", "V*", "dog", vocab, pad_to=5)
        assert len(pair.tokens_star) == 5
        assert vocab.decode(pair.tokens_class) == ["a", "dog", PAD_TOKEN, PAD_TOKEN, PAD_TOKEN]

    @pytest.mark.parametrize("template", ["a photo of a dog", "{} and {}", ""])
    def test_placeholder_count(self, vocab, template):
        with pytest.raises(MissingPlaceholderError):
            build_pair(template, "V*", "dog", vocab)

    def test_unregistered_identifier(self, vocab):
        with pytest.raises(UnknownTokenError):
            build_pair("a {}", "V*", "dog", vocab)

    def test_fill_template(self):
        assert fill_template("a {} here", "cat") == ["a", "cat", "here"]

    def test_encode_caption(self, vocab):
        assert vocab.decode(encode_caption("a  cat", vocab)) == ["a", "cat"]
        with pytest.raises(ValueError, match="empty"):
            encode_caption("   ", vocab)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


class TestManifest:
    def test_round_trip(self, tmp_path):
        records = [
            ManifestRecord(tmp_path / "a.png", "a photo of a {}", "dog"),
            ManifestRecord(tmp_path / "b.png", "a {} in a field", "dog"),
        ]
        path = tmp_path / "refs.tsv"
        write_manifest(path, records)
        assert read_manifest(path) == records

    def test_relative_paths_and_comments(self, tmp_path):
        path = tmp_path / "refs.tsv"
        path.write_text("# comment\n\nimg/a.png\ta photo of a {}\tdog\n", encoding="utf-8")
        (record,) = read_manifest(path)
        assert record.image_path == tmp_path / "img" / "a.png"
        assert record.class_word == "dog"

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "refs.tsv"
        path.write_text("a.png\ta photo of a {}\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 1"):
            read_manifest(path)

    def test_template_without_placeholder(self, tmp_path):
        path = tmp_path / "refs.tsv"
        path.write_text("# header\na.png\ta photo of a dog\tdog\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 2"):
            read_manifest(path)
