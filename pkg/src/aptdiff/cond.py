"""Token vocabulary, paired conditionings and the caption manifest.

The vocabulary is an embedding table. Base rows (ordinary words, class
words, padding and the null token) are trained with the prior and frozen
during personalization; identifier rows live in a separate parameter so
they are the only token embeddings that receive gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from aptdiff.constants import NULL_TOKEN, PAD_TOKEN, PLACEHOLDER
from aptdiff.sanitize import validate_caption_template, validate_token

logger = logging.getLogger(__name__)


class UnknownTokenError(ValueError):
    """Raised when a token string or id is not in the vocabulary."""


class MissingPlaceholderError(ValueError):
    """Raised when a caption template lacks exactly one ``{}`` placeholder."""


class DuplicateIdentifierError(ValueError):
    """Raised when an identifier token is registered twice."""


class Vocabulary(nn.Module):
    """Ordered token set with per-token embeddings."""

    def __init__(
        self,
        tokens: list[str],
        token_dim: int,
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        words = list(dict.fromkeys([PAD_TOKEN, NULL_TOKEN, *tokens]))
        for w in words:
            validate_token(w)
        self._tokens: list[str] = words
        self._index: dict[str, int] = {w: i for i, w in enumerate(words)}
        self.token_dim = int(token_dim)
        self.weight = nn.Parameter(
            torch.randn(len(words), self.token_dim, generator=generator) * 0.5
        )
        self.identifier_weight = nn.Parameter(torch.zeros(0, self.token_dim))
        self.identifiers: dict[str, str] = {}

    # -- lookup -------------------------------------------------------------

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._index

    def token_id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnknownTokenError(f"Unknown token '{token}'") from None

    def encode(self, words: list[str], pad_to: int | None = None) -> list[int]:
        """Map token strings to ids, optionally right-padding with ``<pad>``."""
        ids = [self.token_id(w) for w in words]
        if pad_to is not None:
            if len(ids) > pad_to:
                raise ValueError(f"Caption has {len(ids)} tokens, limit is {pad_to}")
            ids += [self._index[PAD_TOKEN]] * (pad_to - len(ids))
        return ids

    def decode(self, ids: list[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self._tokens):
                raise UnknownTokenError(f"Unknown token id {i}")
            out.append(self._tokens[int(i)])
        return out

    def null_ids(self, length: int) -> list[int]:
        return [self._index[NULL_TOKEN]] * length

    def is_identifier(self, token: str) -> bool:
        return token in self.identifiers

    # -- identifiers --------------------------------------------------------

    def register_identifier(self, identifier: str, class_word: str) -> None:
        """Add ``identifier`` with an exact copy of ``class_word``'s embedding.

        Raises:
            DuplicateIdentifierError: If ``identifier`` already exists.
            UnknownTokenError: If ``class_word`` is not a known token.
        """
        validate_token(identifier)
        if identifier in self._index:
            raise DuplicateIdentifierError(f"Token '{identifier}' is already registered")
        class_id = self.token_id(class_word)
        if class_word in self.identifiers:
            raise ValueError(f"'{class_word}' is an identifier, not a class word")
        row = self.weight.detach()[class_id : class_id + 1].clone()
        merged = torch.cat([self.identifier_weight.detach(), row], dim=0)
        self.identifier_weight = nn.Parameter(merged)
        self._index[identifier] = len(self._tokens)
        self._tokens.append(identifier)
        self.identifiers[identifier] = class_word
        logger.debug("Registered identifier %s (class %s)", identifier, class_word)

    def freeze_base(self) -> None:
        """Freeze ordinary token rows; identifier rows stay trainable."""
        self.weight.requires_grad_(False)
        self.identifier_weight.requires_grad_(True)

    def trainable_params(self) -> list[nn.Parameter]:
        """Learned identifier embeddings (empty when none are registered)."""
        if not self.identifiers:
            return []
        return [self.identifier_weight]

    # -- embedding ----------------------------------------------------------

    @property
    def num_base(self) -> int:
        return self.weight.shape[0]

    def table(self) -> torch.Tensor:
        return torch.cat([self.weight, self.identifier_weight], dim=0)

    def embed(self, ids: torch.Tensor | list[int]) -> torch.Tensor:
        """Row-wise lookup: (..., L) ids -> (..., L, token_dim) embeddings."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() == 0:
            return torch.zeros(*ids.shape, self.token_dim, dtype=self.weight.dtype)
        if bool((ids < 0).any()) or bool((ids >= len(self._tokens)).any()):
            raise UnknownTokenError(f"Token ids out of range [0, {len(self._tokens)})")
        return self.table()[ids]

    # -- persistence --------------------------------------------------------

    def spec(self) -> dict:
        """Token list and identifier map (embeddings travel separately)."""
        base = self._tokens[: self.num_base]
        return {"tokens": base, "identifiers": dict(self.identifiers)}

    @classmethod
    def from_spec(
        cls,
        spec: dict,
        weight: torch.Tensor,
        identifier_weight: torch.Tensor,
    ) -> Vocabulary:
        vocab = cls(spec["tokens"], weight.shape[1])
        if vocab.tokens != list(spec["tokens"]):
            raise ValueError("Stored token list is not in canonical order")
        with torch.no_grad():
            vocab.weight.copy_(weight)
        for identifier, class_word in spec["identifiers"].items():
            vocab.register_identifier(identifier, class_word)
        if identifier_weight.shape != vocab.identifier_weight.shape:
            raise ValueError("Identifier embedding shape does not match identifier list")
        with torch.no_grad():
            vocab.identifier_weight.copy_(identifier_weight)
        return vocab


@dataclass(frozen=True)
class ConditioningPair:
    """Token-id sequences for one caption: with identifier, with class word,
    and the unconditional sequence used by guidance."""

    tokens_star: tuple[int, ...]
    tokens_class: tuple[int, ...]
    null_tokens: tuple[int, ...]
    placeholder_index: int


def fill_template(template: str, word: str) -> list[str]:
    """Split a template into words and substitute the placeholder."""
    return [word if w == PLACEHOLDER else w for w in template.split()]


def build_pair(
    caption_template: str,
    identifier: str,
    class_word: str,
    vocab: Vocabulary,
    pad_to: int | None = None,
) -> ConditioningPair:
    """Build c* and c from one template.

    Raises:
        MissingPlaceholderError: If the template does not contain exactly one
            ``{}`` placeholder word.
        UnknownTokenError: If any token (identifier included) is unknown.
    """
    try:
        validate_caption_template(caption_template)
    except ValueError as exc:
        raise MissingPlaceholderError(str(exc)) from None
    words = caption_template.split()
    position = words.index(PLACEHOLDER)
    star = vocab.encode(fill_template(caption_template, identifier), pad_to)
    plain = vocab.encode(fill_template(caption_template, class_word), pad_to)
    return ConditioningPair(
        tokens_star=tuple(star),
        tokens_class=tuple(plain),
        null_tokens=tuple(vocab.null_ids(len(star))),
        placeholder_index=position,
    )


def encode_caption(caption: str, vocab: Vocabulary, pad_to: int | None = None) -> list[int]:
    """Tokenize a literal caption (no placeholder) by whitespace."""
    words = caption.split()
    if not words:
        raise ValueError("Caption must not be empty")
    return vocab.encode(words, pad_to)


# ---------------------------------------------------------------------------
# Caption manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    image_path: Path
    caption_template: str
    class_word: str


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    """Parse a caption manifest.

    One record per line, three tab-separated fields:
    ``image path<TAB>caption template<TAB>class word``. Blank lines and lines
    starting with ``#`` are skipped. Relative image paths are resolved
    against the manifest's directory.
    """
    path = Path(path)
    records: list[ManifestRecord] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 3:
            raise ValueError(
                f"{path.name} line {lineno}: expected 3 tab-separated fields, "
                f"got {len(fields)}"
            )
        image, template, class_word = (f.strip() for f in fields)
        try:
            validate_caption_template(template)
            validate_token(class_word)
        except ValueError as exc:
            raise ValueError(f"{path.name} line {lineno}: {exc}") from None
        image_path = Path(image)
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        records.append(ManifestRecord(image_path, template, class_word))
    return records


def write_manifest(path: str | Path, records: list[ManifestRecord]) -> None:
    lines = ["# image\tcaption template\tclass word"]
    for r in records:
        lines.append(f"{r.image_path}\t{r.caption_template}\t{r.class_word}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
