"""Versioned checkpoint files and a small on-disk checkpoint store.

A checkpoint carries the network architecture, the base weights, the
vocabulary, and (for personalized runs) the adapter factors and identifier
embeddings. Stores keep one ``.pt`` file per checkpoint alongside a JSON
index in the store directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch

from aptdiff.cond import Vocabulary
from aptdiff.sanitize import safe_path, validate_name
from aptdiff.tinynet import NetConfig, TinyUNet, build_net

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "aptdiff-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointMismatchError(ValueError):
    """Raised when a checkpoint does not match the expected format or architecture."""


@dataclass
class Checkpoint:
    net_config: NetConfig
    vocab_spec: dict
    base: dict[str, torch.Tensor]
    vocab_weight: torch.Tensor
    adapter_rank: int = 0
    adapter_alpha: float = 0.0
    adapters: dict[str, torch.Tensor] = field(default_factory=dict)
    identifier_weight: torch.Tensor | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def has_adapters(self) -> bool:
        return self.adapter_rank > 0 and bool(self.adapters)

    @property
    def step(self) -> int:
        return int(self.metadata.get("step", 0))

    @classmethod
    def from_model(
        cls, net: TinyUNet, vocab: Vocabulary, metadata: dict | None = None
    ) -> Checkpoint:
        """Snapshot ``net`` and ``vocab`` (tensors are cloned)."""
        layers = net.lora_layers()
        return cls(
            net_config=net.config,
            vocab_spec=vocab.spec(),
            base={k: v.detach().clone() for k, v in net.base_state_dict().items()},
            vocab_weight=vocab.weight.detach().clone(),
            adapter_rank=net.adapter_rank,
            adapter_alpha=layers[0][1].alpha if layers else 0.0,
            adapters={k: v.detach().clone() for k, v in net.adapter_state_dict().items()},
            identifier_weight=vocab.identifier_weight.detach().clone(),
            metadata=dict(metadata or {}),
        )

    def build(self) -> tuple[TinyUNet, Vocabulary]:
        """Reconstruct the network and vocabulary this checkpoint describes."""
        net = build_net(self.net_config)
        if self.adapter_rank:
            net.attach_adapters(self.adapter_rank, self.adapter_alpha)
        missing, unexpected = net.load_state_dict({**self.base, **self.adapters}, strict=False)
        if missing or unexpected:
            raise CheckpointMismatchError(
                f"Checkpoint weights do not fit the network: missing={missing[:5]}, "
                f"unexpected={unexpected[:5]}"
            )
        identifier_weight = self.identifier_weight
        if identifier_weight is None:
            identifier_weight = torch.zeros(0, self.vocab_weight.shape[1])
        vocab = Vocabulary.from_spec(self.vocab_spec, self.vocab_weight, identifier_weight)
        return net, vocab

    def to_payload(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "net_config": self.net_config.to_dict(),
            "vocab": self.vocab_spec,
            "base": self.base,
            "vocab_weight": self.vocab_weight,
            "adapter_rank": self.adapter_rank,
            "adapter_alpha": self.adapter_alpha,
            "adapters": self.adapters,
            "identifier_weight": self.identifier_weight,
            "metadata": self.metadata,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> Checkpoint:
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointMismatchError("Not an aptdiff checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointMismatchError(
                f"Unsupported checkpoint version {payload.get('version')} "
                f"(expected {CHECKPOINT_VERSION})"
            )
        return cls(
            net_config=NetConfig.from_dict(payload["net_config"]),
            vocab_spec=payload["vocab"],
            base=payload["base"],
            vocab_weight=payload["vocab_weight"],
            adapter_rank=int(payload["adapter_rank"]),
            adapter_alpha=float(payload["adapter_alpha"]),
            adapters=payload["adapters"],
            identifier_weight=payload["identifier_weight"],
            metadata=payload["metadata"],
        )


def _atomic_torch_save(obj: object, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """Write ``checkpoint`` atomically (tmp file + rename)."""
    path = Path(path)
    _atomic_torch_save(checkpoint.to_payload(), path)
    logger.debug("Wrote checkpoint %s", path.name)
    return path


def load_checkpoint(
    path: str | Path, expected_config: NetConfig | None = None
) -> Checkpoint:
    """Read a checkpoint file.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        CheckpointMismatchError: On unknown format/version, or when the stored
            architecture differs from ``expected_config``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    checkpoint = Checkpoint.from_payload(payload)
    if expected_config is not None and checkpoint.net_config != expected_config:
        raise CheckpointMismatchError(
            f"Checkpoint architecture {checkpoint.net_config.to_dict()} "
            f"does not match expected {expected_config.to_dict()}"
        )
    return checkpoint


def base_checksum(net: TinyUNet, vocab: Vocabulary) -> str:
    """sha256 over base network weights and base token embeddings."""
    digest = hashlib.sha256()
    state = net.base_state_dict()
    for key in sorted(state):
        digest.update(key.encode())
        digest.update(state[key].detach().cpu().contiguous().numpy().tobytes())
    digest.update(vocab.weight.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class CheckpointStore:
    """Save, load, list and delete named checkpoints under one directory."""

    def __init__(self, base_dir: Path) -> None:
        self._base_dir = Path(base_dir)
        self._index: dict | None = None

    @property
    def base_dir(self) -> Path:
        return self._base_dir

    # -- internal helpers ---------------------------------------------------

    @property
    def _index_path(self) -> Path:
        return self._base_dir / "index.json"

    def _load_index(self) -> dict:
        if self._index is not None:
            return self._index
        if self._index_path.exists():
            self._index = json.loads(self._index_path.read_text(encoding="utf-8"))
        else:
            self._index = {}
        return self._index

    def _flush_index(self) -> None:
        self._base_dir.mkdir(parents=True, exist_ok=True)
        tmp = self._index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self._index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self._index_path)

    # -- public API ---------------------------------------------------------

    def path(self, name: str) -> Path:
        validate_name(name)
        return safe_path(self._base_dir, f"{name}.pt")

    def save(self, name: str, checkpoint: Checkpoint) -> Path:
        """Write ``checkpoint`` as ``<name>.pt``; overwrites an existing entry."""
        file_path = save_checkpoint(checkpoint, self.path(name))
        index = self._load_index()
        index[name] = {
            "step": checkpoint.step,
            "kind": checkpoint.metadata.get("kind", "unknown"),
            "adapter_rank": checkpoint.adapter_rank,
        }
        self._flush_index()
        return file_path

    def load(self, name: str, expected_config: NetConfig | None = None) -> Checkpoint:
        """Raises ``KeyError`` if the checkpoint does not exist."""
        index = self._load_index()
        if name not in index:
            raise KeyError(f"Checkpoint '{name}' not found")
        file_path = self.path(name)
        if not file_path.exists():
            raise KeyError(f"Checkpoint '{name}' index entry exists but file is missing")
        return load_checkpoint(file_path, expected_config)

    def list_checkpoints(self) -> list[dict]:
        """Summaries ordered by step, then name."""
        index = self._load_index()
        entries = [{"name": name, **entry} for name, entry in index.items()]
        return sorted(entries, key=lambda e: (e["step"], e["name"]))

    def latest(self) -> str | None:
        entries = self.list_checkpoints()
        return entries[-1]["name"] if entries else None

    def delete(self, name: str) -> None:
        """Raises ``KeyError`` if the checkpoint does not exist."""
        index = self._load_index()
        if name not in index:
            raise KeyError(f"Checkpoint '{name}' not found")
        file_path = self.path(name)
        if file_path.exists():
            file_path.unlink()
        del index[name]
        self._flush_index()
