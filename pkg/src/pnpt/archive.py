"""Tensor archive shared by backbone checkpoints, normality pools and model checkpoints.

The on-disk layout is the safetensors format: an 8-byte little-endian header
length, a JSON header mapping every tensor name to ``{dtype, shape,
data_offsets}``, then the raw little-endian tensor bytes.  The reserved
``__metadata__`` header entry carries string values only; PNPT stores a single
key ``pnpt`` holding a JSON document with ``format_version``, ``kind`` and
kind-specific fields.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

FORMAT_VERSION = 1


class ArchiveError(RuntimeError):
    """Raised for unreadable, truncated or incompatible archives."""


def save_archive(path, tensors: dict[str, torch.Tensor], kind: str, meta: dict | None = None) -> None:
    header = {"format_version": FORMAT_VERSION, "kind": kind, **(meta or {})}
    tensors = {k: v.detach().contiguous().cpu() for k, v in tensors.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(tensors, str(tmp), metadata={"pnpt": json.dumps(header, sort_keys=True)})
    os.replace(tmp, path)


def read_metadata(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ArchiveError(f"archive not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) < 8:
            raise ArchiveError(f"corrupt archive {path}: missing header length")
        n = int.from_bytes(raw, "little")
        if n <= 0 or n > path.stat().st_size - 8:
            raise ArchiveError(f"corrupt archive {path}: bad header length {n}")
        try:
            header = json.loads(fh.read(n))
            return json.loads(header["__metadata__"]["pnpt"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ArchiveError(f"corrupt archive {path}: unreadable header") from exc


def load_archive(path, kind: str) -> tuple[dict[str, torch.Tensor], dict]:
    meta = read_metadata(path)
    if meta.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(
            f"{path}: format_version {meta.get('format_version')} != supported {FORMAT_VERSION}"
        )
    if meta.get("kind") != kind:
        raise ArchiveError(f"{path}: expected a {kind!r} archive, found {meta.get('kind')!r}")
    try:
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise ArchiveError(f"corrupt archive {path}: {exc}") from exc
    return tensors, meta
