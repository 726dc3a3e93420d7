"""Directory checkpoint format shared by every trainable or frozen component.

A checkpoint is a directory holding ``manifest.json`` and ``params.bin``.
``params.bin`` is the concatenation of every tensor as little-endian float32,
in manifest order. The manifest records, per tensor, its name, kind, layer
index, shape, dtype, byte offset and byte length, plus free-form metadata
(spec echo, RNG seed, ...).
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

FORMAT = "hypernst-ckpt/1"
MANIFEST = "manifest.json"
PARAMS = "params.bin"


class CheckpointError(RuntimeError):
    pass


def _as_f32_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
    return arr.astype("<f4", copy=False).tobytes()


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], meta: dict | None = None,
                    layer_info: Mapping[str, tuple[str, int]] | None = None) -> Path:
    """Write ``tensors`` to ``path``. ``layer_info`` maps a tensor name to (kind, index)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layer_info = layer_info or {}
    entries = []
    offset = 0
    with open(path / PARAMS, "wb") as fh:
        for name, t in tensors.items():
            blob = _as_f32_bytes(t)
            kind, index = layer_info.get(name, (name.split(".", 1)[0], -1))
            entries.append({
                "name": name,
                "kind": kind,
                "index": int(index),
                "shape": list(t.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": len(blob),
            })
            fh.write(blob)
            offset += len(blob)
    manifest = {"format": FORMAT, "total_bytes": offset, "tensors": entries, "meta": meta or {}}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=False))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no {MANIFEST} in {path}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    manifest = read_manifest(path)
    raw = (path / PARAMS).read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise CheckpointError(
            f"{path}: params.bin holds {len(raw)} bytes, manifest says {manifest['total_bytes']}")
    tensors = {}
    for e in manifest["tensors"]:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, manifest


def state_hash(tensors: Mapping[str, torch.Tensor]) -> str:
    """sha256 over names and float32 bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(_as_f32_bytes(tensors[name]))
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return state_hash(module.state_dict())


def directory_hash(path) -> str:
    """Hash of a checkpoint tree: every manifest and params file, path-sorted."""
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name in (MANIFEST, PARAMS)):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()
