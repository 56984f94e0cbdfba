"""Checkpoint, hashing and manifest helpers shared by all stages."""

from __future__ import annotations

import hashlib
import io
import json
import os
import sys
from pathlib import Path
from typing import Any

import torch

from .errors import DataError


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_json(path: str | Path, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _canonical(obj: Any) -> Any:
    # pickle memoises by object identity; interning strings makes the byte
    # stream depend only on values, so resumed runs serialise identically
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        out = type(obj)((_canonical(k), _canonical(v)) for k, v in obj.items())
        if hasattr(obj, "_metadata"):  # state_dict version info
            out._metadata = _canonical(obj._metadata)
        return out
    if isinstance(obj, (list, tuple)) and not hasattr(obj, "_fields"):
        return type(obj)(_canonical(v) for v in obj)
    return obj


def save_torch(path: str | Path, obj: Any) -> None:
    buf = io.BytesIO()
    torch.save(_canonical(obj), buf)
    atomic_write_bytes(path, buf.getvalue())


def load_torch(path: str | Path) -> Any:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupted or foreign file
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def param_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in registration order."""
    h = hashlib.sha256()
    for name, t in list(module.named_parameters()) + list(module.named_buffers()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def write_manifest(out_dir: str | Path, command: str, config: dict, config_hash: str,
                   inputs: dict[str, str], artifacts: list[str | Path]) -> Path:
    out_dir = Path(out_dir)
    record = {
        "command": command,
        "config_hash": config_hash,
        "config": config,
        "inputs": inputs,
        "artifacts": {str(Path(p).relative_to(out_dir)) if Path(p).is_relative_to(out_dir) else str(p):
                      sha256_file(p) for p in artifacts if Path(p).is_file()},
    }
    path = out_dir / "manifest.json"
    write_json(path, record)
    return path
