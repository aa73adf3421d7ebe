"""Checkpoint directories: a JSON manifest plus one raw little-endian tensor file
per parameter. Generators, feature extractors, and verification models share
the layout; `meta` carries whatever the owner needs to rebuild the module.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}

MANIFEST_NAME = "manifest.json"


def save_checkpoint(module: torch.nn.Module, path: str | Path, kind: str, meta: dict | None = None) -> Path:
    """Write a module's state dict as manifest.json + t####.bin tensor files."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    for i, (name, tensor) in enumerate(module.state_dict().items()):
        arr = tensor.detach().cpu().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {dtype} for {name}")
        fname = f"t{i:04d}.bin"
        arr.astype(_DTYPES[dtype]).tofile(path / fname)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "file": fname})
    manifest = {
        "kind": kind,
        "stages": [name for name, _ in module.named_children()],
        "meta": meta or {},
        "tensors": tensors,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(path: str | Path) -> dict:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    return json.loads(manifest_path.read_text())


def load_state_dict(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read a checkpoint directory back into a state dict; returns (state, manifest)."""
    path = Path(path)
    manifest = read_manifest(path)
    state = {}
    for entry in manifest["tensors"]:
        raw = np.fromfile(path / entry["file"], dtype=_DTYPES[entry["dtype"]])
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if raw.size != expected:
            raise ValueError(f"tensor {entry['name']}: {raw.size} values on disk, expected {expected}")
        arr = raw.reshape(entry["shape"]).astype(entry["dtype"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    return state, manifest


def state_digest(module: torch.nn.Module) -> str:
    """SHA-256 over all state-dict tensors, in name order; detects any mutation."""
    h = hashlib.sha256()
    for name in sorted(module.state_dict()):
        tensor = module.state_dict()[name]
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def git_blob_digest(path: str | Path) -> str:
    """Content digest in git blob form: sha1('blob <len>\\0' + bytes)."""
    data = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
