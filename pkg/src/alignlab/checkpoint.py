"""Named-tensor checkpoint archive.

A checkpoint is a directory holding:
  manifest.json  -- tensor index ({name, shape, dtype, byte_offset, frozen})
                    plus stage metadata, config hash, step and RNG state
  tensors.bin    -- concatenated little-endian float32 buffers, manifest order

Tensors are written sorted by name so save(load(dir)) is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
TENSORS = "tensors.bin"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    frozen: dict[str, bool]
    meta: dict = field(default_factory=dict)

    def require(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        return self.tensors[name]


def save_checkpoint(
    out_dir: str | Path,
    tensors: dict[str, np.ndarray],
    frozen: dict[str, bool],
    meta: dict,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        # np.ascontiguousarray would promote 0-d tensors to 1-d; asarray +
        # tobytes keeps scalar shapes intact in the manifest.
        arr = np.asarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        index.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "byte_offset": offset,
                "frozen": bool(frozen.get(name, False)),
            }
        )
        offset += len(blob)
        blobs.append(blob)
    manifest = dict(meta)
    manifest["tensors"] = index
    (out / TENSORS).write_bytes(b"".join(blobs))
    (out / MANIFEST).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return out


def load_checkpoint(ckpt_dir: str | Path) -> Checkpoint:
    path = Path(ckpt_dir)
    manifest_path = path / MANIFEST
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    raw = (path / TENSORS).read_bytes()
    tensors: dict[str, np.ndarray] = {}
    frozen: dict[str, bool] = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "f32":
            raise CheckpointError(f"unsupported dtype {entry['dtype']!r} for {entry['name']!r}")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["byte_offset"]
        end = start + 4 * count
        if end > len(raw):
            raise CheckpointError(f"tensor {entry['name']!r} overruns tensors.bin")
        arr = np.frombuffer(raw[start:end], dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
        frozen[entry["name"]] = bool(entry["frozen"])
    meta = {k: v for k, v in manifest.items() if k != "tensors"}
    return Checkpoint(tensors=tensors, frozen=frozen, meta=meta)


def checkpoint_hash(ckpt_dir: str | Path) -> str:
    """SHA-256 over manifest and tensor bytes; stable id for a checkpoint."""
    path = Path(ckpt_dir)
    h = hashlib.sha256()
    h.update((path / MANIFEST).read_bytes())
    h.update((path / TENSORS).read_bytes())
    return h.hexdigest()


def tensor_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(arr, dtype="<f4").tobytes()).hexdigest()
