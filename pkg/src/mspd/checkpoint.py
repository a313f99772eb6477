"""Parameter checkpoints: a JSON manifest next to a raw little-endian buffer.

Layout for a checkpoint stem ``run/ckpt``::

    run/ckpt.json   {"format": "mspd-checkpoint", "version": 1,
                     "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...],
                     "metadata": {...}}
    run/ckpt.bin    tensors concatenated in manifest order, C order, little endian

dtype strings are numpy codes with explicit byte order (``"<f8"``, ``"<f4"``).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "mspd-checkpoint"
VERSION = 1


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_checkpoint(stem, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> Path:
    """Write ``arrays`` (name -> ndarray) and return the manifest path."""
    manifest_path, buffer_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(buffer_path, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            fh.write(raw)
            entries.append(
                {"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)}
            )
            offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "buffer": buffer_path.name, "tensors": entries,
                "metadata": metadata or {}}
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


def load_checkpoint(stem) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns ``(arrays, metadata)`` with arrays in manifest order."""
    manifest_path, _ = _paths(stem)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path} is not a {FORMAT} manifest")
    raw = (manifest_path.parent / manifest["buffer"]).read_bytes()
    arrays = {}
    for e in manifest["tensors"]:
        if e["offset"] + e["nbytes"] > len(raw):
            raise ValueError(f"checkpoint buffer truncated at tensor '{e['name']}'")
        dt = np.dtype(e["dtype"])
        arr = np.frombuffer(raw, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
    return arrays, manifest.get("metadata", {})
