"""Parameter checkpoints: ``<stem>.json`` manifest + ``<stem>.bin`` raw data.

The binary file is the concatenation of every array (``W1, b1, ..., Wm, bm``)
as little-endian float64, C order. The manifest lists each array's name,
shape and byte offset, plus free-form provenance.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DimensionError, SchemaError
from .nn import ModelParams

FORMAT = "equifl-params"
VERSION = 1
DTYPE = "<f8"


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def save_params(stem: str | Path, params: ModelParams, provenance: dict | None = None) -> tuple[Path, Path]:
    json_path, bin_path = _paths(stem)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with bin_path.open("wb") as fh:
        for i, layer in enumerate(params):
            for kind, arr in (("weights", layer.weights), ("bias", layer.bias)):
                raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
                fh.write(raw)
                entries.append({"name": f"layers.{i}.{kind}", "shape": list(arr.shape), "offset": offset})
                offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": DTYPE,
        "data_file": bin_path.name,
        "total_bytes": offset,
        "arrays": entries,
        "provenance": provenance or {},
    }
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return json_path, bin_path


def load_params(stem: str | Path) -> tuple[ModelParams, dict]:
    """Inverse of :func:`save_params`; returns ``(params, manifest)``."""
    json_path, bin_path = _paths(stem)
    manifest = json.loads(json_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT or manifest.get("dtype") != DTYPE:
        raise SchemaError(f"{json_path}: not an {FORMAT} manifest")
    blob = bin_path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise DimensionError(f"{bin_path}: expected {manifest['total_bytes']} bytes, found {len(blob)}")
    arrays = []
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=DTYPE, count=count, offset=e["offset"]).reshape(e["shape"])
        arrays.append(arr.astype(np.float64))
    return ModelParams.from_arrays(arrays), manifest
