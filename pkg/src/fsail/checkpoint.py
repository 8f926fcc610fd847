"""Parameter checkpoints as versioned JSON.

Layout::

    {"format": "fsail-params", "version": 1,
     "params": [{"name": str, "shape": [int, ...], "data": [float, ...]}, ...]}

Entries keep insertion order, so the same parameter dict always
serialises to the same bytes.  Floats round-trip exactly through
``repr``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "fsail-params"
VERSION = 1


class CheckpointError(Exception):
    pass


def params_to_record(params: Mapping[str, np.ndarray]) -> dict:
    entries = []
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "data": arr.reshape(-1).tolist()})
    return {"format": FORMAT, "version": VERSION, "params": entries}


def record_to_params(record: dict) -> dict[str, np.ndarray]:
    if record.get("format") != FORMAT:
        raise CheckpointError(f"not a parameter checkpoint: format={record.get('format')!r}")
    if record.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {record.get('version')!r}")
    out = {}
    for e in record["params"]:
        arr = np.asarray(e["data"], dtype=np.float64)
        shape = tuple(e["shape"])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{e['name']}: {arr.size} values for shape {shape}")
        out[e["name"]] = arr.reshape(shape)
    return out


def save_params(path, params: Mapping[str, np.ndarray]) -> None:
    """Write atomically so a concurrent reader never sees a partial file."""
    path = Path(path)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    tmp.write_text(json.dumps(params_to_record(params)))
    tmp.replace(path)


def load_params(path) -> dict[str, np.ndarray]:
    return record_to_params(json.loads(Path(path).read_text()))
