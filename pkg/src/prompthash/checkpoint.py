"""Parameter checkpoints: one little-endian float64 blob plus a JSON index."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

INDEX_VERSION = 1


def save_parameters(state: Mapping[str, torch.Tensor], path: str | Path, metadata: Mapping[str, Any] | None = None) -> Path:
    """Write ``<path>.bin`` and ``<path>.json``; returns the index path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, tensor in state.items():
            arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                            "dtype": str(tensor.dtype).removeprefix("torch.")})
            offset += arr.nbytes
    index = {"version": INDEX_VERSION, "tensors": entries, "metadata": dict(metadata or {})}
    index_path = path.with_suffix(".json")
    index_path.write_text(json.dumps(index, indent=2))
    return index_path


def load_parameters(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    """Read a checkpoint back; tensors come back in their saved dtype."""
    path = Path(path)
    index = json.loads(path.with_suffix(".json").read_text())
    if index.get("version") != INDEX_VERSION:
        raise ValueError(f"unsupported checkpoint version {index.get('version')}")
    blob = path.with_suffix(".bin").read_bytes()
    state = {}
    for e in index["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy()).to(getattr(torch, e["dtype"]))
    return state, index["metadata"]
