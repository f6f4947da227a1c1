"""Tensor archive: ``manifest.txt`` of (name, shape) plus one little-endian float64 blob per tensor."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

MANIFEST = "manifest.txt"


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".bin"


def save_tensors(directory, tensors: Mapping[str, np.ndarray]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        shape = ",".join(str(n) for n in arr.shape)
        lines.append(f"{name}\t{shape}")
        (d / _blob_name(name)).write_bytes(np.ascontiguousarray(arr).tobytes())
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    return d


def load_tensors(directory) -> dict[str, np.ndarray]:
    d = Path(directory)
    manifest = d / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    out = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, shape_txt = line.split("\t")
        shape = tuple(int(s) for s in shape_txt.split(",") if s)
        raw = (d / _blob_name(name)).read_bytes()
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise ValueError(f"{name}: blob has {arr.size} values, manifest says {shape}")
        out[name] = arr.reshape(shape)
    return out
