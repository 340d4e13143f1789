"""Named-tensor checkpoint format.

Layout: a magic line, one line of JSON manifest, then the little-endian
float64 payload.  Each manifest entry records name, shape and byte offset
into the payload.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import Tensor

MAGIC = b"RICLPARAMS 1\n"


def dumps_params(params: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":"))
    return MAGIC + header.encode() + b"\n" + b"".join(chunks)


def loads_params(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not blob.startswith(MAGIC):
        raise ValueError("not a parameter file (bad magic)")
    rest = blob[len(MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    payload = rest[nl + 1:]
    out = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out, header.get("meta", {})


def save_params(path: str | Path, params: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_params(params, meta))


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        return loads_params(path.read_bytes())
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
