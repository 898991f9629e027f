"""Named-tensor checkpoint container.

Layout::

    b"DRCKPT\\0\\0"                 8-byte magic
    uint64 little-endian            header length in bytes
    header                          UTF-8 JSON: {"format_version", "tensors", "meta"}
    payload                         concatenated little-endian float64 tensors

Each entry of ``tensors`` is ``{"name", "shape", "offset"}`` with ``offset``
counted in float64 elements from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import DataError
from .nn import ParamStore

MAGIC = b"DRCKPT\0\0"
FORMAT_VERSION = 1


def save_tensors(path, tensors: Dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in sorted(tensors):
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


def load_tensors(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {path}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format_version {header.get('format_version')}")
    payload = np.frombuffer(raw, dtype="<f8", offset=16 + hlen)
    out = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = payload[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return out, header.get("meta", {})


def save_params(path, params: ParamStore, meta: dict | None = None) -> None:
    """Parameters plus Adam moments; the optimizer step goes into ``meta``."""
    tensors = {f"param/{k}": v for k, v in params.items()}
    tensors.update({f"adam_m/{k}": v for k, v in params.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in params.v.items()})
    meta = dict(meta or {})
    meta["adam_step"] = params.step
    save_tensors(path, tensors, meta)


def load_params(path) -> Tuple[ParamStore, dict]:
    tensors, meta = load_tensors(path)
    ps = ParamStore()
    for k, v in tensors.items():
        kind, _, name = k.partition("/")
        if kind == "param":
            ps[name] = v
        elif kind == "adam_m":
            ps.m[name] = v
        elif kind == "adam_v":
            ps.v[name] = v
    ps.step = int(meta.get("adam_step", 0))
    return ps, meta
