"""Self-describing checkpoint container.

Layout::

    UNIFACTOR-CKPT\\n
    <header length in bytes, decimal> <header SHA-256, hex>\\n
    <header: canonical JSON>
    <payload: concatenated little-endian tensor bytes>

The header holds ``format_version``, a config echo, free-form ``meta`` (which
may reference tensors), a tensor table ``[{name, dtype, shape, offset,
nbytes}]`` and the SHA-256 of the payload. Top-level trees are laid out in
sorted name order so encoding is canonical. Nested Python structures (e.g.
optimizer state) are stored as JSON trees whose leaves may be
``{"__tensor__": name}`` references; dicts are stored as ordered key/value
pairs so integer keys survive.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"UNIFACTOR-CKPT\n"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class _Writer:
    def __init__(self):
        self.table: list[dict] = []
        self.chunks: list[bytes] = []
        self.offset = 0
        self.names: set[str] = set()

    def add(self, name: str, t: torch.Tensor) -> dict:
        if name in self.names:
            raise ValueError(f"duplicate tensor name {name}")
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        self.table.append(
            {"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": self.offset, "nbytes": len(raw)}
        )
        self.chunks.append(raw)
        self.offset += len(raw)
        self.names.add(name)
        return {"__tensor__": name}

    def tree(self, prefix: str, obj: Any) -> Any:
        if isinstance(obj, torch.Tensor):
            return self.add(prefix, obj)
        if isinstance(obj, dict):
            return {"__dict__": [[k, self.tree(f"{prefix}/{k}", v)] for k, v in obj.items()]}
        if isinstance(obj, tuple):
            return {"__tuple__": [self.tree(f"{prefix}/{i}", v) for i, v in enumerate(obj)]}
        if isinstance(obj, list):
            return [self.tree(f"{prefix}/{i}", v) for i, v in enumerate(obj)]
        if obj is None or isinstance(obj, (bool, int, float, str)):
            return obj
        raise TypeError(f"cannot serialise {type(obj).__name__} at {prefix}")


def _restore_tree(obj: Any, tensors: dict[str, torch.Tensor]) -> Any:
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        if "__dict__" in obj:
            return {k: _restore_tree(v, tensors) for k, v in obj["__dict__"]}
        if "__tuple__" in obj:
            return tuple(_restore_tree(v, tensors) for v in obj["__tuple__"])
        return {k: _restore_tree(v, tensors) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore_tree(v, tensors) for v in obj]
    return obj


def encode(config: dict, meta: dict, trees: dict[str, Any]) -> bytes:
    """Serialise ``trees`` (name -> nested structure with tensors) to bytes."""
    w = _Writer()
    stored = {name: w.tree(name, trees[name]) for name in sorted(trees)}
    payload = b"".join(w.chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "meta": meta,
        "trees": stored,
        "tensors": w.table,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    digest = hashlib.sha256(head).hexdigest().encode()
    return MAGIC + str(len(head)).encode() + b" " + digest + b"\n" + head + payload


def decode(data: bytes) -> tuple[dict, dict, dict[str, Any]]:
    """Inverse of :func:`encode`. Validates everything before building tensors."""
    if not data.startswith(MAGIC):
        raise CheckpointError("magic", "not a checkpoint file")
    rest = data[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl <= 0:
        raise CheckpointError("header_length", "missing or truncated")
    parts = rest[:nl].split(b" ")
    if len(parts) != 2:
        raise CheckpointError("header_length", "expected '<length> <sha256>'")
    try:
        hlen = int(parts[0])
    except ValueError:
        raise CheckpointError("header_length", "not an integer") from None
    body = rest[nl + 1:]
    if len(body) < hlen:
        raise CheckpointError("header", f"truncated: need {hlen} bytes, have {len(body)}")
    if hashlib.sha256(body[:hlen]).hexdigest().encode() != parts[1]:
        raise CheckpointError("header_sha256", "header hash mismatch")
    try:
        header = json.loads(body[:hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("header", f"corrupt JSON ({e})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError("format_version", f"expected {FORMAT_VERSION}, found {version}")
    payload = body[hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError("payload_bytes", f"expected {header.get('payload_bytes')}, found {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("payload_sha256", "payload hash mismatch")
    tensors = {}
    for entry in header["tensors"]:
        dtype = _TORCH.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"tensors.{entry['name']}.dtype", f"unknown dtype {entry['dtype']}")
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        np_dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(chunk, dtype=np_dtype).astype(np_dtype.newbyteorder("="))
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).reshape(entry["shape"])
    trees = {name: _restore_tree(obj, tensors) for name, obj in header["trees"].items()}
    return header["config"], header["meta"], trees


def write_atomic(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_file(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError("path", f"cannot read {path}: {e}") from None
