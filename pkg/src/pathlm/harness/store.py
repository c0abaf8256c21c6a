"""Content-addressed checkpoint blobs on the local filesystem.

Blob layout: a text manifest (one "name shape offset" line per tensor,
offsets in bytes into the payload) followed by the packed little-endian
float64 payload. The ref is the sha256 of the whole blob, so identical
trees produced by retried tasks land on the same file; writes are
write-once and atomic.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np

from ..tree import ParamTree

_MAGIC = b"pathlm-ckpt 1\n"


def pack_tree(tree: ParamTree) -> bytes:
    manifest_lines = []
    payload = bytearray()
    for name, arr in tree.items():
        if " " in name:
            raise ValueError(f"tensor name {name!r} may not contain spaces")
        arr = np.asarray(arr, dtype=np.float64)
        shape = ",".join(str(d) for d in arr.shape) or "-"  # "-" marks a 0-d scalar
        manifest_lines.append(f"{name} {shape} {len(payload)}")
        payload.extend(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = _MAGIC + f"{len(manifest_lines)}\n".encode()
    header += ("\n".join(manifest_lines) + "\n").encode() if manifest_lines else b""
    return header + b"end\n" + bytes(payload)


def unpack_tree(blob: bytes) -> ParamTree:
    if not blob.startswith(_MAGIC):
        raise ValueError("not a checkpoint blob")
    rest = blob[len(_MAGIC):]
    count_line, rest = rest.split(b"\n", 1)
    n = int(count_line)
    entries = []
    for _ in range(n):
        line, rest = rest.split(b"\n", 1)
        name, shape_s, offset_s = line.decode().split(" ")
        shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
        entries.append((name, shape, int(offset_s)))
    end_line, payload = rest.split(b"\n", 1)
    if end_line != b"end":
        raise ValueError("corrupt checkpoint manifest")
    out: ParamTree = {}
    for name, shape, offset in entries:
        size = int(np.prod(shape)) if shape else 1
        raw = payload[offset : offset + size * 8]
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return out


class CheckpointStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, ref: str) -> Path:
        return self.root / ref[:2] / ref[2:]

    def put(self, tree: ParamTree) -> str:
        blob = pack_tree(tree)
        ref = hashlib.sha256(blob).hexdigest()
        path = self._path(ref)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(blob)
            os.replace(tmp, path)
        return ref

    def get(self, ref: str) -> ParamTree:
        path = self._path(ref)
        if not path.exists():
            raise KeyError(f"checkpoint {ref} not found")
        return unpack_tree(path.read_bytes())

    def exists(self, ref: str) -> bool:
        return self._path(ref).exists()
