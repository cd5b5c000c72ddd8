"""Named-tensor container: a JSON header plus raw little-endian float32 payloads.

Layout::

    b"RMXC" | u16 version | u32 header_len | header (UTF-8 JSON) | payload

The header holds free-form metadata and an ordered tensor index
``[{"name", "shape", "offset"}]``; offsets are relative to the payload start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from advunmix.errors import FormatError, IncompatibleCheckpointError, LengthError

MAGIC = b"RMXC"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def encode(meta: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> bytes:
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(np.asarray(t), dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta, "tensors": index, "payload_bytes": offset},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def decode(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < _PREFIX.size:
        raise LengthError("checkpoint truncated inside prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise IncompatibleCheckpointError(f"checkpoint version {version}, this build reads {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise LengthError("checkpoint truncated inside header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint header: {e}") from None
    if len(raw) - start != header["payload_bytes"]:
        raise LengthError(f"checkpoint payload is {len(raw) - start} bytes, "
                          f"header says {header['payload_bytes']}")
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start + entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return header["meta"], tensors


def save(path: str | Path, meta: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> None:
    data = encode(meta, tensors)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
