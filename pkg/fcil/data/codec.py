"""Named-tensor binary format shared by round messages, checkpoints and memory snapshots.

Layout (all integers little-endian):
    u32  header length H
    H    UTF-8 JSON header; carries caller fields plus "names" and "shapes"
    per tensor, in header order:
        u64  payload length in bytes
        ...  float32 little-endian values, row-major
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np
import torch

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_RESERVED = ("names", "shapes")


class CodecError(ValueError):
    """Raised for malformed or truncated named-tensor blobs."""


def encode_tensors(header: Mapping[str, Any], tensors: Mapping[str, torch.Tensor]) -> bytes:
    clash = [key for key in _RESERVED if key in header]
    if clash:
        raise CodecError(f"header keys {clash} are reserved")
    full = dict(header)
    full["names"] = list(tensors)
    full["shapes"] = [list(t.shape) for t in tensors.values()]
    head = json.dumps(full, sort_keys=True).encode("utf-8")

    parts = [_U32.pack(len(head)), head]
    for t in tensors.values():
        raw = t.detach().to("cpu", torch.float32).contiguous().numpy().astype("<f4").tobytes()
        parts += [_U64.pack(len(raw)), raw]
    return b"".join(parts)


def decode_tensors(blob: bytes) -> tuple[dict[str, Any], OrderedDict[str, torch.Tensor]]:
    """Inverse of `encode_tensors`; returns (header without reserved keys, tensors)."""
    view = memoryview(blob)
    if len(view) < _U32.size:
        raise CodecError("blob shorter than its length prefix")
    (head_len,) = _U32.unpack_from(view, 0)
    offset = _U32.size + head_len
    if len(view) < offset:
        raise CodecError(f"header declares {head_len} bytes, blob has {len(view) - _U32.size}")
    try:
        header = json.loads(bytes(view[_U32.size : offset]).decode("utf-8"))
        names, shapes = header.pop("names"), header.pop("shapes")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
        raise CodecError(f"unreadable header: {e}") from e

    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, shape in zip(names, shapes):
        if len(view) < offset + _U64.size:
            raise CodecError(f"truncated before tensor {name!r}")
        (size,) = _U64.unpack_from(view, offset)
        offset += _U64.size
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if size != expected or len(view) < offset + size:
            raise CodecError(f"tensor {name!r}: expected {expected} bytes, found {size}")
        values = np.frombuffer(view[offset : offset + size], dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(values.astype(np.float32))
        offset += size
    if offset != len(view):
        raise CodecError(f"{len(view) - offset} trailing bytes after the last tensor")
    return header, tensors


def write_tensor_file(path: str | Path, header: Mapping[str, Any], tensors: Mapping[str, torch.Tensor]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_tensors(header, tensors))
    return target


def read_tensor_file(path: str | Path) -> tuple[dict[str, Any], OrderedDict[str, torch.Tensor]]:
    return decode_tensors(Path(path).read_bytes())
