"""Minimal float32-only safetensors reader/writer.

Layout: an 8-byte little-endian header length N, N bytes of JSON mapping
tensor name -> {"dtype", "shape", "data_offsets"}, then the raw buffer.
Offsets are relative to the start of the buffer.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METADATA_KEY = "__metadata__"
MAX_HEADER = 100 * 1024 * 1024


class TensorFileError(ValueError):
    pass


class MalformedHeaderError(TensorFileError):
    pass


class TruncatedError(TensorFileError):
    pass


class OffsetOverlapError(TensorFileError):
    pass


class UnknownDtypeError(TensorFileError):
    pass


@dataclass
class TensorFile:
    tensors: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensors(tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> bytes:
    header: dict[str, object] = {}
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        if name == METADATA_KEY:
            raise ValueError(f"{METADATA_KEY!r} is reserved")
        arr = np.asarray(tensors[name])
        if arr.dtype != np.float32:
            raise UnknownDtypeError(f"tensor {name!r} has dtype {arr.dtype}; only float32 is supported")
        raw = np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes()
        header[name] = {"dtype": "F32", "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob += b" " * (-len(blob) % 8)
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def save_tensors(tensors, path, metadata: dict[str, str] | None = None) -> None:
    if isinstance(tensors, TensorFile):
        tensors, metadata = tensors.tensors, metadata or tensors.metadata
    atomic_write(path, encode_tensors(tensors, metadata))


def _no_dupes(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise MalformedHeaderError(f"duplicate key {k!r} in header")
        out[k] = v
    return out


def decode_tensors(data: bytes) -> TensorFile:
    if len(data) < 8:
        raise TruncatedError("file shorter than the 8-byte header length prefix")
    (n,) = struct.unpack("<Q", data[:8])
    if n > MAX_HEADER:
        raise MalformedHeaderError(f"header length {n} exceeds limit")
    if 8 + n > len(data):
        raise TruncatedError(f"header length {n} runs past end of file ({len(data)} bytes)")
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"), object_pairs_hook=_no_dupes)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")

    buf = memoryview(data)[8 + n :]
    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise MalformedHeaderError("__metadata__ must map strings to strings")

    spans = []
    for name, info in header.items():
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise MalformedHeaderError(f"entry {name!r} must have exactly dtype, shape, data_offsets")
        shape, offs = info["shape"], info["data_offsets"]
        if not (isinstance(shape, list) and all(isinstance(s, int) and s >= 0 for s in shape)):
            raise MalformedHeaderError(f"entry {name!r} has an invalid shape {shape!r}")
        if not (isinstance(offs, list) and len(offs) == 2 and all(isinstance(o, int) for o in offs)
                and 0 <= offs[0] <= offs[1]):
            raise MalformedHeaderError(f"entry {name!r} has invalid data_offsets {offs!r}")
        if info["dtype"] != "F32":
            raise UnknownDtypeError(f"entry {name!r} has dtype {info['dtype']!r}; only F32 is supported")
        if offs[1] - offs[0] != 4 * int(np.prod(shape, dtype=np.int64)):
            raise MalformedHeaderError(f"entry {name!r}: byte span {offs[1] - offs[0]} does not match shape {shape}")
        if offs[1] > len(buf):
            raise TruncatedError(f"entry {name!r} ends at {offs[1]} but buffer holds {len(buf)} bytes")
        spans.append((offs[0], offs[1], name))

    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise OffsetOverlapError(f"tensors {n0!r} and {n1!r} overlap")

    tensors = {}
    for start, end, name in sorted(spans, key=lambda s: s[2]):
        shape = header[name]["shape"]
        arr = np.frombuffer(buf[start:end], dtype="<f4").astype(np.float32).reshape(shape)
        tensors[name] = arr
    return TensorFile(tensors=tensors, metadata=dict(metadata))


def load_tensors(path) -> TensorFile:
    return decode_tensors(Path(path).read_bytes())
