"""Binary weight file (``.rtcw``).

Layout, little-endian throughout::

    b"RTCW"
    u16 version (=1)
    u32 metadata length, UTF-8 JSON metadata
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
                u8 dtype tag, raw payload
    u32 CRC32 of every byte after the magic

Metadata carries the architecture id, input shape, class names and the node
list, so a file can be loaded without knowing which builder produced it.
Parameters are written before batch-norm running statistics.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ChecksumError, TruncatedFileError, VersionMismatchError,
                     WeightFileError)
from .graph import FORMAT_VERSION, Model, Node, tensor_shapes

MAGIC = b"RTCW"
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _metadata(model: Model) -> dict:
    return {
        "architecture": model.architecture,
        "format_version": model.format_version,
        "input_shape": list(model.input_shape),
        "class_names": model.class_names,
        "buffers": list(model.buffers),
        "nodes": [n.to_json() for n in model.nodes],
    }


def to_bytes(model: Model) -> bytes:
    meta = json.dumps(_metadata(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = list(model.params.items()) + list(model.buffers.items())
    body = bytearray()
    body += struct.pack("<H", FORMAT_VERSION)
    body += struct.pack("<I", len(meta)) + meta
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        raw_name = name.encode("utf-8")
        tag = _TAG_OF.get(arr.dtype)
        if tag is None:
            raise WeightFileError(f"cannot serialise dtype {arr.dtype} for {name}")
        body += struct.pack("<H", len(raw_name)) + raw_name
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += struct.pack("<B", tag)
        body += np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()
    return MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def save_weights(model: Model, path) -> int:
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        # the trailing 4 bytes belong to the checksum, never to the body
        if end > len(self.buf) - 4:
            raise TruncatedFileError(f"file truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Model:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not an RTCW weight file (bad magic)")
    if len(data) < 10:
        raise TruncatedFileError("file truncated inside the header")
    r = _Reader(data, 4)
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    (meta_len,) = r.unpack("<I")
    meta_raw = r.take(meta_len)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        (tag,) = r.unpack("<B")
        if tag not in DTYPE_TAGS:
            raise WeightFileError(f"unknown dtype tag {tag} for tensor {name!r}")
        dt = DTYPE_TAGS[tag]
        payload = r.take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(data) - 4:
        raise ChecksumError(f"{len(data) - 4 - r.pos} unexpected bytes before the checksum")
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[4:-4]) != stored:
        raise ChecksumError("CRC32 mismatch: file is corrupted")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"unreadable metadata: {exc}") from None
    return _assemble(meta, tensors)


def _assemble(meta: dict, tensors: dict) -> Model:
    dtypes = {a.dtype for a in tensors.values()} or {np.dtype("float32")}
    model = Model(meta["input_shape"], meta["class_names"], meta["architecture"],
                  dtype=dtypes.pop() if len(dtypes) == 1 else np.float32)
    model.format_version = meta.get("format_version", FORMAT_VERSION)
    buffer_names = set(meta.get("buffers", []))
    for nd in meta["nodes"]:
        model.add(nd["kind"], nd["name"], nd["inputs"], init=False, **nd["attrs"])
        node: Node = model.nodes[-1]
        for suffix, shape in tensor_shapes(node).items():
            key = f"{node.name}/{suffix}"
            if key not in tensors:
                raise WeightFileError(f"missing tensor {key!r}")
            if tensors[key].shape != shape:
                raise WeightFileError(f"tensor {key!r} has shape {tensors[key].shape}, expected {shape}")
    for name, arr in tensors.items():
        (model.buffers if name in buffer_names else model.params)[name] = arr
    expected = {f"{n.name}/{s}" for n in model.nodes for s in tensor_shapes(n)}
    extra = set(tensors) - expected
    if extra:
        raise WeightFileError(f"unexpected tensors {sorted(extra)}")
    return model


def load_weights(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFileError(f"cannot read {path}: {exc}") from None
    return from_bytes(data)
