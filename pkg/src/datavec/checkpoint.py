"""Bit-exact on-disk container for named tensor sets (extension ".dvc").

File layout, in order:

  * 8-byte magic ``DVCKPT01``
  * 8-byte little-endian unsigned header length
  * UTF-8 JSON header: ``{"version": 1, "metadata": {str: str},
    "index": [{"name", "kind", "dtype", "shape", "offset", "length"}, ...]}``
    with index records in lexicographic name order and offsets relative to
    the start of the payload section
  * raw little-endian float32 payloads, packed in index order

Writing the same set and metadata twice yields byte-identical files; the
content hash is SHA-256 over the whole file.  Only dtype "f32" exists in
version 1 (the tag is kept so future widths can be added without a new
magic).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFile, IoFailure, VersionUnsupported
from .tensors import KINDS, NamedTensorSet

MAGIC = b"DVCKPT01"
VERSION = 1
FILE_EXTENSION = ".dvc"


def _check_metadata(metadata: dict) -> dict[str, str]:
    for key, value in metadata.items():
        if not isinstance(key, str) or not isinstance(value, str):
            raise ValueError(f"metadata entries must be str -> str, got {key!r}")
    return dict(metadata)


def serialize_checkpoint(tensors: NamedTensorSet, metadata: dict[str, str]) -> bytes:
    """Encode to the container format in memory (the unit write_checkpoint persists)."""
    metadata = _check_metadata(metadata)
    index = []
    offset = 0
    payloads = []
    for name, arr, kind in tensors.items():
        raw = arr.astype("<f4").tobytes()
        index.append(
            {
                "name": name,
                "kind": kind,
                "dtype": "f32",
                "shape": list(arr.shape),
                "offset": offset,
                "length": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": VERSION, "metadata": metadata, "index": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(header)), header, *payloads])


def write_checkpoint(tensors: NamedTensorSet, metadata: dict[str, str], path) -> bytes:
    """Write the container to `path`; returns the 32-byte SHA-256 of the file."""
    blob = serialize_checkpoint(tensors, metadata)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return hashlib.sha256(blob).digest()


def _parse_header(blob: bytes):
    if len(blob) < 16:
        raise CorruptFile("file shorter than magic and header length")
    if blob[:8] != MAGIC:
        raise CorruptFile(f"bad magic {blob[:8]!r}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    if header_len > len(blob) - 16:
        raise CorruptFile("declared header length exceeds file size")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"unreadable header: {exc}") from exc
    if not isinstance(header, dict):
        raise CorruptFile("header is not an object")
    version = header.get("version")
    if not isinstance(version, int):
        raise CorruptFile("missing format version")
    if version != VERSION:
        raise VersionUnsupported(f"format version {version} (supported: {VERSION})")
    metadata = header.get("metadata")
    index = header.get("index")
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise CorruptFile("metadata is not a string map")
    if not isinstance(index, list):
        raise CorruptFile("index is not a list")
    return metadata, index, 16 + header_len


def _validate_record(record, payload_size: int, min_offset: int, prev_name: str | None):
    if not isinstance(record, dict):
        raise CorruptFile("index record is not an object")
    name = record.get("name")
    kind = record.get("kind")
    dtype = record.get("dtype")
    shape = record.get("shape")
    offset = record.get("offset")
    length = record.get("length")
    if not isinstance(name, str) or not name:
        raise CorruptFile("index record without a name")
    if prev_name is not None and not (prev_name < name):
        raise CorruptFile(f"index not in ascending name order at {name!r}")
    if kind not in KINDS:
        raise CorruptFile(f"{name!r}: unknown kind {kind!r}")
    if dtype != "f32":
        raise CorruptFile(f"{name!r}: unsupported dtype {dtype!r}")
    if not isinstance(shape, list) or not all(
        isinstance(d, int) and d > 0 for d in shape
    ):
        raise CorruptFile(f"{name!r}: invalid shape {shape!r}")
    count = 1
    for d in shape:
        count *= d
    if not isinstance(offset, int) or not isinstance(length, int):
        raise CorruptFile(f"{name!r}: non-integer offset or length")
    if length != 4 * count:
        raise CorruptFile(f"{name!r}: length {length} != 4*product(shape)")
    if offset < min_offset:
        raise CorruptFile(f"{name!r}: payload overlaps the previous record")
    if offset + length > payload_size:
        raise CorruptFile(f"{name!r}: payload extends past end of file")
    return name, kind, tuple(shape), offset, length


def read_checkpoint(path) -> tuple[NamedTensorSet, dict[str, str]]:
    """Read a container back; bit-exact inverse of write_checkpoint."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    metadata, index, payload_start = _parse_header(blob)
    payload_size = len(blob) - payload_start
    entries = []
    min_offset = 0
    prev_name = None
    for record in index:
        name, kind, shape, offset, length = _validate_record(
            record, payload_size, min_offset, prev_name
        )
        raw = blob[payload_start + offset : payload_start + offset + length]
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise CorruptFile(f"{name!r}: non-finite payload values")
        entries.append((name, arr, kind))
        min_offset = offset + length
        prev_name = name
    return NamedTensorSet(entries), metadata


def content_hash(path) -> bytes:
    """32-byte SHA-256 digest of the file's bytes."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return hashlib.sha256(blob).digest()
