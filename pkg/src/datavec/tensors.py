"""Named tensor sets and the linear weight-space arithmetic built on them.

A "tensor" here is a numpy float32 array; a NamedTensorSet is an ordered
(lexicographic by name) map from names to tensors, each tagged as a
parameter, a buffer (running statistics), or a head (appended classifier)
entry.  All arithmetic accumulates in float64 and rounds the result back
to float32, and all stored arrays are marked read-only so sets behave as
immutable values.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import ShapeMismatch

KINDS = ("parameter", "buffer", "head")


def _as_tensor(name: str, values) -> np.ndarray:
    """Coerce to a read-only finite float32 array, reusing arrays that already comply."""
    if (
        isinstance(values, np.ndarray)
        and values.dtype == np.float32
        and not values.flags.writeable
        and values.flags.c_contiguous
    ):
        arr = values
    else:
        arr = np.array(values, dtype=np.float32, order="C")
        arr.setflags(write=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"tensor {name!r} contains non-finite values")
    return arr


class NamedTensorSet:
    """Immutable ordered map name -> (float32 tensor, kind)."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, tuple] | Iterable[tuple[str, object, str]]):
        if isinstance(entries, Mapping):
            items = [(name, values, kind) for name, (values, kind) in entries.items()]
        else:
            items = list(entries)
        table: dict[str, tuple[np.ndarray, str]] = {}
        for name, values, kind in sorted(items, key=lambda item: item[0]):
            if not isinstance(name, str) or not name:
                raise ValueError(f"invalid tensor name {name!r}")
            if name in table:
                raise ValueError(f"duplicate tensor name {name!r}")
            if kind not in KINDS:
                raise ValueError(f"invalid kind {kind!r} for {name!r}")
            table[name] = (_as_tensor(name, values), kind)
        self._entries = table

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def array(self, name: str) -> np.ndarray:
        return self._entries[name][0]

    def kind(self, name: str) -> str:
        return self._entries[name][1]

    def items(self) -> Iterator[tuple[str, np.ndarray, str]]:
        for name, (arr, kind) in self._entries.items():
            yield name, arr, kind

    def to_dict(self) -> dict[str, tuple[np.ndarray, str]]:
        return dict(self._entries)

    def filter(self, kinds: str | Iterable[str]) -> "NamedTensorSet":
        """Subset containing only entries of the given kind(s)."""
        if isinstance(kinds, str):
            kinds = (kinds,)
        wanted = set(kinds)
        return NamedTensorSet(
            [(n, a, k) for n, a, k in self.items() if k in wanted]
        )

    def replace(self, updates: Mapping[str, object]) -> "NamedTensorSet":
        """New set with some tensors swapped; names, kinds, and shapes are preserved."""
        table = dict(self._entries)
        for name, values in updates.items():
            if name not in table:
                raise KeyError(f"unknown tensor name {name!r}")
            old, kind = table[name]
            arr = _as_tensor(name, values)
            if arr.shape != old.shape:
                raise ShapeMismatch(
                    f"replacement for {name!r} has shape {arr.shape}, expected {old.shape}"
                )
            table[name] = (arr, kind)
        return NamedTensorSet([(n, a, k) for n, (a, k) in table.items()])

    def require_compatible(self, other: "NamedTensorSet") -> None:
        """Raise ShapeMismatch unless both sets have identical names, kinds, and shapes."""
        if self.names != other.names:
            missing = set(self.names).symmetric_difference(other.names)
            raise ShapeMismatch(f"tensor names differ: {sorted(missing)}")
        for name, arr, kind in self.items():
            if other.kind(name) != kind:
                raise ShapeMismatch(f"{name!r}: kind {kind} vs {other.kind(name)}")
            if other.array(name).shape != arr.shape:
                raise ShapeMismatch(
                    f"{name!r}: shape {arr.shape} vs {other.array(name).shape}"
                )

    def bitwise_equal(self, other: "NamedTensorSet") -> bool:
        if self.names != other.names:
            return False
        for name, arr, kind in self.items():
            if other.kind(name) != kind or other.array(name).shape != arr.shape:
                return False
            if arr.tobytes() != other.array(name).tobytes():
                return False
        return True


@dataclass(frozen=True)
class DataVector:
    """Parameter-only weight delta tagged with the base it was computed against.

    entries holds kind=parameter tensors exclusively (the appended head and
    all running-statistics buffers are excluded by construction), and
    base_hash is the 32-byte content digest of the pre-trained tensors the
    delta was taken from.
    """

    entries: NamedTensorSet
    base_hash: bytes

    def __post_init__(self):
        for name, _, kind in self.entries.items():
            if kind != "parameter":
                raise ValueError(f"data vector entry {name!r} has kind {kind}")
        if not isinstance(self.base_hash, bytes) or len(self.base_hash) != 32:
            raise ValueError("base_hash must be 32 bytes")


def combine(
    a: NamedTensorSet,
    b: NamedTensorSet,
    alpha: float,
    beta: float,
    names: Iterable[str] | None = None,
) -> NamedTensorSet:
    """Elementwise alpha*a + beta*b, accumulated in float64.

    By default every name must be present in both sets with matching kind and
    shape; pass `names` to combine a subset (each requested name must still
    match in both sets).
    """
    if names is None:
        a.require_compatible(b)
        selected = a.names
    else:
        selected = tuple(sorted(names))
        for name in selected:
            if name not in a or name not in b:
                raise ShapeMismatch(f"{name!r} missing from one input")
            if a.array(name).shape != b.array(name).shape or a.kind(name) != b.kind(name):
                raise ShapeMismatch(f"{name!r}: incompatible entries")
    out = []
    for name in selected:
        lhs = a.array(name).astype(np.float64)
        rhs = b.array(name).astype(np.float64)
        out.append((name, (alpha * lhs + beta * rhs).astype(np.float32), a.kind(name)))
    return NamedTensorSet(out)


def scale(v: NamedTensorSet, lam: float) -> NamedTensorSet:
    """Elementwise lam*v (float64 intermediate; lam=1 is a bit-identical copy)."""
    return NamedTensorSet(
        [(n, (lam * a.astype(np.float64)).astype(np.float32), k) for n, a, k in v.items()]
    )


def layer_norms(s: NamedTensorSet) -> dict[str, float]:
    """Per-name L2 norm with float64 accumulation."""
    return {n: float(np.linalg.norm(a.astype(np.float64))) for n, a, _ in s.items()}


def layer_cosine(a: NamedTensorSet, b: NamedTensorSet) -> dict[str, float]:
    """Per-name cosine similarity, clamped to [-1, 1].

    A layer where either side has zero norm yields 0.0 (callers that need to
    distinguish this case can check `layer_norms`).
    """
    a.require_compatible(b)
    out: dict[str, float] = {}
    for name, arr, _ in a.items():
        x = arr.astype(np.float64).ravel()
        y = b.array(name).astype(np.float64).ravel()
        nx = np.linalg.norm(x)
        ny = np.linalg.norm(y)
        if nx == 0.0 or ny == 0.0:
            out[name] = 0.0
        else:
            out[name] = float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))
    return out


def zeros_like(s: NamedTensorSet) -> NamedTensorSet:
    return NamedTensorSet(
        [(n, np.zeros(a.shape, dtype=np.float32), k) for n, a, k in s.items()]
    )


def content_digest(s: NamedTensorSet) -> bytes:
    """32-byte SHA-256 digest of the set's names, kinds, shapes, and payloads.

    The encoding walks entries in lexicographic name order and is independent
    of any file metadata, so it is stable across write/read round trips.
    """
    h = hashlib.sha256()
    for name, arr, kind in s.items():
        raw = name.encode("utf-8")
        h.update(struct.pack("<I", len(raw)))
        h.update(raw)
        h.update(kind.encode("ascii"))
        h.update(struct.pack("<I", arr.ndim))
        h.update(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        h.update(arr.astype("<f4").tobytes())
    return h.digest()
