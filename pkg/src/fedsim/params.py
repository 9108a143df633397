"""Flat parameter vectors, the unit of exchange between clients and server.

A :class:`ParamVector` is a read-only float64 array paired with a manifest of
``(tensor_name, dims)`` entries describing how the flat values split into
named tensors. Aggregators only ever see the flat view.
"""

from __future__ import annotations

import hashlib
import math
import struct
from typing import Iterable, Sequence

import numpy as np

from fedsim.errors import (
    BadMagicError,
    EmptyInputError,
    IncompatibleShapesError,
    LengthMismatchError,
    NonFiniteValueError,
    NumericOverflowError,
    VersionMismatchError,
)

MAGIC = b"FPV1"
FORMAT_VERSION = 1

Manifest = tuple[tuple[str, tuple[int, ...]], ...]


def _normalize_manifest(manifest) -> Manifest:
    out = []
    for name, dims in manifest:
        dims = tuple(int(d) for d in dims)
        if any(d < 0 for d in dims):
            raise ValueError(f"negative dimension in manifest entry {name!r}: {dims}")
        out.append((str(name), dims))
    return tuple(out)


def manifest_size(manifest: Manifest) -> int:
    return sum(math.prod(dims) for _, dims in manifest)


class ParamVector:
    """Immutable flat float64 parameters with a shape manifest."""

    __slots__ = ("_values", "_manifest")

    def __init__(self, values, manifest):
        manifest = _normalize_manifest(manifest)
        arr = np.array(values, dtype=np.float64).reshape(-1)
        expected = manifest_size(manifest)
        if arr.size != expected:
            raise IncompatibleShapesError(
                f"manifest describes {expected} values but {arr.size} were given"
            )
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError("parameter values must be finite")
        arr.flags.writeable = False
        self._values = arr
        self._manifest = manifest

    @classmethod
    def from_tensors(cls, tensors: Iterable[tuple[str, np.ndarray]]) -> "ParamVector":
        tensors = [(name, np.asarray(t, dtype=np.float64)) for name, t in tensors]
        manifest = [(name, t.shape) for name, t in tensors]
        if tensors:
            values = np.concatenate([t.reshape(-1) for _, t in tensors])
        else:
            values = np.zeros(0)
        return cls(values, manifest)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def manifest(self) -> Manifest:
        return self._manifest

    def __len__(self) -> int:
        return self._values.size

    def tensors(self) -> dict[str, np.ndarray]:
        """Read-only views of each named tensor, in manifest order."""
        out = {}
        offset = 0
        for name, dims in self._manifest:
            n = math.prod(dims)
            out[name] = self._values[offset:offset + n].reshape(dims)
            offset += n
        return out

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self._manifest)

    def compatible_with(self, other: "ParamVector") -> bool:
        return self._manifest == other._manifest

    def digest(self) -> str:
        return hashlib.sha256(serialize(self)).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self._manifest == other._manifest and self._values.tobytes() == other._values.tobytes()

    __hash__ = None

    def __repr__(self) -> str:
        return f"ParamVector(n={self._values.size}, tensors={len(self._manifest)})"


def _check_compatible(vectors: Sequence[ParamVector]) -> None:
    first = vectors[0].manifest
    for i, pv in enumerate(vectors[1:], start=1):
        if pv.manifest != first:
            raise IncompatibleShapesError(f"manifest of term {i} differs from term 0")


def linear_combine(terms: Sequence[tuple[float, ParamVector]]) -> ParamVector:
    """Element-wise ``sum(c_i * pv_i)``, accumulated in ascending term order."""
    if not terms:
        raise EmptyInputError("linear_combine needs at least one term")
    coefs = [float(c) for c, _ in terms]
    vectors = [pv for _, pv in terms]
    if not all(math.isfinite(c) for c in coefs):
        raise NumericOverflowError("coefficients must be finite")
    _check_compatible(vectors)
    with np.errstate(over="ignore", invalid="ignore"):
        acc = coefs[0] * vectors[0].values
        for c, pv in zip(coefs[1:], vectors[1:]):
            acc = acc + c * pv.values
    if not np.all(np.isfinite(acc)):
        raise NumericOverflowError("linear combination produced non-finite values")
    return ParamVector(acc, vectors[0].manifest)


def sq_l2_distance(a: ParamVector, b: ParamVector) -> float:
    if a.manifest != b.manifest:
        raise IncompatibleShapesError("cannot measure distance between different manifests")
    diff = a.values - b.values
    return float(np.dot(diff, diff))


def serialize(pv: ParamVector) -> bytes:
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(pv.manifest))]
    for name, dims in pv.manifest:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", len(dims)))
        parts.append(struct.pack(f"<{len(dims)}I", *dims))
    parts.append(struct.pack("<Q", len(pv)))
    parts.append(pv.values.astype("<f8", copy=False).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise LengthMismatchError(
                f"truncated parameter blob: need {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(data: bytes) -> ParamVector:
    r = _Reader(data)
    if len(data) < len(MAGIC) or bytes(r.take(len(MAGIC))) != MAGIC:
        raise BadMagicError("not a parameter blob (bad magic)")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported format version {version}")
    (count,) = r.unpack("<I")
    manifest = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = bytes(r.take(name_len)).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        manifest.append((name, tuple(dims)))
    (n_values,) = r.unpack("<Q")
    if n_values != manifest_size(manifest):
        raise LengthMismatchError(
            f"value count {n_values} disagrees with manifest size {manifest_size(manifest)}"
        )
    raw = r.take(8 * n_values)
    if r.pos != len(r.data):
        raise LengthMismatchError(f"{len(r.data) - r.pos} trailing bytes after values")
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError("blob contains non-finite values")
    return ParamVector(values, manifest)


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
