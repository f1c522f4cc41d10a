"""Flat named-parameter vectors, task-vector arithmetic and checkpoint I/O.

Every vector in the toolkit (parameters, gradients, task vectors, signs and
masks) is stored as one contiguous 1-D array plus an ordered list of named
segments.  Element-wise operations then reduce to numpy operations on the flat
arrays once the layouts are known to agree.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    ChecksumError,
    CheckpointFormatError,
    CongruenceError,
    NumericError,
    TruncatedCheckpointError,
)

__all__ = [
    "ParamVector",
    "TaskVector",
    "SignVector",
    "MaskVector",
    "diff",
    "add_scaled",
    "sign_of",
    "apply_mask",
    "agreement_stats",
    "save_checkpoint",
    "load_checkpoint",
    "save_signs",
    "load_signs",
    "save_mask",
    "load_mask",
]


class _Segmented:
    """Ordered named segments backed by a single read-only flat array."""

    _dtype = np.float64

    __slots__ = ("names", "shapes", "values", "_offsets")

    def __init__(self, names: Sequence[str], shapes: Sequence[Sequence[int]], values):
        names = tuple(str(n) for n in names)
        shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        if len(names) != len(shapes):
            raise ValueError("names and shapes differ in length")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate segment names in {names}")
        for name, shape in zip(names, shapes):
            if any(d <= 0 for d in shape):
                raise ValueError(f"segment {name!r} has non-positive dimension {shape}")
        values = np.array(values, dtype=self._dtype, copy=True).reshape(-1)
        sizes = [int(np.prod(s, dtype=np.int64)) for s in shapes]
        offsets = np.concatenate([[0], np.cumsum(sizes, dtype=np.int64)])
        if values.size != offsets[-1]:
            raise ValueError(
                f"values length {values.size} does not match layout size {int(offsets[-1])}"
            )
        self._check_values(values)
        values.flags.writeable = False
        self.names = names
        self.shapes = shapes
        self.values = values
        self._offsets = offsets

    def _check_values(self, values):
        if not np.all(np.isfinite(values)):
            raise NumericError(f"{type(self).__name__} contains non-finite values")

    @classmethod
    def from_segments(cls, segments: Iterable[tuple[str, np.ndarray]], **kwargs):
        segments = [(name, np.asarray(arr)) for name, arr in segments]
        names = [name for name, _ in segments]
        shapes = [arr.shape if arr.ndim else (1,) for _, arr in segments]
        flat = (
            np.concatenate([arr.reshape(-1) for _, arr in segments])
            if segments
            else np.zeros(0)
        )
        return cls(names, shapes, flat, **kwargs)

    @property
    def structure(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple(zip(self.names, self.shapes))

    @property
    def size(self) -> int:
        return int(self.values.size)

    def __len__(self) -> int:
        return self.size

    def segment_slice(self, name: str) -> slice:
        i = self.names.index(name)
        return slice(int(self._offsets[i]), int(self._offsets[i + 1]))

    def __getitem__(self, name: str) -> np.ndarray:
        i = self.names.index(name)
        return self.values[self._offsets[i]:self._offsets[i + 1]].reshape(self.shapes[i])

    def segments(self) -> Iterator[tuple[str, tuple[int, ...], np.ndarray]]:
        for i, (name, shape) in enumerate(self.structure):
            yield name, shape, self.values[self._offsets[i]:self._offsets[i + 1]].reshape(shape)

    def congruent_with(self, other) -> bool:
        return self.structure == other.structure

    def like(self, values, cls=None, **kwargs):
        """New vector with this layout and the given flat values."""
        cls = cls or type(self)
        return cls(self.names, self.shapes, values, **kwargs)

    def __eq__(self, other):
        if not isinstance(other, _Segmented):
            return NotImplemented
        return (
            type(self) is type(other)
            and self.structure == other.structure
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def __repr__(self):
        return f"{type(self).__name__}({', '.join(f'{n}{list(s)}' for n, s in self.structure)})"


class ParamVector(_Segmented):
    """Real-valued parameters (or gradients) in float64."""

    __slots__ = ()

    def __neg__(self):
        return self.like(-self.values)

    def dot(self, other: "ParamVector") -> float:
        check_congruent(self, other)
        return float(np.dot(self.values, other.values))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    @classmethod
    def zeros_like(cls, other: _Segmented):
        return cls(other.names, other.shapes, np.zeros(other.size))


class TaskVector(ParamVector):
    """Difference between two congruent parameter vectors."""

    __slots__ = ()


class SignVector(_Segmented):
    """Per-coordinate signs in {-1, 0, +1} stored as int8."""

    _dtype = np.int8
    __slots__ = ()

    def _check_values(self, values):
        if values.size and (values.min() < -1 or values.max() > 1):
            raise ValueError("SignVector values must lie in {-1, 0, +1}")

    def __neg__(self):
        return self.like(-self.values)


class MaskVector(_Segmented):
    """Binary ({0,1}) or signed ({-1,0,+1}) per-coordinate multiplier."""

    _dtype = np.int8
    __slots__ = ("kind",)

    def __init__(self, names, shapes, values, kind: str = "binary"):
        if kind not in ("binary", "signed"):
            raise ValueError(f"unknown mask kind {kind!r}")
        self.kind = kind
        super().__init__(names, shapes, values)

    def _check_values(self, values):
        lo = 0 if self.kind == "binary" else -1
        if values.size and (values.min() < lo or values.max() > 1):
            raise ValueError(f"{self.kind} mask has values outside its range")

    def like(self, values, cls=None, **kwargs):
        if (cls is None or cls is MaskVector) and "kind" not in kwargs:
            kwargs["kind"] = self.kind
        return super().like(values, cls=cls, **kwargs)

    @classmethod
    def from_segments(cls, segments, kind="binary"):
        return super().from_segments(segments, kind=kind)

    def __eq__(self, other):
        eq = super().__eq__(other)
        if eq is NotImplemented:
            return eq
        return eq and self.kind == other.kind

    __hash__ = None

    def retained_fraction(self, over: SignVector | None = None) -> float:
        """Fraction of nonzero entries, optionally among nonzero coordinates of ``over``."""
        values = self.values
        if over is not None:
            check_congruent(self, over)
            values = values[over.values != 0]
        return float(np.count_nonzero(values)) / values.size if values.size else 0.0


def check_congruent(a: _Segmented, b: _Segmented) -> None:
    if a.names != b.names:
        raise CongruenceError(f"segment names differ: {a.names} vs {b.names}")
    if a.shapes != b.shapes:
        bad = [(n, sa, sb) for n, sa, sb in zip(a.names, a.shapes, b.shapes) if sa != sb]
        raise CongruenceError(f"segment shapes differ: {bad}")


def diff(theta_ft: ParamVector, theta_0: ParamVector) -> TaskVector:
    """Task vector ``theta_ft - theta_0``."""
    check_congruent(theta_ft, theta_0)
    return theta_ft.like(theta_ft.values - theta_0.values, cls=TaskVector)


def add_scaled(theta: ParamVector, delta: ParamVector, scale: float) -> ParamVector:
    """``theta + scale * delta``; raises NumericError on a non-finite result."""
    check_congruent(theta, delta)
    scale = float(scale)
    if not np.isfinite(scale):
        raise NumericError(f"scale must be finite, got {scale}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = theta.values + scale * delta.values
    if not np.all(np.isfinite(out)):
        raise NumericError("add_scaled produced non-finite parameters")
    return theta.like(out, cls=ParamVector)


def sign_of(v: ParamVector, zero_tol: float = 0.0) -> SignVector:
    """Three-valued sign; entries with ``|v| <= zero_tol`` map to 0."""
    zero_tol = float(zero_tol)
    if not np.isfinite(zero_tol) or zero_tol < 0:
        raise ValueError(f"zero_tol must be finite and >= 0, got {zero_tol}")
    x = v.values
    s = (x > zero_tol).astype(np.int8) - (x < -zero_tol).astype(np.int8)
    return v.like(s, cls=SignVector)


def apply_mask(mask: MaskVector, tau: ParamVector) -> TaskVector:
    check_congruent(mask, tau)
    return tau.like(mask.values.astype(np.float64) * tau.values, cls=TaskVector)


def agreement_stats(s1: SignVector, s2: SignVector, grouping: str = "whole"):
    """Sign-agreement fraction over coordinates where both signs are nonzero.

    Returns a list of ``(group_name, agree_fraction, n_nonzero_pairs)``.  Groups
    without eligible coordinates report ``(name, 0.0, 0)``.
    """
    check_congruent(s1, s2)
    if grouping == "whole":
        groups = [("whole", slice(None))]
    elif grouping == "per_segment":
        groups = [(name, s1.segment_slice(name)) for name in s1.names]
    else:
        raise ValueError(f"grouping must be 'whole' or 'per_segment', got {grouping!r}")
    out = []
    for name, sl in groups:
        a, b = s1.values[sl], s2.values[sl]
        both = (a != 0) & (b != 0)
        n = int(np.count_nonzero(both))
        agree = int(np.count_nonzero(both & (a == b)))
        out.append((name, agree / n if n else 0.0, n))
    return out


# ---------------------------------------------------------------------------
# binary checkpoint format
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1
_VALUE_CODECS = {
    b"GFX1": "<f8",
    b"GFXE": "<f8",
    b"GFXS": "<i1",
    b"GFXM": "<i1",
    b"GFXF": "<i1",
}


def encode_segments(magic: bytes, vec: _Segmented) -> bytes:
    dtype = np.dtype(_VALUE_CODECS[magic])
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(vec.names))]
    for name, shape, arr in vec.segments():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"file truncated while reading {what} at byte {self.pos}"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk


def decode_segments(buf: bytes, expected_magic: Sequence[bytes]):
    """Parse a checkpoint buffer; returns ``(magic, names, shapes, flat_values)``."""
    if len(buf) < 4:
        raise TruncatedCheckpointError("file shorter than the magic header")
    magic = bytes(buf[:4])
    if magic not in expected_magic:
        raise CheckpointFormatError(
            f"bad magic {magic!r}; expected one of {[m.decode() for m in expected_magic]}"
        )
    dtype = np.dtype(_VALUE_CODECS[magic])
    r = _Reader(buf)
    r.pos = 4
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    names, shapes, chunks = [], [], []
    for k in range(count):
        (nlen,) = struct.unpack("<I", r.take(4, f"segment {k} name length"))
        name = r.take(nlen, f"segment {k} name").decode("utf-8")
        (ndim,) = struct.unpack("<I", r.take(4, f"segment {name!r} ndim"))
        dims = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, f"segment {name!r} dims"))
        n = int(np.prod(dims, dtype=np.int64))
        raw = r.take(n * dtype.itemsize, f"segment {name!r} values")
        names.append(name)
        shapes.append(dims)
        chunks.append(np.frombuffer(raw, dtype=dtype))
    body_end = r.pos
    (crc,) = struct.unpack("<I", r.take(4, "checksum"))
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after checksum")
    if zlib.crc32(buf[:body_end]) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch")
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=dtype)
    return magic, names, shapes, flat


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def save_checkpoint(v: ParamVector, path) -> None:
    atomic_write_bytes(path, encode_segments(b"GFX1", v))


def load_checkpoint(path) -> ParamVector:
    _, names, shapes, flat = decode_segments(_read(path), [b"GFX1"])
    return ParamVector(names, shapes, flat.astype(np.float64))


def save_signs(s: SignVector, path) -> None:
    atomic_write_bytes(path, encode_segments(b"GFXS", s))


def load_signs(path) -> SignVector:
    _, names, shapes, flat = decode_segments(_read(path), [b"GFXS"])
    return SignVector(names, shapes, flat)


def save_mask(m: MaskVector, path) -> None:
    magic = b"GFXM" if m.kind == "binary" else b"GFXF"
    atomic_write_bytes(path, encode_segments(magic, m))


def load_mask(path) -> MaskVector:
    magic, names, shapes, flat = decode_segments(_read(path), [b"GFXM", b"GFXF"])
    return MaskVector(names, shapes, flat, kind="binary" if magic == b"GFXM" else "signed")
