"""Descriptor data model, similarity kernel and the MRDS descriptor file format."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

NORM_TOL = 1e-5

DESCRIPTOR_MAGIC = b"MRDS"
DESCRIPTOR_VERSION = 1
_HEADER = struct.Struct("<4sIQII")  # magic, version, n, d, flags
FLAG_ITEM_MAP = 1


class ManifoldRankError(Exception):
    """Base class for all library errors."""


class InputError(ManifoldRankError, ValueError):
    """Invalid argument or parameter."""


class FormatError(ManifoldRankError):
    """Malformed file contents."""


class CapabilityError(ManifoldRankError):
    """Operation refused because the problem is outside what the method supports."""


class NumericalError(ManifoldRankError):
    """Numerical failure (non-convergence when strictness is requested)."""


@dataclass(frozen=True)
class KernelParams:
    exponent: int = 3

    def __post_init__(self):
        if int(self.exponent) != self.exponent or self.exponent < 1:
            raise InputError(f"kernel exponent must be a positive integer, got {self.exponent}")


def kernel_from_dot(dots, params: KernelParams = KernelParams()):
    """Monomial kernel applied to precomputed inner products."""
    return np.maximum(dots, 0.0) ** params.exponent


def kernel_similarity(x, z, params: KernelParams = KernelParams()) -> float:
    """max(x.z, 0) ** exponent for two unit vectors."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape or x.ndim != 1:
        raise InputError(f"dimension mismatch: {x.shape} vs {z.shape}")
    return float(kernel_from_dot(float(x @ z), params))


def normalize_rows(data: np.ndarray) -> np.ndarray:
    """Scale rows to unit norm. Zero rows raise FormatError naming the first offender."""
    data = np.array(data, dtype=np.float64, copy=True)
    if data.ndim != 2:
        raise InputError("expected a 2-d array")
    norms = np.linalg.norm(data, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise FormatError(f"row {int(zero[0])} has zero norm")
    off = np.abs(norms - 1.0) > NORM_TOL
    data[off] /= norms[off, None]
    return data


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """n unit-norm rows; each row belongs to an item and has a region ordinal within it."""

    data: np.ndarray
    item_of: np.ndarray
    region_of: np.ndarray
    _item_rows: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] == 0:
            raise InputError("descriptor matrix must be 2-d and nonempty")
        item_of = np.asarray(self.item_of, dtype=np.int64)
        region_of = np.asarray(self.region_of, dtype=np.int64)
        n = data.shape[0]
        if item_of.shape != (n,) or region_of.shape != (n,):
            raise InputError("item_of and region_of must have length n")
        norms = np.linalg.norm(data, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if bad.size:
            raise InputError(f"row {int(bad[0])} is not unit norm (norm={norms[bad[0]]:.6g})")
        rows: dict[int, np.ndarray] = {}
        order = np.lexsort((region_of, item_of))
        items, starts = np.unique(item_of[order], return_index=True)
        for item, chunk in zip(items.tolist(), np.split(order, starts[1:])):
            regions = region_of[chunk]
            if not np.array_equal(regions, np.arange(len(chunk))):
                raise InputError(f"item {item} has region ordinals {regions.tolist()}, expected 0..{len(chunk) - 1}")
            rows[item] = chunk
        data.setflags(write=False)
        item_of.setflags(write=False)
        region_of.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "item_of", item_of)
        object.__setattr__(self, "region_of", region_of)
        object.__setattr__(self, "_item_rows", rows)

    @classmethod
    def from_rows(cls, data, item_of=None, region_of=None) -> "DescriptorSet":
        """Build from raw rows, renormalizing; defaults to one row per item."""
        data = normalize_rows(np.asarray(data, dtype=np.float64))
        n = data.shape[0]
        if item_of is None:
            item_of = np.arange(n)
            region_of = np.zeros(n, dtype=np.int64)
        elif region_of is None:
            region_of = regions_from_items(item_of)
        return cls(data, item_of, region_of)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @property
    def items(self) -> list[int]:
        return list(self._item_rows)

    def rows_of(self, item: int) -> np.ndarray:
        return self._item_rows[item]

    def item_rows(self) -> dict[int, np.ndarray]:
        return dict(self._item_rows)

    def regions(self, item: int) -> np.ndarray:
        return self.data[self._item_rows[item]]


def regions_from_items(item_of) -> np.ndarray:
    """Region ordinals numbering rows of each item in order of appearance."""
    item_of = np.asarray(item_of, dtype=np.int64)
    region_of = np.zeros(len(item_of), dtype=np.int64)
    seen: dict[int, int] = {}
    for i, item in enumerate(item_of.tolist()):
        region_of[i] = seen.get(item, 0)
        seen[item] = region_of[i] + 1
    return region_of


def read_descriptors(source: BinaryIO) -> DescriptorSet:
    header = source.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise FormatError("truncated descriptor header")
    magic, version, n, d, flags = _HEADER.unpack(header)
    if magic != DESCRIPTOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DESCRIPTOR_MAGIC!r}")
    if version != DESCRIPTOR_VERSION:
        raise FormatError(f"unsupported descriptor format version {version}")
    if n == 0 or d == 0:
        raise FormatError(f"empty descriptor set (n={n}, d={d})")
    payload = source.read(4 * n * d)
    if len(payload) != 4 * n * d:
        rows = len(payload) // (4 * d)
        raise FormatError(f"header declares n={n} rows but only {rows} present; row {rows} is truncated or missing")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(data), axis=1))[0])
        raise FormatError(f"row {bad} contains non-finite values")
    if flags & FLAG_ITEM_MAP:
        maps = source.read(8 * n)
        if len(maps) != 8 * n:
            raise FormatError("truncated item/region map")
        item_of = np.frombuffer(maps[: 4 * n], dtype="<u4").astype(np.int64)
        region_of = np.frombuffer(maps[4 * n :], dtype="<u4").astype(np.int64)
    else:
        item_of = np.arange(n, dtype=np.int64)
        region_of = np.zeros(n, dtype=np.int64)
    if source.read(1):
        raise FormatError("trailing bytes after descriptor payload")
    try:
        return DescriptorSet(normalize_rows(data), item_of, region_of)
    except InputError as exc:
        raise FormatError(str(exc)) from exc


def load_descriptors(source) -> DescriptorSet:
    """Read an MRDS stream (file object, bytes, or path)."""
    if isinstance(source, (bytes, bytearray)):
        return read_descriptors(io.BytesIO(source))
    if hasattr(source, "read"):
        return read_descriptors(source)
    with open(source, "rb") as fh:
        return read_descriptors(fh)


def descriptors_to_bytes(ds: DescriptorSet, with_items: bool | None = None) -> bytes:
    n, d = ds.data.shape
    if with_items is None:
        with_items = not (np.array_equal(ds.item_of, np.arange(n)) and not ds.region_of.any())
    flags = FLAG_ITEM_MAP if with_items else 0
    parts = [_HEADER.pack(DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION, n, d, flags), ds.data.astype("<f4").tobytes()]
    if with_items:
        parts.append(ds.item_of.astype("<u4").tobytes())
        parts.append(ds.region_of.astype("<u4").tobytes())
    return b"".join(parts)


def save_descriptors(ds: DescriptorSet, path, with_items: bool | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(descriptors_to_bytes(ds, with_items))
