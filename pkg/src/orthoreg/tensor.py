"""Kernel tensors, their o x d matrix form, and the on-disk formats.

A convolution kernel of shape (o, i, k_h, k_w) is flattened row-wise into a
matrix with one row per filter and d = i * k_h * k_w columns.  Everything in
the measures module consumes that matrix.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MAGIC = b"KTSR"
VERSION = 1
DTYPE_F32 = 1
DTYPE_F64 = 2
_HEADER = struct.Struct("<4sBBBB4I")
HEADER_SIZE = _HEADER.size

# dims are stored as u32, so the payload count must fit there as well
MAX_ELEMENTS = 2**32 - 1

KINDS = ("stem", "conv", "downsample")


class TensorFormatError(ValueError):
    """Base class for container and descriptor errors."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class PayloadMismatchError(TensorFormatError):
    """The payload length disagrees with the header dims."""


class UnsupportedHeaderError(TensorFormatError):
    """Wrong version, ndim or reserved byte."""


class SizeError(ValueError):
    pass


class ArchitectureError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class KernelTensor:
    name: str
    o: int
    i: int
    kh: int
    kw: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        for label in ("o", "i", "kh", "kw"):
            v = getattr(self, label)
            if int(v) != v or v < 1:
                raise SizeError(f"{label} must be a positive integer, got {v!r}")
        count = self.o * self.i * self.kh * self.kw
        if count > MAX_ELEMENTS:
            raise SizeError(f"tensor has {count} elements, limit is {MAX_ELEMENTS}")
        data = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if data.size != count:
            raise SizeError(f"expected {count} values, got {data.size}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"tensor {self.name!r} contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.o, self.i, self.kh, self.kw)

    @classmethod
    def from_array(cls, array, name: str = "") -> "KernelTensor":
        a = np.asarray(array, dtype=np.float64)
        if a.ndim == 2:
            a = a.reshape(a.shape[0], a.shape[1], 1, 1)
        if a.ndim != 4:
            raise SizeError(f"expected a 2-D or 4-D array, got ndim={a.ndim}")
        return cls(name, *a.shape, data=a.reshape(-1))

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.shape).copy()


@dataclass(frozen=True)
class KernelMatrix:
    """Filters as rows of an o x d matrix (read-only)."""

    data: np.ndarray = field(repr=False)
    source: Optional[str] = None

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise SizeError(f"kernel matrix must be a non-empty 2-D array, got {a.shape}")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def reshape_kernel(t: KernelTensor) -> KernelMatrix:
    d = t.i * t.kh * t.kw
    return KernelMatrix(t.data.reshape(t.o, d), source=t.name or None)


def unreshape_kernel(m: KernelMatrix, i: int, kh: int, kw: int, name: str = "") -> KernelTensor:
    if i * kh * kw != m.cols:
        raise SizeError(f"i*kh*kw = {i * kh * kw} does not match d = {m.cols}")
    return KernelTensor(name or (m.source or ""), m.rows, i, kh, kw, m.data.reshape(-1))


def as_matrix(K) -> np.ndarray:
    """Accept a KernelMatrix, KernelTensor or array and return a float64 o x d array."""
    if isinstance(K, KernelMatrix):
        return K.data
    if isinstance(K, KernelTensor):
        return reshape_kernel(K).data
    a = np.asarray(K, dtype=np.float64)
    if a.ndim == 4:
        a = a.reshape(a.shape[0], -1)
    if a.ndim != 2:
        raise SizeError(f"expected a 2-D kernel matrix, got shape {a.shape}")
    return a


# --- KTSR container -------------------------------------------------------

def save_tensor(t: KernelTensor, dtype: str = "f64") -> bytes:
    if dtype == "f64":
        code, np_dtype = DTYPE_F64, "<f8"
    elif dtype == "f32":
        code, np_dtype = DTYPE_F32, "<f4"
    else:
        raise UnsupportedDtypeError(f"unsupported dtype {dtype!r}")
    header = _HEADER.pack(MAGIC, VERSION, code, 4, 0, t.o, t.i, t.kh, t.kw)
    return header + t.data.astype(np_dtype).tobytes()


def load_tensor(buf: bytes, name: str = "") -> KernelTensor:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic: not a KTSR container")
    if len(buf) < HEADER_SIZE:
        raise TruncatedPayloadError(f"header truncated: {len(buf)} of {HEADER_SIZE} bytes")
    _, version, code, ndim, reserved, *dims = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedHeaderError(f"unsupported version {version}")
    if ndim != 4:
        raise UnsupportedHeaderError(f"unsupported ndim {ndim}")
    if reserved != 0:
        raise UnsupportedHeaderError("reserved byte must be 0")
    if code == DTYPE_F32:
        np_dtype, width = "<f4", 4
    elif code == DTYPE_F64:
        np_dtype, width = "<f8", 8
    else:
        raise UnsupportedDtypeError(f"unsupported dtype code {code}")
    if any(v == 0 for v in dims):
        raise PayloadMismatchError(f"zero dimension in header {tuple(dims)}")
    count = int(np.prod(dims, dtype=np.int64))
    payload = len(buf) - HEADER_SIZE
    if payload < count * width:
        raise TruncatedPayloadError(f"payload truncated: {payload} of {count * width} bytes")
    if payload > count * width:
        raise PayloadMismatchError(f"payload has {payload} bytes, header dims need {count * width}")
    data = np.frombuffer(buf, dtype=np_dtype, count=count, offset=HEADER_SIZE)
    return KernelTensor(name, *dims, data=data.astype(np.float64))


def read_tensor_file(path, name: Optional[str] = None) -> KernelTensor:
    from pathlib import Path

    p = Path(path)
    return load_tensor(p.read_bytes(), name=name if name is not None else p.stem)


def write_tensor_file(path, t: KernelTensor, dtype: str = "f64") -> None:
    from pathlib import Path

    Path(path).write_bytes(save_tensor(t, dtype=dtype))


# --- architecture descriptors --------------------------------------------

@dataclass(frozen=True)
class LayerDescriptor:
    name: str
    o: int
    i: int
    kh: int
    kw: int
    group: str
    module_index: int
    kind: str = "conv"

    @property
    def d(self) -> int:
        return self.i * self.kh * self.kw

    @property
    def shape_key(self) -> tuple[int, int]:
        return (self.o, self.d)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "o": self.o, "i": self.i, "kh": self.kh, "kw": self.kw,
            "group": self.group, "module_index": self.module_index, "kind": self.kind,
        }


def parse_architecture(items: list) -> list[LayerDescriptor]:
    if not isinstance(items, list):
        raise ArchitectureError("architecture must be a JSON array")
    layers = []
    for n, item in enumerate(items):
        if not isinstance(item, dict):
            raise ArchitectureError(f"entry {n} is not an object")
        item = dict(item)
        for alias, key in (("k_h", "kh"), ("k_w", "kw")):
            if alias in item:
                item.setdefault(key, item.pop(alias))
        try:
            dims = {k: item[k] for k in ("o", "i", "kh", "kw")}
            name = str(item["name"])
        except KeyError as e:
            raise ArchitectureError(f"entry {n} missing field {e.args[0]!r}") from None
        for k, v in dims.items():
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ArchitectureError(f"layer {name!r}: {k} must be a positive integer, got {v!r}")
        d = dims["i"] * dims["kh"] * dims["kw"]
        group = str(item.get("group", f"{dims['o']}x{d}"))
        idx = item.get("module_index", 0)
        if not isinstance(idx, int) or isinstance(idx, bool) or idx < 0:
            raise ArchitectureError(f"layer {name!r}: module_index must be a non-negative integer")
        kind = item.get("kind", "conv")
        if kind not in KINDS:
            raise ArchitectureError(f"layer {name!r}: kind must be one of {KINDS}, got {kind!r}")
        layers.append(LayerDescriptor(name, dims["o"], dims["i"], dims["kh"], dims["kw"], group, idx, kind))

    names = [l.name for l in layers]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ArchitectureError(f"duplicate layer names: {dupes}")
    groups: dict[str, list[int]] = {}
    for l in layers:
        groups.setdefault(l.group, []).append(l.module_index)
    for g, idxs in groups.items():
        if sorted(idxs) != list(range(len(idxs))):
            raise ArchitectureError(f"group {g!r}: module indices {sorted(idxs)} are not contiguous from 0")
    return layers


def load_architecture(text: str) -> list[LayerDescriptor]:
    try:
        items = json.loads(text)
    except json.JSONDecodeError as e:
        raise ArchitectureError(f"invalid JSON: {e}") from None
    return parse_architecture(items)


def dump_architecture(layers: list[LayerDescriptor]) -> str:
    return json.dumps([l.to_dict() for l in layers], indent=2)
