"""MVW1: a little-endian, CRC-checked archive of named float32 tensors.

Layout::

    b"MVW1" | u32 version | u32 tensor_count
    per tensor: u16 name_len | name (UTF-8) | u8 dtype (0=f32) | u8 rank | rank x u32 dims | f32 data
    u32 CRC-32 (IEEE) of every byte after the magic
"""
from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ArchiveError
from .layers import Module

MAGIC = b"MVW1"
VERSION = 1
DTYPE_F32 = 0
BUFFER_SUFFIXES = ("running_mean", "running_var")


def is_buffer_name(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in BUFFER_SUFFIXES


class WeightArchive:
    """Ordered mapping of unique names to float32 arrays."""

    def __init__(self, tensors: Iterable[tuple[str, np.ndarray]] = (), version: int = VERSION):
        self.version = version
        self.tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in tensors:
            if name in self.tensors:
                raise ArchiveError(f"duplicate tensor name {name!r}", field="name")
            self.tensors[name] = np.array(arr, dtype=np.float32, copy=True)

    @classmethod
    def from_model(cls, model: Module) -> WeightArchive:
        return cls(model.state_dict().items())

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightArchive):
            return NotImplemented
        if self.version != other.version or list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )

    def param_count(self) -> int:
        return sum(a.size for n, a in self.tensors.items() if not is_buffer_name(n))

    def to_bytes(self) -> bytes:
        body = bytearray(struct.pack("<II", self.version, len(self.tensors)))
        for name, arr in self.tensors.items():
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ArchiveError(f"tensor name too long: {name[:40]!r}...", field="name_len")
            if arr.ndim > 0xFF:
                raise ArchiveError(f"rank {arr.ndim} too large for {name!r}", field="rank")
            body += struct.pack("<H", len(encoded)) + encoded
            body += struct.pack("<BB", DTYPE_F32, arr.ndim)
            body += struct.pack(f"<{arr.ndim}I", *arr.shape)
            body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
        return MAGIC + bytes(body) + struct.pack("<I", crc)

    @classmethod
    def from_bytes(cls, raw: bytes) -> WeightArchive:
        reader = _Reader(raw)
        if reader.take(4, "magic") != MAGIC:
            raise ArchiveError("bad magic", field="magic", offset=0)
        if len(raw) < 16:
            raise ArchiveError("file too short", field="header", offset=len(raw))
        stored_crc = struct.unpack_from("<I", raw, len(raw) - 4)[0]
        actual_crc = zlib.crc32(raw[4:-4]) & 0xFFFFFFFF
        reader.limit = len(raw) - 4
        version, count = reader.unpack("<II", "version/tensor_count")
        if version != VERSION:
            raise ArchiveError(f"unsupported version {version}", field="version", offset=4)
        tensors = []
        for _ in range(count):
            (name_len,) = reader.unpack("<H", "name_len")
            name_at = reader.pos
            try:
                name = reader.take(name_len, "name").decode("utf-8")
            except UnicodeDecodeError:
                raise ArchiveError("name is not valid UTF-8", field="name", offset=name_at) from None
            dtype_at = reader.pos
            dtype, rank = reader.unpack("<BB", "dtype/rank")
            if dtype != DTYPE_F32:
                raise ArchiveError(f"unsupported dtype code {dtype} for {name!r}", field="dtype", offset=dtype_at)
            dims = reader.unpack(f"<{rank}I", "dims") if rank else ()
            n = int(np.prod(dims, dtype=np.int64)) if dims else 1
            payload = reader.take(4 * n, f"data of {name!r}")
            tensors.append((name, np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)))
        if reader.pos != reader.limit:
            raise ArchiveError("trailing bytes before CRC", field="crc", offset=reader.pos)
        if stored_crc != actual_crc:
            raise ArchiveError(
                f"CRC mismatch: stored {stored_crc:08x}, computed {actual_crc:08x}", field="crc", offset=len(raw) - 4
            )
        return cls(tensors, version)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0
        self.limit = len(raw)

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.limit:
            raise ArchiveError(f"truncated while reading {what}", field=what, offset=self.pos)
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def save(archive: WeightArchive, path: str | Path) -> None:
    Path(path).write_bytes(archive.to_bytes())


def _read(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ArchiveError(f"cannot read {path}: {exc}") from exc


def load(path: str | Path) -> WeightArchive:
    return WeightArchive.from_bytes(_read(path))


@dataclass
class TensorEntry:
    name: str
    shape: tuple[int, ...]
    count: int
    buffer: bool


@dataclass
class Listing:
    entries: list[TensorEntry]
    crc: int
    crc_ok: bool
    version: int = VERSION

    @property
    def total_params(self) -> int:
        return sum(e.count for e in self.entries if not e.buffer)

    @property
    def total_buffers(self) -> int:
        return sum(e.count for e in self.entries if e.buffer)

    def format(self) -> str:
        width = max([len(e.name) for e in self.entries] + [4])
        lines = [f"{'name':<{width}}  {'shape':<20}  {'count':>10}"]
        for e in self.entries:
            shape = "x".join(str(s) for s in e.shape) or "scalar"
            tag = "  (buffer)" if e.buffer else ""
            lines.append(f"{e.name:<{width}}  {shape:<20}  {e.count:>10}{tag}")
        lines.append(f"tensors: {len(self.entries)}")
        lines.append(f"total params: {self.total_params}")
        lines.append(f"total buffer values: {self.total_buffers}")
        lines.append(f"crc32: {self.crc:08x} {'OK' if self.crc_ok else 'MISMATCH'}")
        return "\n".join(lines) + "\n"


def inspect(path: str | Path) -> Listing:
    """List an archive's tensors; CRC failures propagate as :class:`ArchiveError`."""
    raw = _read(path)
    archive = WeightArchive.from_bytes(raw)
    entries = [TensorEntry(n, a.shape, int(a.size), is_buffer_name(n)) for n, a in archive]
    return Listing(entries, struct.unpack("<I", raw[-4:])[0], True, archive.version)


@dataclass
class ApplyResult:
    loaded: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    unexpected: list[str] = field(default_factory=list)


def apply(model: Module, archive: WeightArchive, strict: bool = True) -> ApplyResult:
    """Copy archive tensors into ``model``.

    Strict mode demands identical names and shapes. Lenient mode loads what
    matches and leaves shape-mismatched tensors at their fresh initialization
    (e.g. a classification head for a different number of classes).
    """
    state = model.state_dict()
    result = ApplyResult()
    for name, target in state.items():
        if name not in archive.tensors:
            result.missing.append(name)
        elif archive.tensors[name].shape != target.shape:
            result.skipped.append(name)
        else:
            result.loaded.append(name)
    result.unexpected = [n for n in archive.tensors if n not in state]
    if strict and (result.missing or result.skipped or result.unexpected):
        parts = []
        if result.missing:
            parts.append(f"missing from archive: {result.missing}")
        if result.unexpected:
            parts.append(f"not in model: {result.unexpected}")
        for name in result.skipped:
            parts.append(f"shape mismatch {name}: archive {archive.tensors[name].shape} vs model {state[name].shape}")
        raise ArchiveError("strict load failed; " + "; ".join(parts))
    model.load_arrays({n: archive.tensors[n] for n in result.loaded})
    return result
