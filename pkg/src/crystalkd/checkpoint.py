"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"CRYSG1"                  magic
    u32   version              FORMAT_VERSION
    u32   n, n bytes           meta, UTF-8 JSON with sorted keys
    u32   count                number of parameters
    count x:
        u16 n, n bytes         parameter name
        u32 rows, u32 cols
        rows*cols <f8          value, row-major
    u64   t                    Adam step counter
    count x (m, v)             Adam moments, <f8, same shapes as the values
    32 bytes                   SHA-256 of everything above

Nothing is compressed, so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError, VersionError
from .tensor import ParamStore

MAGIC = b"CRYSG1"
FORMAT_VERSION = 1
_DIGEST = 32


def dumps(store: ParamStore, meta: dict[str, Any] | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    meta_bytes = json.dumps(meta or {}, sort_keys=True, allow_nan=False).encode("utf-8")
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(store))]
    for name, p in store.items():
        raw = name.encode("utf-8")
        rows, cols = p.shape
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<II", rows, cols)]
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    parts.append(struct.pack("<Q", store.t))
    for name in store.names():
        parts.append(np.ascontiguousarray(store.m[name], dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(store.v[name], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CorruptionError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, rows: int, cols: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * rows * cols), dtype="<f8").astype(np.float64).reshape(rows, cols)


def loads(data: bytes) -> tuple[ParamStore, dict[str, Any]]:
    """Inverse of :func:`dumps`. Checks magic, then version, then the checksum."""
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic bytes)")
    if len(data) < len(MAGIC) + 4:
        raise CorruptionError("checkpoint is truncated")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version: expected {FORMAT_VERSION}, found {version}")
    if len(data) < len(MAGIC) + 4 + _DIGEST or hashlib.sha256(data[:-_DIGEST]).digest() != data[-_DIGEST:]:
        raise CorruptionError("checkpoint checksum mismatch")

    r = _Reader(data, len(data) - _DIGEST)
    r.pos = len(MAGIC) + 4
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"checkpoint metadata is unreadable: {exc}") from None
    (count,) = r.unpack("<I")
    store = ParamStore()
    for _ in range(count):
        (k,) = r.unpack("<H")
        name = r.take(k).decode("utf-8")
        rows, cols = r.unpack("<II")
        store.add(name, r.floats(rows, cols))
    (store.t,) = r.unpack("<Q")
    for name, p in store.items():
        store.m[name] = r.floats(*p.shape)
        store.v[name] = r.floats(*p.shape)
    if r.pos != r.end:
        raise CorruptionError(f"checkpoint has {r.end - r.pos} trailing bytes")
    return store, meta


def save_checkpoint(store: ParamStore, meta: dict[str, Any] | None, path: str | Path) -> None:
    Path(path).write_bytes(dumps(store, meta))


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict[str, Any]]:
    return loads(Path(path).read_bytes())


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# typed wrappers for the two model kinds

def model_meta(kind: str, encoder, layout, **extra) -> dict[str, Any]:
    return {"kind": kind, "encoder": encoder.to_dict(), "layout": layout.to_dict(), **extra}


def _expect(meta: dict, kind: str, path) -> None:
    found = meta.get("kind")
    if found != kind:
        raise ConfigError(f"{path}: expected a {kind} checkpoint, found {found!r}")


def load_teacher(path: str | Path):
    """(Teacher, FeatureLayout) from a pre-training checkpoint."""
    from .distill import Teacher
    from .encoder import EncoderConfig
    from .graph import FeatureLayout

    store, meta = load_checkpoint(path)
    _expect(meta, "teacher", path)
    return Teacher(store, EncoderConfig(**meta["encoder"])), FeatureLayout.from_dict(meta["layout"])


def save_student(student, layout, path: str | Path) -> None:
    save_checkpoint(student.store, model_meta("student", student.encoder, layout,
                                              teacher_dim=student.teacher_dim), path)


def load_student(path: str | Path):
    """(Student, FeatureLayout) from a distillation checkpoint."""
    from .distill import Student
    from .encoder import EncoderConfig
    from .graph import FeatureLayout

    store, meta = load_checkpoint(path)
    _expect(meta, "student", path)
    student = Student(store, EncoderConfig(**meta["encoder"]), meta.get("teacher_dim"))
    return student, FeatureLayout.from_dict(meta["layout"])
