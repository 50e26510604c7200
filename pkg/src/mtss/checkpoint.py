"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MTSS" | u32 format version | u64 payload length | payload | u32 crc32(payload)

The payload is a sequence of named sections, each ``u16 name length, name,
u8 section type, u64 body length, body``. Tensor sections hold
``u32 count`` entries of ``u16 key length, key, u8 ndim, u32 dims..., float64
data``; JSON sections hold canonical (sorted, compact) UTF-8 JSON; the cost
section is a single float64. Sections and keys are written in sorted order,
so the bytes are a pure function of the checkpoint contents.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MTSS"
FORMAT_VERSION = 1

_TENSORS, _JSON, _FLOAT = 0, 1, 2


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a run."""
    params: dict[str, np.ndarray]
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    cost: float = 0.0
    meta: dict = field(default_factory=dict)

    def trunk(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith("trunk.")}

    def equals(self, other: "Checkpoint") -> bool:
        """Bitwise equality of every tensor plus equal metadata."""
        return to_bytes(self) == to_bytes(other)


def _section_of(name: str) -> str:
    if name.startswith("trunk."):
        return "trunk"
    if name.startswith("alpha."):
        return "alpha"
    return "heads"


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for key in sorted(tensors):
        arr = np.asarray(tensors[key], dtype="<f8", order="C")
        kb = key.encode()
        out.append(struct.pack("<H", len(kb)) + kb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def _unpack_tensors(body: bytes) -> dict[str, np.ndarray]:
    (n,) = struct.unpack_from("<I", body, 0)
    pos, out = 4, {}
    for _ in range(n):
        (klen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        key = body[pos:pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        out[key] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(body):
        raise CheckpointError("tensor section has trailing bytes")
    return out


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def to_bytes(ckpt: Checkpoint) -> bytes:
    groups: dict[str, dict] = {"trunk": {}, "heads": {}, "alpha": {}}
    for k, v in ckpt.params.items():
        groups[_section_of(k)][k] = v
    optim = {f"{t}/{k}": v for t, state in ckpt.optimizer.items() for k, v in state.items()}
    sections = [
        ("alpha", _TENSORS, _pack_tensors(groups["alpha"])),
        ("cost", _FLOAT, struct.pack("<d", float(ckpt.cost))),
        ("heads", _TENSORS, _pack_tensors(groups["heads"])),
        ("meta", _JSON, _canonical_json(ckpt.meta)),
        ("optimizer", _TENSORS, _pack_tensors(optim)),
        ("rng", _JSON, _canonical_json(ckpt.rng_state)),
        ("trunk", _TENSORS, _pack_tensors(groups["trunk"])),
    ]
    payload = b"".join(
        struct.pack("<H", len(name)) + name.encode() + struct.pack("<BQ", kind, len(body)) + body
        for name, kind, body in sections
    )
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def from_bytes(data: bytes) -> Checkpoint:
    if not data or data[:4] != MAGIC[:len(data[:4])]:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(data) < 20:
        raise ChecksumError(f"checkpoint truncated: {len(data)} bytes")
    version, length = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    payload = data[16:16 + length]
    if len(payload) != length or len(data) != 16 + length + 4:
        raise ChecksumError(f"checkpoint truncated or padded: expected {length + 20} bytes, found {len(data)}")
    (crc,) = struct.unpack_from("<I", data, 16 + length)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    pos, sections = 0, {}
    while pos < len(payload):
        (nlen,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        name = payload[pos:pos + nlen].decode()
        pos += nlen
        kind, blen = struct.unpack_from("<BQ", payload, pos)
        pos += 9
        body = payload[pos:pos + blen]
        pos += blen
        if kind == _TENSORS:
            sections[name] = _unpack_tensors(body)
        elif kind == _JSON:
            sections[name] = json.loads(body.decode())
        elif kind == _FLOAT:
            (sections[name],) = struct.unpack("<d", body)
        else:
            raise CheckpointError(f"unknown section type {kind} for {name!r}")
    params = {**sections.get("trunk", {}), **sections.get("heads", {}), **sections.get("alpha", {})}
    optimizer: dict[str, dict[str, np.ndarray]] = {}
    for key, v in sections.get("optimizer", {}).items():
        task, name = key.split("/", 1)
        optimizer.setdefault(task, {})[name] = v
    return Checkpoint(params, optimizer, sections.get("rng", {}), sections.get("cost", 0.0), sections.get("meta", {}))


def write_checkpoint(path, ckpt: Checkpoint) -> bytes:
    data = to_bytes(ckpt)
    Path(path).write_bytes(data)
    return data


def read_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
