"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RSRK"
    u16   format version
    str   architecture tag                (str = u16 byte length + UTF-8)
    u32   epoch
    f64   validation SNR
    u64   seed
    u16   number of metadata pairs, then (str key, str value) pairs
    u32   number of tensors, then per tensor:
          str name, u8 rank, u32 extents[rank], f32 payload
    u32   CRC32 of every byte after the magic and before the CRC
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ArchitectureError,
    CheckpointError,
    CheckpointVersionError,
    ChecksumError,
    TruncatedCheckpointError,
)
from .models import Network, build_model

MAGIC = b"RSRK"
VERSION = 1


@dataclass
class CheckpointMeta:
    arch: str
    epoch: int = 0
    val_snr: float = float("nan")
    seed: int = 0
    config: dict[str, str] = field(default_factory=dict)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode_checkpoint(model: Network, *, epoch: int = 0, val_snr: float = float("nan"),
                      seed: int = 0, metadata: dict | None = None) -> bytes:
    config = {f"model.{k}": str(v) for k, v in model.config.items()}
    config.update({str(k): str(v) for k, v in (metadata or {}).items()})
    body = bytearray()
    body += struct.pack("<H", VERSION)
    body += _pack_str(model.arch)
    body += struct.pack("<IdQ", epoch, val_snr, seed)
    body += struct.pack("<H", len(config))
    for k in sorted(config):
        body += _pack_str(k) + _pack_str(config[k])
    params = model.parameters()
    body += struct.pack("<I", len(params))
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        body += _pack_str(name) + struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    return MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Network, path, **meta) -> None:
    Path(path).write_bytes(encode_checkpoint(model, **meta))


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def _parse(body: bytes) -> tuple[CheckpointMeta, dict[str, np.ndarray]]:
    r = _Reader(body, 2)
    arch = r.string()
    epoch, val_snr, seed = r.unpack("<IdQ")
    (n_meta,) = r.unpack("<H")
    config = {}
    for _ in range(n_meta):
        k = r.string()
        config[k] = r.string()
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        name = r.string()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise ChecksumError(f"{len(body) - r.pos} unexpected trailing bytes")
    return CheckpointMeta(arch, epoch, val_snr, seed, config), tensors


def decode_checkpoint(data: bytes) -> tuple[CheckpointMeta, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {data[:4]!r})")
    if len(data) < 4 + 2 + 4:
        raise TruncatedCheckpointError(f"checkpoint is only {len(data)} bytes")
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    body, (crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) == crc:
        return _parse(body)
    # classify the failure: a short file fails structurally, anything else is corruption
    try:
        _parse(body)
    except TruncatedCheckpointError:
        raise TruncatedCheckpointError("checkpoint is truncated") from None
    except (CheckpointError, UnicodeDecodeError, ValueError, struct.error):
        pass
    raise ChecksumError(f"CRC32 mismatch: stored {crc:#010x}, computed {zlib.crc32(body):#010x}")


def load_checkpoint(path, expected_arch: str | None = None) -> tuple[Network, CheckpointMeta]:
    meta, tensors = decode_checkpoint(Path(path).read_bytes())
    if expected_arch is not None and meta.arch != expected_arch:
        raise ArchitectureError(
            f"{path}: checkpoint holds a {meta.arch!r} network, expected {expected_arch!r}")
    model_cfg = {k[len("model."):]: v for k, v in meta.config.items() if k.startswith("model.")}
    model = build_model(meta.arch, model_cfg, seed=0)
    model.load_state_dict(tensors)
    return model, meta


def checkpoint_checksum(path) -> str:
    """CRC32 stored in a checkpoint's trailer, as hex; identifies a parent model."""
    data = Path(path).read_bytes()
    return f"{struct.unpack('<I', data[-4:])[0]:08x}"
