"""Checkpoint container: a single little-endian binary file.

Layout:

    "S2BN" | version u32 | stage | scheme | arch | epoch u32
    | tensor entries ... | crc32 u32

Strings are u32 length + UTF-8. Each tensor entry is name length u32,
name bytes, dtype code u8 (0 = float32, 1 = uint64 for packed words),
rank u32, dims u32 each, then the raw little-endian payload. The table
has no count field; it runs until the trailing CRC, which covers every
byte between the magic and itself. Together with the magic comparison
that leaves no byte of the file unchecked.
"""

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from bnnkit.errors import ConfigError, FormatError

MAGIC = b"S2BN"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u8")}


@dataclass
class CkptHeader:
    stage: str
    scheme: str
    arch: str
    epoch: int
    version: int = VERSION


def _dtype_code(arr):
    if arr.dtype == np.float32:
        return 0
    if arr.dtype == np.uint64:
        return 1
    raise ConfigError(f"checkpoint tensors must be float32 or uint64, got {arr.dtype}")


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def serialize(header, tensors):
    """Whole file as bytes. Tensor order follows the dict."""
    parts = [MAGIC, struct.pack("<I", header.version)]
    parts += [_pack_str(header.stage), _pack_str(header.scheme), _pack_str(header.arch)]
    parts.append(struct.pack("<I", header.epoch))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        code = _dtype_code(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", code))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    body = b"".join(parts)
    crc = zlib.crc32(body[4:]) & 0xFFFFFFFF
    return body + struct.pack("<I", crc)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated while reading {what}", offset=self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what):
        n = self.u32(f"{what} length")
        return self.take(n, what).decode("utf-8")


def deserialize(blob):
    """Parse bytes into (CkptHeader, ordered tensor dict)."""
    if len(blob) < 12:
        raise FormatError("file too short for header and CRC", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    stored = struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(blob[4:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise FormatError(
            f"CRC mismatch: stored 0x{stored:08x}, computed 0x{actual:08x}",
            offset=len(blob) - 4)

    r = _Reader(blob[:-4])
    r.pos = 4
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    header = CkptHeader(
        stage=r.string("stage"),
        scheme=r.string("scheme"),
        arch=r.string("arch"),
        epoch=0,
        version=version,
    )
    header.epoch = r.u32("epoch")

    tensors = {}
    while r.pos < len(r.blob):
        name = r.string("tensor name")
        code = r.take(1, "dtype code")[0]
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}", offset=r.pos - 1)
        rank = r.u32("rank")
        if rank > 8:
            raise FormatError(f"implausible rank {rank}", offset=r.pos - 4)
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        dt = _DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(count * dt.itemsize, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dt).reshape(dims)
        tensors[name] = arr.astype(np.float32 if code == 0 else np.uint64)
    return header, tensors


def save_checkpoint(path, header, tensors):
    """Atomic write (temp file + rename)."""
    blob = serialize(header, tensors)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    return blob


def load_checkpoint(path):
    with open(path, "rb") as f:
        return deserialize(f.read())
