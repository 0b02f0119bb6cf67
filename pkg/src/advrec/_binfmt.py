"""Little-endian binary container shared by model and delta files.

Layout: 8-byte magic, three uint32 (num_users, num_items, dim), an optional
fixed-size extra header, P then Q as row-major float32, and a trailing
uint64 checksum over everything after the magic.
"""
import hashlib
import struct

import numpy as np

from advrec.errors import FormatError

_DIMS = struct.Struct("<III")
_CHECKSUM = struct.Struct("<Q")


def checksum64(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def pack(magic: bytes, P, Q, extra: bytes = b"") -> bytes:
    P = np.ascontiguousarray(P, dtype="<f4")
    Q = np.ascontiguousarray(Q, dtype="<f4")
    if P.shape[1] != Q.shape[1]:
        raise ValueError("P and Q widths differ")
    body = _DIMS.pack(P.shape[0], Q.shape[0], P.shape[1]) + extra + P.tobytes() + Q.tobytes()
    return magic + body + _CHECKSUM.pack(checksum64(body))


def unpack(magic: bytes, blob: bytes, extra_size: int = 0):
    """Return ``(P, Q, extra_bytes)``; raise FormatError naming the bad offset."""
    if len(blob) < len(magic) or blob[: len(magic)] != magic:
        raise FormatError(0, f"bad magic, expected {magic!r}")
    off = len(magic)
    if len(blob) < off + _DIMS.size + extra_size:
        raise FormatError(len(blob), "truncated header")
    nu, ni, d = _DIMS.unpack_from(blob, off)
    off += _DIMS.size
    extra = blob[off: off + extra_size]
    off += extra_size
    need = 4 * d * (nu + ni)
    if len(blob) < off + need:
        raise FormatError(len(blob), f"truncated matrix data, expected {need} bytes at offset {off}")
    end = off + need
    if len(blob) < end + _CHECKSUM.size:
        raise FormatError(len(blob), "truncated checksum")
    if len(blob) > end + _CHECKSUM.size:
        raise FormatError(end + _CHECKSUM.size, "trailing bytes after checksum")
    (stored,) = _CHECKSUM.unpack_from(blob, end)
    if stored != checksum64(blob[len(magic): end]):
        raise FormatError(end, "checksum mismatch")
    data = np.frombuffer(blob, dtype="<f4", count=d * (nu + ni), offset=off)
    P = data[: nu * d].reshape(nu, d).astype(np.float32)
    Q = data[nu * d:].reshape(ni, d).astype(np.float32)
    return P, Q, extra
