"""
Little-endian binary containers with a CRC32 trailer.

Checkpoint archive layout::

    8s   magic
    u32  version
    u32  meta length, then UTF-8 JSON (sorted keys)
    u32  array count
    per array (sorted by name):
        u16 name length, name (UTF-8)
        array block (see ``Writer.array``)
    u32  CRC32 of every preceding byte
"""

import json
import struct
import zlib

import numpy as np

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u8"), 3: np.dtype("<i4"),
          4: np.dtype("<i8"), 5: np.dtype("u1")}
_TAGS = {(dt.kind, dt.itemsize): tag for tag, dt in DTYPES.items()}


class FormatError(ValueError):
    """Malformed, truncated or corrupted file."""


class Writer:
    def __init__(self):
        self.parts = []

    def raw(self, data):
        self.parts.append(bytes(data))

    def pack(self, fmt, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def array(self, a):
        """u8 dtype tag, u8 ndim, u32 dims, payload."""
        a = np.asarray(a)
        tag = _TAGS.get((a.dtype.kind, a.dtype.itemsize))
        if tag is None:
            raise TypeError(f"unsupported dtype {a.dtype}")
        self.pack("BB", tag, a.ndim)
        self.pack(f"{a.ndim}I", *a.shape)
        self.raw(np.ascontiguousarray(a, dtype=DTYPES[tag]).tobytes())

    def getvalue(self, checksum=True):
        body = b"".join(self.parts)
        if checksum:
            body += struct.pack("<I", zlib.crc32(body))
        return body


class Reader:
    def __init__(self, blob, name="file"):
        self.blob = blob
        self.pos = 0
        self.name = name

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.name}: truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct("<" + fmt)
        values = s.unpack(self.take(s.size))
        return values if len(values) > 1 else values[0]

    def array(self):
        tag, ndim = self.unpack("BB")
        if tag not in DTYPES:
            raise FormatError(f"{self.name}: unknown dtype tag {tag}")
        dims = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        dt = DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(self.take(count * dt.itemsize), dtype=dt)
        return data.reshape(dims).astype(dt.newbyteorder("="))

    def done(self):
        if self.pos != len(self.blob):
            raise FormatError(f"{self.name}: {len(self.blob) - self.pos} trailing bytes")


def verified_body(blob, magic, version, name="file"):
    """Check magic, version and CRC; return a Reader positioned after the version."""
    if len(blob) < len(magic) + 8:
        raise FormatError(f"{name}: truncated")
    if blob[:len(magic)] != magic:
        raise FormatError(f"{name}: bad magic {blob[:len(magic)]!r}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{name}: checksum mismatch (file corrupted or truncated)")
    reader = Reader(body, name)
    reader.take(len(magic))
    got = reader.unpack("I")
    if got != version:
        raise FormatError(f"{name}: unsupported version {got}")
    return reader


def write_archive(path, magic, version, meta, arrays):
    w = Writer()
    w.raw(magic)
    w.pack("I", version)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    w.pack("I", len(meta_bytes))
    w.raw(meta_bytes)
    w.pack("I", len(arrays))
    for key in sorted(arrays):
        encoded = key.encode()
        w.pack("H", len(encoded))
        w.raw(encoded)
        w.array(arrays[key])
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def read_archive(path, magic, version):
    with open(path, "rb") as fh:
        blob = fh.read()
    r = verified_body(blob, magic, version, str(path))
    meta = json.loads(r.take(r.unpack("I")).decode())
    arrays = {}
    for _ in range(r.unpack("I")):
        key = r.take(r.unpack("H")).decode()
        arrays[key] = r.array()
    r.done()
    return meta, arrays
