"""
Binary codecs: TNSR tensors, named-tensor checkpoints, and 8-bit PGM/PPM.

TNSR layout: ``b"TNSR"``, version byte ``0x01``, u32 rank, rank x u32 dims,
then the float32 payload, all little-endian, row-major.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"TNSR"
VERSION = 1


def encode_tensor(array) -> bytes:
    a = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = MAGIC + bytes([VERSION]) + struct.pack("<I", a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes()


def read_tensor(stream) -> np.ndarray:
    """Read one TNSR record from a binary stream positioned at its magic."""
    head = stream.read(9)
    if len(head) < 9:
        raise FormatError("truncated TNSR header")
    if head[:4] != MAGIC:
        raise FormatError(f"bad magic {head[:4]!r}")
    if head[4] != VERSION:
        raise FormatError(f"unsupported TNSR version {head[4]}")
    (rank,) = struct.unpack("<I", head[5:9])
    raw_dims = stream.read(4 * rank)
    if len(raw_dims) < 4 * rank:
        raise FormatError("truncated TNSR dims")
    dims = struct.unpack(f"<{rank}I", raw_dims)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = stream.read(4 * count)
    if len(payload) < 4 * count:
        raise FormatError(f"truncated TNSR payload: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def decode_tensor(data: bytes) -> np.ndarray:
    stream = io.BytesIO(data)
    out = read_tensor(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after TNSR payload")
    return out


def save_tensor(path, array) -> None:
    with open(path, "wb") as f:
        f.write(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())


# ---------------------------------------------------------------------------
# checkpoints: u32 count, then (u16 name length, utf-8 name, TNSR) per entry,
# then a trailing utf-8 metadata block running to end of file
# ---------------------------------------------------------------------------

def encode_named_tensors(tensors: dict, metadata: str = "") -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        out.append(struct.pack("<H", len(raw)) + raw + encode_tensor(value))
    out.append(metadata.encode("utf-8"))
    return b"".join(out)


def decode_named_tensors(data: bytes) -> tuple[dict, str]:
    stream = io.BytesIO(data)
    head = stream.read(4)
    if len(head) < 4:
        raise FormatError("truncated checkpoint header")
    (count,) = struct.unpack("<I", head)
    tensors = {}
    for _ in range(count):
        raw_len = stream.read(2)
        if len(raw_len) < 2:
            raise FormatError("truncated checkpoint entry")
        (n,) = struct.unpack("<H", raw_len)
        name = stream.read(n)
        if len(name) < n:
            raise FormatError("truncated checkpoint entry name")
        tensors[name.decode("utf-8")] = read_tensor(stream)
    return tensors, stream.read().decode("utf-8")


def save_named_tensors(path, tensors: dict, metadata: str = "") -> None:
    with open(path, "wb") as f:
        f.write(encode_named_tensors(tensors, metadata))


def load_named_tensors(path) -> tuple[dict, str]:
    with open(path, "rb") as f:
        return decode_named_tensors(f.read())


# ---------------------------------------------------------------------------
# binary PGM (P5) / PPM (P6), maxval 255
# ---------------------------------------------------------------------------

def _read_header_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # single whitespace byte precedes the raster


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode a binary PGM/PPM into a uint8 array of shape (H, W, C)."""
    tokens, pos = _read_header_tokens(data, 4)
    magic = tokens[0]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise FormatError(f"not a binary PGM/PPM (magic {magic!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-numeric PNM header field") from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    size = width * height * channels
    raster = data[pos:pos + size]
    if len(raster) < size:
        raise FormatError("truncated PNM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels).copy()


def encode_pnm(image) -> bytes:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError("PNM encoder expects uint8 pixels")
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c == 1:
        magic = b"P5"
    elif c == 3:
        magic = b"P6"
    else:
        raise ValueError(f"PNM supports 1 or 3 channels, got {c}")
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    try:
        return decode_pnm(data)
    except FormatError as exc:
        raise FormatError(f"{os.fspath(path)}: {exc}") from exc


def write_pnm(path, image) -> None:
    with open(path, "wb") as f:
        f.write(encode_pnm(image))


def map_to_uint8(values) -> np.ndarray:
    """Scale a map in [0, 1] to 8-bit gray levels."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.round(v * 255).astype(np.uint8)
