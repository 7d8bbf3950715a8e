"""DFC1 tensor container.

Little-endian layout::

    b"DFC1"  u32 version=1  u32 entry_count
    per entry: u16 name_len, UTF-8 name, u8 dtype (0=f32, 1=f64), u8 ndim,
               u32 dims[ndim], raw data
    u32 CRC32 of every preceding byte

Names are namespaced ``backbone.*``, ``adapter.*``, ``opt.*``, ``rng.*`` and
``meta.*``. Strings (config JSON) are stored as f32 byte values under
``meta.*``; 64-bit integers (hashes, RNG words) as f64 arrays of 32-bit chunks.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, MagicError, VersionError

MAGIC = b"DFC1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def dump(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = 0 if arr.dtype == np.float32 else 1
        data = np.asarray(arr, dtype=_DTYPES[code], order="C")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def parse(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise MagicError("DFC1: bad magic")
    if len(raw) < 16:
        raise ChecksumError("DFC1: truncated file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise VersionError(f"DFC1: unsupported version {version}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("DFC1: checksum mismatch")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(raw, dt, n, off).reshape(dims)
            off += n * dt.itemsize
            out[name] = arr.astype(dt.newbyteorder("="))
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"DFC1: malformed entry: {exc}") from exc
    if off != len(body):
        raise FormatError("DFC1: trailing bytes")
    return out


def save(entries: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(dump(entries))


def load(path) -> dict[str, np.ndarray]:
    return parse(Path(path).read_bytes())


# -- encodings for non-tensor metadata -----------------------------------
def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8)).decode("utf-8")


def encode_json(obj) -> np.ndarray:
    return encode_text(json.dumps(obj, sort_keys=True))


def decode_json(arr: np.ndarray):
    return json.loads(decode_text(arr))


def encode_uint(value: int, words: int) -> list[float]:
    return [float((value >> (32 * i)) & 0xFFFFFFFF) for i in range(words)]


def decode_uint(chunks) -> int:
    return sum(int(c) << (32 * i) for i, c in enumerate(chunks))


def encode_hex(h: str) -> np.ndarray:
    value = int(h, 16)
    return np.array(encode_uint(value, (len(h) * 4 + 31) // 32), dtype=np.float64)


def decode_hex(arr: np.ndarray, digits: int = 16) -> str:
    return f"{decode_uint(arr):0{digits}x}"


def encode_rng(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise TypeError("only PCG64 generators are serializable")
    words = (encode_uint(st["state"]["state"], 4) + encode_uint(st["state"]["inc"], 4)
             + [float(st["has_uint32"]), float(st["uinteger"])])
    return np.array(words, dtype=np.float64)


def decode_rng(arr: np.ndarray) -> np.random.Generator:
    arr = np.asarray(arr)
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64",
                "state": {"state": decode_uint(arr[0:4]), "inc": decode_uint(arr[4:8])},
                "has_uint32": int(arr[8]), "uinteger": int(arr[9])}
    return np.random.Generator(bg)
