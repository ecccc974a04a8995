"""Binary checkpoint container shared by the flow policy (FMCK) and the retargeting net (IMRT).

Layout, little-endian::

    magic      4 bytes
    version    u32
    json_len   u32
    config     json_len bytes of UTF-8 JSON; its "arrays" entry lists [name, shape] pairs
    payload    float32 arrays in the listed order, C-contiguous
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptPayload, FormatVersionMismatch

CONTAINER_VERSION = 1


def pack(magic: bytes, config: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    config = dict(config)
    config["arrays"] = [[name, list(np.shape(a))] for name, a in arrays]
    header = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<II", CONTAINER_VERSION, len(header)), header]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays]
    return b"".join(parts)


def unpack(magic: bytes, data: bytes, name: str = "checkpoint"):
    """Returns (config, {array name: float32 array}) preserving the stored order."""
    if len(data) < 12 or data[:4] != magic:
        raise CorruptPayload(f"{name}: expected magic {magic!r}")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CONTAINER_VERSION:
        raise FormatVersionMismatch(f"{name}: container version {version} != {CONTAINER_VERSION}")
    try:
        config = json.loads(data[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"{name}: bad config block") from exc
    offset = 12 + n
    arrays = {}
    for arr_name, shape in config["arrays"]:
        count = int(np.prod(shape))
        if offset + 4 * count > len(data):
            raise CorruptPayload(f"{name}: truncated at array {arr_name}")
        arrays[arr_name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(data):
        raise CorruptPayload(f"{name}: {len(data) - offset} trailing bytes")
    return config, arrays


def save(path, magic: bytes, config: dict, arrays) -> None:
    Path(path).write_bytes(pack(magic, config, arrays))


def load(path, magic: bytes):
    return unpack(magic, Path(path).read_bytes(), str(path))
