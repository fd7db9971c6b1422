"""Binary parameter container shared by classifier and MAE checkpoints.

Layout (all integers little-endian):

    magic      4 bytes ("CTRS" classifier, "MAES" autoencoder)
    version    u32
    config     u32 byte length, then UTF-8 JSON (sorted keys)
    count      u32 number of parameter arrays
    arrays     concatenated little-endian float64, declaration order

Shapes are not stored; they follow from the config.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, magic: bytes, config: dict, arrays) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path, magic: bytes, shapes_from_config) -> tuple[dict, list[np.ndarray]]:
    """Parse a container; ``shapes_from_config(config)`` gives the array shapes."""
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, 8)
    offset = 12 + cfg_len
    try:
        config = json.loads(raw[12:offset].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable config block ({exc})") from None
    if offset + 4 > len(raw):
        raise CheckpointError(f"{path}: truncated before the array count")
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    shapes = shapes_from_config(config)
    if count != len(shapes):
        raise CheckpointError(f"{path}: {count} arrays stored, config implies {len(shapes)}")
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated parameter data at byte {offset}")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64))
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return config, arrays
