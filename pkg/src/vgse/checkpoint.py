"""GCPT checkpoint files.

Layout (little endian)::

    b"GCPT" | u16 version | u32 header_len | header (UTF-8 JSON) | f32 payloads

The header holds ``config``, ``metadata`` and a ``tensors`` directory of
``{name, shape, offset, count}`` entries; offsets are in floats from the start
of the payload, in directory order. Values are stored as float32, so a
round trip preserves each value to float32 precision.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import EncoderConfig, EncoderParams

MAGIC = b"GCPT"
VERSION = 1


def to_storage_precision(params: EncoderParams) -> EncoderParams:
    """Copy of ``params`` rounded through float32, i.e. exactly what a checkpoint holds."""
    return EncoderParams.from_arrays({k: v.astype(np.float32).astype(np.float64) for k, v in params.as_arrays().items()})


def encode_checkpoint(params: EncoderParams, config: EncoderConfig, metadata: dict) -> bytes:
    directory = []
    offset = 0
    payloads = []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"config": config.to_dict(), "metadata": metadata, "tensors": directory}, sort_keys=True
    ).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<HI", VERSION, len(header)), header, *payloads])


def save_checkpoint(params: EncoderParams, config: EncoderConfig, metadata: dict, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params, config, metadata))


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> tuple[EncoderParams, EncoderConfig, dict]:
    if blob[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 10:
        raise FormatError(f"{source}: truncated header")
    version, header_len = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    start = 10 + header_len
    if start > len(blob):
        raise FormatError(f"{source}: truncated header")
    try:
        header = json.loads(blob[10:start].decode("utf-8"))
        config = EncoderConfig.from_dict(header["config"])
        directory = header["tensors"]
        metadata = header["metadata"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{source}: unreadable header ({exc})") from exc
    total = sum(int(e["count"]) for e in directory)
    if len(blob) - start != 4 * total:
        raise FormatError(f"{source}: payload has {len(blob) - start} bytes, expected {4 * total}")
    payload = np.frombuffer(blob, dtype="<f4", offset=start)
    arrays = {}
    for e in directory:
        shape = tuple(int(s) for s in e["shape"])
        count, offset = int(e["count"]), int(e["offset"])
        if int(np.prod(shape)) != count or offset + count > total:
            raise FormatError(f"{source}: directory entry {e['name']!r} is inconsistent")
        arrays[e["name"]] = payload[offset : offset + count].astype(np.float64).reshape(shape)
    return EncoderParams.from_arrays(arrays), config, metadata


def load_checkpoint(path) -> tuple[EncoderParams, EncoderConfig, dict]:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
