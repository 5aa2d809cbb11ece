"""Fixed-endian checkpoint files.

Layout::

    b"DVLM"  | u8 version | u32 LE header length | header (UTF-8 JSON) | payload

The header lists every tensor (name, shape, byte offset, byte length) in
payload order plus the config snapshot, RNG state and step counter. Payload
values are little-endian float32. JSON is written with sorted keys and no
whitespace so the same checkpoint always serialises to the same bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "CheckpointError",
    "CorruptHeaderError",
    "TruncatedPayloadError",
    "UnsupportedVersionError",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "dumps",
    "loads",
]

MAGIC = b"DVLM"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    def __init__(self, tensor: str, expected: int, got: int):
        super().__init__(f"payload for tensor {tensor!r} truncated: expected {expected} bytes, got {got}")
        self.tensor = tensor


class UnsupportedVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict                      # name -> float32 ndarray, insertion order is file order
    config: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    step: int = 0
    version: int = FORMAT_VERSION
    metrics: object = field(default=None, compare=False, repr=False)   # not serialised

    def tensor_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(v, dtype=_DTYPE).tobytes() for v in self.params.values())


def dumps(ckpt: Checkpoint) -> bytes:
    entries, offset = [], 0
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr)
        nbytes = int(arr.size) * _DTYPE.itemsize
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "tensors": entries,
        "config": ckpt.config,
        "rng_state": ckpt.rng_state,
        "step": int(ckpt.step),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return MAGIC + struct.pack("<BI", ckpt.version, len(hb)) + hb + ckpt.tensor_bytes()


def loads(buf: bytes) -> Checkpoint:
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise CorruptHeaderError("missing DVLM magic bytes")
    version, hlen = struct.unpack("<BI", buf[4:9])
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} is not supported "
                                      f"(expected {FORMAT_VERSION})")
    hend = 9 + hlen
    if len(buf) < hend:
        raise CorruptHeaderError(f"header declares {hlen} bytes but file has {len(buf) - 9}")
    try:
        header = json.loads(buf[9:hend].decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"unreadable header: {exc}") from exc
    payload = buf[hend:]
    params = {}
    for e in entries:
        try:
            name, shape, off, nbytes = e["name"], tuple(e["shape"]), e["offset"], e["nbytes"]
        except (KeyError, TypeError) as exc:
            raise CorruptHeaderError(f"bad tensor entry {e!r}") from exc
        if int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize != nbytes:
            raise CorruptHeaderError(f"tensor {name!r}: shape {shape} does not match {nbytes} bytes")
        chunk = payload[off:off + nbytes]
        if len(chunk) != nbytes:
            raise TruncatedPayloadError(name, nbytes, len(chunk))
        params[name] = np.frombuffer(chunk, dtype=_DTYPE).reshape(shape).astype(np.float32)
    expected_end = entries[-1]["offset"] + entries[-1]["nbytes"] if entries else 0
    if len(payload) > expected_end:
        raise CorruptHeaderError(f"{len(payload) - expected_end} trailing bytes after payload")
    return Checkpoint(params, header.get("config", {}), header.get("rng_state", {}),
                      header.get("step", 0), version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
