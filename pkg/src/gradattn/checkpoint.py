"""Single-file checkpoints: JSON header + little-endian float32 buffers.

Layout::

    b"GATNCKPT"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length in bytes
    header                 UTF-8 JSON: {"config", "meta", "tensors": [{name, shape, offset, nbytes}]}
    payload                concatenated '<f4' buffers, offsets relative to payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"GATNCKPT"
VERSION = 1
_DTYPE = np.dtype("<f4")


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"config": config, "meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Return ``(tensors, config, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20 : 20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    payload = memoryview(raw)[20 + hlen :]
    tensors = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload) or e["nbytes"] != 4 * int(np.prod(e["shape"], dtype=np.int64)):
            raise FormatError(f"{path}: tensor {e['name']} is truncated or mis-sized")
        tensors[e["name"]] = np.frombuffer(payload[e["offset"] : end], dtype=_DTYPE).reshape(e["shape"]).copy()
    return tensors, header["config"], header["meta"]
