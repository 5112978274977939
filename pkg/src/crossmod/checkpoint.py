"""Model parameter checkpoints.

Layout: u64 little-endian header length, UTF-8 JSON header, then the
concatenated float32 payloads. The header maps module name -> tensor name ->
{shape, offset} with offsets relative to the payload start, plus an optional
"config" object carried alongside the weights.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .ioutil import atomic_write_bytes
from .tensor import Tensor


class CheckpointError(ValueError):
    pass


def save_params(params, path, config=None) -> int:
    """Serialize {module: {name: Tensor}} to `path`; returns bytes written."""
    modules = {}
    chunks = []
    offset = 0
    for mod in params:
        entry = {}
        for name, t in params[mod].items():
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            raw = arr.tobytes()
            entry[name] = {"shape": list(arr.shape), "offset": offset}
            chunks.append(raw)
            offset += len(raw)
        modules[mod] = entry
    header = {"modules": modules, "payload_bytes": offset}
    if config is not None:
        header["config"] = config
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)
    return atomic_write_bytes(path, blob)


def load_params(path):
    """Read a checkpoint; returns (params, config). Tensors require grad."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if 8 + hlen > len(blob):
        raise CheckpointError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed JSON header: {e}") from e
    payload = blob[8 + hlen :]
    if len(payload) != header.get("payload_bytes", len(payload)):
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}"
        )
    params = {}
    for mod, entries in header["modules"].items():
        params[mod] = {}
        for name, meta in entries.items():
            shape = tuple(meta["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4
            start = meta["offset"]
            if start + nbytes > len(payload):
                raise CheckpointError(f"{path}: tensor {mod}.{name} overruns the payload")
            arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start)
            params[mod][name] = Tensor(arr.reshape(shape).copy(), requires_grad=True)
    return params, header.get("config")


def flatten_params(params):
    """Deterministic list of all tensors (insertion order of the tree)."""
    out = []
    for mod in params:
        out.extend(params[mod].values())
    return out
