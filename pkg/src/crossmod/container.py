"""On-disk feature container and the chronological split.

File layout (bit-exact):
  magic b"MGC3" | u32 version=1 | u64 header length | UTF-8 JSON header |
  payload of little-endian float32 blobs.

The header's record table lists id, label, timestamp, tensor shapes, the
record's byte offset into the payload, and a CRC32 of its payload bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .ioutil import atomic_write_bytes

MAGIC = b"MGC3"
VERSION = 1

N_REWRITES = 3
_TENSOR_FIELDS = ("text_tokens", "rewrite_tokens", "visual_frames", "audio_frames")


class ContainerError(ValueError):
    pass


class MalformedHeaderError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class LayoutMismatchError(ContainerError):
    """Shapes/offsets in the header disagree with the payload."""


class ChecksumError(ContainerError):
    pass


@dataclass
class FeatureRecord:
    """Pre-extracted features for one video."""

    id: str
    label: int  # 0 = real, 1 = fake
    timestamp: int
    text_tokens: np.ndarray          # (L_t, d)
    rewrite_tokens: list             # 3 arrays, each (L_t, d)
    visual_frames: np.ndarray        # (K, d)
    audio_frames: np.ndarray         # (T, d)

    def validate(self):
        if self.label not in (0, 1):
            raise ContainerError(f"record {self.id}: label must be 0 or 1, got {self.label}")
        if len(self.rewrite_tokens) != N_REWRITES:
            raise ContainerError(
                f"record {self.id}: expected {N_REWRITES} rewrite views, got {len(self.rewrite_tokens)}"
            )
        d = self.text_tokens.shape[1]
        for name in ("text_tokens", "visual_frames", "audio_frames"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[1] != d:
                raise ContainerError(
                    f"record {self.id}: {name} has shape {arr.shape}, expected (*, {d})"
                )
        for v, arr in enumerate(self.rewrite_tokens):
            if arr.shape != self.text_tokens.shape:
                raise ContainerError(
                    f"record {self.id}: rewrite {v} shape {arr.shape} != text shape {self.text_tokens.shape}"
                )
        if self.text_tokens.shape[0] < 1:
            raise ContainerError(f"record {self.id}: empty text sequence")
        if self.visual_frames.shape[0] < 1:
            raise ContainerError(f"record {self.id}: empty visual sequence")
        if self.audio_frames.shape[0] < 2:
            raise ContainerError(
                f"record {self.id}: audio needs >= 2 timesteps, got {self.audio_frames.shape[0]}"
            )

    def tensors(self):
        yield "text", self.text_tokens
        for v, arr in enumerate(self.rewrite_tokens):
            yield f"rewrite{v}", arr
        yield "visual", self.visual_frames
        yield "audio", self.audio_frames

    def __eq__(self, other):
        if not isinstance(other, FeatureRecord):
            return NotImplemented
        if (self.id, self.label, self.timestamp) != (other.id, other.label, other.timestamp):
            return False
        mine = list(self.tensors())
        theirs = list(other.tensors())
        return all(
            a[1].shape == b[1].shape and (a[1] == b[1]).all() for a, b in zip(mine, theirs)
        )


def write_container(records, path) -> int:
    """Write records; returns total bytes written."""
    records = list(records)
    if not records:
        raise ContainerError("write_container: record list is empty")
    table = []
    chunks = []
    offset = 0
    for rec in records:
        rec.validate()
        raw = b""
        shapes = []
        for name, arr in rec.tensors():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            shapes.append([name, list(arr.shape)])
            raw += arr.tobytes()
        table.append(
            {
                "id": rec.id,
                "label": int(rec.label),
                "timestamp": int(rec.timestamp),
                "shapes": shapes,
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = {"records": table, "payload_bytes": offset}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return atomic_write_bytes(path, blob)


def read_container(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise MalformedHeaderError(f"{path}: missing container magic bytes")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported container version {version}")
    if 16 + hlen > len(blob):
        raise MalformedHeaderError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
        table = header["records"]
        payload_bytes = header["payload_bytes"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise MalformedHeaderError(f"{path}: malformed header: {e}") from e
    payload = blob[16 + hlen :]
    if len(payload) < payload_bytes:
        raise TruncatedPayloadError(
            f"{path}: payload truncated: {len(payload)} bytes present, {payload_bytes} expected"
        )

    records = []
    for meta in table:
        start, nbytes = meta["offset"], meta["nbytes"]
        if start + nbytes > len(payload):
            raise LayoutMismatchError(
                f"{path}: record {meta['id']} offsets [{start}, {start + nbytes}) overrun the payload"
            )
        raw = payload[start : start + nbytes]
        expected = sum(
            int(np.prod(s, dtype=np.int64)) * 4 for _, s in meta["shapes"]
        )
        if expected != nbytes:
            raise LayoutMismatchError(
                f"{path}: record {meta['id']} shapes need {expected} bytes, header says {nbytes}"
            )
        if zlib.crc32(raw) != meta["crc32"]:
            raise ChecksumError(f"{path}: record {meta['id']} failed its CRC32 check")
        arrays = {}
        pos = 0
        for name, shape in meta["shapes"]:
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            arrays[name] = arr
            pos += n * 4
        records.append(
            FeatureRecord(
                id=meta["id"],
                label=meta["label"],
                timestamp=meta["timestamp"],
                text_tokens=arrays["text"],
                rewrite_tokens=[arrays[f"rewrite{v}"] for v in range(N_REWRITES)],
                visual_frames=arrays["visual"],
                audio_frames=arrays["audio"],
            )
        )
    return records


def chronological_split(records, ratios=(0.7, 0.15, 0.15)):
    """Sort by timestamp and cut into (train, val, test) by the given ratios.

    Sizes are floor(r0*N), floor(r1*N), remainder. Ties in timestamp are
    broken by id so shuffled input yields the same split as sorted input.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    if len(ratios) != 3:
        raise ValueError(f"expected 3 ratios, got {len(ratios)}")
    recs = sorted(records, key=lambda r: (r.timestamp, r.id))
    n = len(recs)
    n_train = int(n * ratios[0] + 1e-9)
    n_val = int(n * ratios[1] + 1e-9)
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(
            f"{n} records cannot be split into three non-empty parts with ratios {ratios}"
        )
    return recs[:n_train], recs[n_train : n_train + n_val], recs[n_train + n_val :]
