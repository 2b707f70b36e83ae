"""Bit-exact binary checkpoints.

Layout: the 8-byte magic ``MOXCKPT1``, a little-endian u32 format version,
a little-endian u32 header length, the UTF-8 JSON header (sorted keys, no
whitespace), then the payload: every parameter as little-endian float32 in
manifest order.  Headers never contain timestamps, so saving the same
parameters twice produces byte-identical files.

Training runs in float64; saving quantizes to float32 and loading upcasts
back, so a round trip is idempotent after the first quantization.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError
from .store import ParamStore

MAGIC = b"MOXCKPT1"
FORMAT_VERSION = 1


def quantize(theta: ParamStore) -> ParamStore:
    """The float64 -> float32 -> float64 round trip a save/load applies."""
    return theta.map(lambda a: a.astype("<f4").astype(np.float64))


def save_checkpoint(theta: ParamStore, meta: dict, path: str | Path) -> None:
    """Write theta at float32 with a JSON header; deterministic bytes."""
    manifest = [[name, list(arr.shape)] for name, arr in theta]
    header = {
        "format_version": FORMAT_VERSION,
        "manifest": manifest,
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(FORMAT_VERSION).tobytes())
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for _, arr in theta:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    """Read a checkpoint back as float64; verifies magic, version, and length."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8:
        raise FormatError("file too short for checkpoint header", offset=len(raw))
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {raw[:8]!r}", offset=0)
    pos = len(MAGIC)
    version = int(np.frombuffer(raw, dtype="<u4", count=1, offset=pos)[0])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=pos)
    pos += 4
    hlen = int(np.frombuffer(raw, dtype="<u4", count=1, offset=pos)[0])
    pos += 4
    if len(raw) < pos + hlen:
        raise FormatError("truncated header", offset=len(raw))
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}", offset=pos) from None
    pos += hlen
    manifest = header["manifest"]
    total = sum(int(np.prod(shape)) if shape else 1 for _, shape in manifest)
    expected = 4 * total
    if len(raw) - pos != expected:
        raise FormatError(
            f"payload length {len(raw) - pos} != 4 * {total} parameters", offset=pos
        )
    entries = []
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        entries.append((name, vals.astype(np.float64).reshape(shape)))
    return ParamStore(entries), header["meta"]
