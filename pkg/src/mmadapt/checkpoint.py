"""Flat binary container for parameters, optimizer state and caches.

Layout: magic ``GILL`` | u32 version | u64 header length | JSON header |
payload. The header lists {name, shape, dtype, offset} per array (offsets
relative to the payload start) plus a free-form meta dict; payloads are
little-endian fp32. The header JSON is canonical (sorted keys, no spaces),
so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"GILL"
VERSION = 1


def save_container(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": "<f4", "offset": len(payload)})
        payload += arr.tobytes()
    header = json.dumps({"arrays": entries, "meta": meta},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic (not a checkpoint container)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt header ({exc})") from None
    payload = blob[16 + hlen:]

    spans = []
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        off = entry["offset"]
        if off < 0 or off + nbytes > len(payload):
            raise ValueError(f"{path}: truncated payload for array {entry['name']!r}")
        spans.append((off, off + nbytes, entry["name"]))
        arr = np.frombuffer(payload[off:off + nbytes], dtype="<f4").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
    spans.sort()
    for (_, end, name), (start, _, name2) in zip(spans, spans[1:]):
        if start < end:
            raise ValueError(f"{path}: overlapping arrays {name!r} and {name2!r}")
    return arrays, header["meta"]


def save_target_cache(path, cache: dict[str, np.ndarray]) -> None:
    captions = sorted(cache)
    arrays = {f"t{i:06d}": cache[cap] for i, cap in enumerate(captions)}
    meta = {"kind": "target-cache",
            "captions": {f"t{i:06d}": cap for i, cap in enumerate(captions)}}
    save_container(path, arrays, meta)


def load_target_cache(path) -> dict[str, np.ndarray]:
    arrays, meta = load_container(path)
    if meta.get("kind") != "target-cache":
        raise ValueError(f"{path}: not a target cache container")
    return {cap: arrays[name] for name, cap in meta["captions"].items()}
