"""Single-file checkpoint container.

Layout: 4-byte magic, u32 format version, u64 header length, a JSON
header (sorted keys), then every tensor's raw little-endian payload
back to back. The header carries the flat config snapshot, mode, step
counter, PRNG state, both vocabularies, and a tensor index with byte
offsets, so a file is loaded fully or not at all.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IntegrityError

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"PFCK"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: dict
    mode: str
    step: int
    src_tokens: list[str]
    tgt_tokens: list[str]
    arrays: dict[str, np.ndarray]
    rng_state: dict | None = None
    version: int = VERSION

    def require_mode(self, expected: str):
        if self.mode != expected:
            raise ConfigError(f"checkpoint was trained in mode "
                              f"{self.mode!r}, not {expected!r}")
        return self


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return tag
    raise ConfigError(f"cannot serialize dtype {arr.dtype}")


def save_checkpoint(path, ck: Checkpoint) -> None:
    index = []
    offset = 0
    blobs = []
    for name in sorted(ck.arrays):
        arr = np.ascontiguousarray(ck.arrays[name])
        tag = _dtype_tag(arr)
        blob = arr.astype(_DTYPES[tag], copy=False).tobytes()
        index.append({"name": name, "shape": list(arr.shape),
                      "dtype": tag, "offset": offset})
        blobs.append(blob)
        offset += len(blob)

    header = {
        "config": ck.config,
        "mode": ck.mode,
        "step": int(ck.step),
        "rng_state": ck.rng_state,
        "src_tokens": ck.src_tokens,
        "tgt_tokens": ck.tgt_tokens,
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ck.version))
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise IntegrityError(f"{path}: format version {version} is not "
                             f"supported (expected {VERSION})")
    (head_len,) = struct.unpack_from("<Q", raw, 8)
    body_at = 16 + head_len
    if len(raw) < body_at:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:body_at].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    payload = raw[body_at:]
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        n_bytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + n_bytes > len(payload):
            raise IntegrityError(
                f"{path}: payload for {entry['name']!r} is truncated")
        arr = np.frombuffer(payload[start:start + n_bytes], dtype=dt)
        arrays[entry["name"]] = arr.reshape(shape).copy()

    return Checkpoint(config=header["config"], mode=header["mode"],
                      step=header["step"], src_tokens=header["src_tokens"],
                      tgt_tokens=header["tgt_tokens"], arrays=arrays,
                      rng_state=header["rng_state"], version=version)
