"""Portable binary checkpoints.

Layout (all integers little-endian)::

    offset 0   4 bytes   magic b"MMIM"
    offset 4   u32       format version
    offset 8   u64       header length H
    offset 16  H bytes   UTF-8 JSON header (sorted keys, no whitespace)
    ...        payload   tensor bytes, each entry 8-byte aligned, zero padded

The header holds ``config`` (model/run config), ``tensors`` (a list of
``{name, dtype, shape, offset, nbytes}`` with offsets relative to the
payload start), ``rng`` (numpy bit-generator state), ``step`` and ``meta``.
Tensor names are namespaced: ``model/...``, ``optim/m/...``,
``optim/v/...``, ``ema/...``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

MAGIC = b"MMIM"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_ALIGN = 8
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: Dict[str, np.ndarray]
    rng_state: Optional[dict] = None
    step: int = 0
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _dtype_code(arr: np.ndarray) -> str:
    code = arr.dtype.newbyteorder("<").str
    if code not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return code


def to_bytes(ckpt: Checkpoint) -> bytes:
    directory, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], order="C")
        code = _dtype_code(arr)
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        directory.append({"name": name, "dtype": code, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        pad = (-len(raw)) % _ALIGN
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header = {"config": ckpt.config, "tensors": directory, "rng": ckpt.rng_state,
              "step": int(ckpt.step), "meta": ckpt.meta}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint: missing header prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not an MMIM checkpoint")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported "
                              f"(this build reads version {VERSION})")
    start = _PREFIX.size + hlen
    if len(buf) < start:
        raise CheckpointError("truncated checkpoint: header cut short")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc

    payload = memoryview(buf)[start:]
    tensors, spans, names = {}, [], set()
    for entry in header["tensors"]:
        name, code = entry["name"], entry["dtype"]
        if name in names:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        names.add(name)
        if code not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {code!r} for {name}")
        off, n = int(entry["offset"]), int(entry["nbytes"])
        shape = tuple(entry["shape"])
        dt = _DTYPES[code]
        if n != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"byte length of {name} does not match its shape")
        if off < 0 or off + n > len(payload):
            raise CheckpointError(f"truncated checkpoint: {name} extends past end of file")
        spans.append((off, off + n, name))
        tensors[name] = np.frombuffer(payload[off:off + n], dtype=dt).reshape(shape).copy()
    spans.sort()
    for (_, end, a), (nxt, _, b) in zip(spans, spans[1:]):
        if nxt < end:
            raise CheckpointError(f"overlapping tensor payloads: {a} and {b}")
    return Checkpoint(header["config"], tensors, header.get("rng"), int(header["step"]),
                      header.get("meta", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(buf)
