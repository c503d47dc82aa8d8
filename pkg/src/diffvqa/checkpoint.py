"""Binary checkpoint format.

Layout::

    b"DVQK" | u32 LE version | u64 LE header length | UTF-8 JSON header | payload

The header carries the model config, vocabulary, epoch, score, a tensor
directory (name, dtype, shape, offset, nbytes) and the SHA-256 of the
payload.  Tensors are stored as little-endian float64 in directory order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig

MAGIC = b"DVQK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    vocab: list[str]
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    score: float = 0.0
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _encode(ckpt: Checkpoint) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for group, tensors in (("param", ckpt.params), ("optim", ckpt.optimizer)):
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            directory.append({"name": f"{group}/{name}", "dtype": "f8",
                              "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
    payload = b"".join(chunks)
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "vocab": list(ckpt.vocab),
        "epoch": int(ckpt.epoch),
        "score": float(ckpt.score),
        "meta": ckpt.meta,
        "tensors": directory,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, ckpt.version, len(blob)) + blob + payload


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        if not MAGIC.startswith(raw[:4]):
            raise BadMagic("not a checkpoint file")
        raise Truncated("file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this reader supports {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise Truncated("header extends past end of file")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumMismatch(f"corrupt header: {exc}") from None
    payload = raw[start:]
    need = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) < need:
        raise Truncated(f"payload has {len(payload)} bytes, directory needs {need}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ChecksumMismatch("payload checksum mismatch")
    params: dict[str, np.ndarray] = {}
    optim: dict[str, np.ndarray] = {}
    for t in header["tensors"]:
        arr = np.frombuffer(payload, dtype="<f8", count=t["nbytes"] // 8, offset=t["offset"])
        arr = arr.reshape(t["shape"]).astype(np.float64)
        group, name = t["name"].split("/", 1)
        (params if group == "param" else optim)[name] = arr
    return Checkpoint(ModelConfig.from_dict(header["model_config"]), header["vocab"], params,
                      optim, header["epoch"], header["score"], header.get("meta", {}), version)
