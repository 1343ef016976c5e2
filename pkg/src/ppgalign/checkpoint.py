"""Self-describing checkpoint container.

Layout::

    b"APCK" | u32 version | u64 header_len | header JSON (utf-8) | tensor bytes | sha256

The header lists every tensor (name, dtype, shape, offset, nbytes) plus the
metadata: encoder config, step, validation loss, rng state and free-form
extras. The trailing digest covers everything before it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .encoder import EncoderConfig

MAGIC = b"APCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DIGEST = 32


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, field_name: str, expected, found):
        super().__init__(f"encoder config mismatch on '{field_name}': expected {expected!r}, checkpoint has {found!r}")
        self.field = field_name


@dataclass
class Checkpoint:
    state: dict[str, torch.Tensor]
    encoder_config: EncoderConfig
    step: int = 0
    validation_loss: float | None = None
    rng_state: dict = field(default_factory=dict)
    kind: str = "contrastive"
    meta: dict = field(default_factory=dict)

    def tensors_equal(self, other: "Checkpoint") -> bool:
        if self.state.keys() != other.state.keys():
            return False
        return all(torch.equal(self.state[k], other.state[k]) for k in self.state)


_DTYPES = {
    "float32": torch.float32, "float64": torch.float64, "int64": torch.int64,
    "uint8": torch.uint8, "int32": torch.int32, "bool": torch.bool,
}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name, t in ckpt.state.items():
        t = t.detach().cpu().contiguous()
        arr = t.numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({
            "name": name, "dtype": str(t.dtype).removeprefix("torch."),
            "shape": list(t.shape), "offset": offset, "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "kind": ckpt.kind,
        "encoder_config": ckpt.encoder_config.to_dict(),
        "step": int(ckpt.step),
        # repr keeps the float bit-exact through JSON
        "validation_loss": None if ckpt.validation_loss is None else repr(float(ckpt.validation_loss)),
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def load_checkpoint(path, expected_config: EncoderConfig | None = None) -> Checkpoint:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _PREFIX.size + _DIGEST:
        raise CorruptCheckpointError(f"{path}: file too short ({len(buf)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, reader supports {VERSION}")
    body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen])
    except ValueError as e:
        raise CorruptCheckpointError(f"{path}: unreadable header: {e}") from e
    data = body[_PREFIX.size + hlen:]
    state = {}
    for t in header["tensors"]:
        dtype = _DTYPES[t["dtype"]]
        chunk = data[t["offset"]:t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise CorruptCheckpointError(f"{path}: tensor {t['name']} truncated")
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype.newbyteorder("<")
        arr = np.frombuffer(chunk, dtype=np_dtype).reshape(t["shape"]).copy()
        state[t["name"]] = torch.from_numpy(arr)
    cfg = EncoderConfig.from_dict(header["encoder_config"])
    if expected_config is not None:
        check_config(expected_config, cfg)
    vl = header["validation_loss"]
    return Checkpoint(
        state=state,
        encoder_config=cfg,
        step=header["step"],
        validation_loss=None if vl is None else float(vl),
        rng_state=header["rng_state"],
        kind=header["kind"],
        meta=header["meta"],
    )


def check_config(expected: EncoderConfig, found: EncoderConfig) -> None:
    for f in fields(EncoderConfig):
        a, b = getattr(expected, f.name), getattr(found, f.name)
        if a != b:
            raise ConfigMismatchError(f.name, a, b)
