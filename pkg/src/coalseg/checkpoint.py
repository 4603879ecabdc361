"""Binary weight snapshots.

Layout, all integers little-endian:

    magic "CSEGCKPT" | u32 version | u32 config_len | canonical config JSON
    | u32 blob_count | per blob: u16 name_len, name, u8 ndim, u32 dims...,
    float64 payload | 32-byte sha256 over every preceding byte

The digest doubles as the deployment identity of a set of weights.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Optional

import numpy as np

from .model import Model, ModelConfig, build_model, config_from_dict, config_to_dict, named_params

MAGIC = b"CSEGCKPT"
VERSION = 1
_DIGEST_LEN = 32


class CheckpointError(Exception):
    """Base class for snapshot problems."""


class CheckpointFormatError(CheckpointError):
    """Bad magic or malformed structure."""


class CheckpointVersionError(CheckpointError):
    """Written by an incompatible format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared content does."""


class CheckpointDigestError(CheckpointError):
    """Integrity digest does not match the content."""


class CheckpointConfigError(CheckpointError):
    """Stored config does not match what the caller asked to load."""


def canonical_config_bytes(cfg: ModelConfig) -> bytes:
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(m: Model, path: str) -> str:
    """Write the snapshot and return its hex digest."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg_bytes = canonical_config_bytes(m.cfg)
    parts.append(struct.pack("<I", len(cfg_bytes)))
    parts.append(cfg_bytes)
    blobs = list(named_params(m))
    parts.append(struct.pack("<I", len(blobs)))
    for name, tensor in blobs:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as f:
        f.write(body)
        f.write(digest)
    return digest.hex()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"need {n} bytes at offset {self.pos}, only {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path: str) -> tuple:
    """Return (config, blobs dict, hex digest) after full validation."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 4 + _DIGEST_LEN:
        raise CheckpointTruncatedError(f"file is only {len(raw)} bytes")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:len(MAGIC)]!r}")
    body, stored = raw[:-_DIGEST_LEN], raw[-_DIGEST_LEN:]
    version = struct.unpack("<I", body[len(MAGIC):len(MAGIC) + 4])[0]
    if version != VERSION:
        raise CheckpointVersionError(f"format version {version}, this build reads {VERSION}")
    actual = hashlib.sha256(body).digest()
    if actual != stored:
        raise CheckpointDigestError("content digest mismatch; snapshot is corrupt")

    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    cfg_len = r.u32()
    try:
        cfg = config_from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    except (ValueError, KeyError) as e:
        raise CheckpointFormatError(f"unreadable config block: {e}") from e
    blobs = {}
    count = r.u32()
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        ndim = r.u8()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape)
        blobs[name] = data.astype(np.float64)
    return cfg, blobs, actual.hex()


def load_checkpoint(path: str, expected_config: Optional[ModelConfig] = None) -> Model:
    """Rebuild a model from a snapshot; optionally insist on a config."""
    cfg, blobs, _ = read_checkpoint(path)
    if expected_config is not None and canonical_config_bytes(expected_config) != canonical_config_bytes(cfg):
        raise CheckpointConfigError(
            "snapshot config does not match the requested one: "
            f"stored {config_to_dict(cfg)}, requested {config_to_dict(expected_config)}"
        )
    m = build_model(cfg, seed=0)
    names = dict(named_params(m))
    if set(names) != set(blobs):
        missing = sorted(set(names) - set(blobs))[:3]
        extra = sorted(set(blobs) - set(names))[:3]
        raise CheckpointFormatError(f"blob names do not match model: missing {missing}, extra {extra}")
    for name, tensor in names.items():
        if blobs[name].shape != tensor.data.shape:
            raise CheckpointFormatError(
                f"blob {name} has shape {blobs[name].shape}, model expects {tensor.data.shape}"
            )
        tensor.data = blobs[name].copy()
    return m


def checkpoint_digest(path: str) -> str:
    """Validate and return the snapshot's hex digest."""
    return read_checkpoint(path)[2]
