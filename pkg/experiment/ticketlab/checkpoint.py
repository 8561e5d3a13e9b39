"""Binary checkpoints for weights (θ₀, θₖ, θ_T, trained results) and masks.

Layout (all integers little-endian):

    b"TKLB"  u32 version  u8 precision code
    32 bytes model sha256  32 bytes config sha256
    u16 len + provenance (UTF-8)  i64 epoch (-1 when unset)
    u32 param-metadata JSON len + JSON
    u32 tensor count, then per tensor:
        u16 len + name  u8 rank  u64 dims[rank]  raw scalar payload
    u8 has_mask, then when set:
        u32 entry count, then per entry: u16 len + name  u8 rank  u64 dims[rank]  packed bits (LSB first)
        u32 mask-metadata JSON len + JSON

A tensor is prunable iff its name ends in ".weight". The whole file is parsed
before any object is built, so a bad file never yields a partial load.
"""

from dataclasses import dataclass
import json
import logging
from pathlib import Path
import struct
from typing import Optional

import numpy as np

from .autograd import dtype_for
from .errors import (
    CheckpointDigestError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    PrecisionMismatchError,
)
from .masking import Mask
from .model import ParamEntry, ParamSet

logger = logging.getLogger(__name__)

MAGIC = b"TKLB"
VERSION = 1
PRECISION_CODES = {"f32": 1, "f64": 2}
_PAYLOAD_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NO_DIGEST = "0" * 64


@dataclass
class Checkpoint:
    """Weights and/or a mask, stamped with the model and config they belong to."""

    precision: str
    model_digest: str
    config_digest: str = _NO_DIGEST
    params: Optional[ParamSet] = None
    mask: Optional[Mask] = None
    provenance: str = ""
    epoch: Optional[int] = None

    def __post_init__(self):
        if self.precision not in PRECISION_CODES:
            raise ValueError(f"Unknown precision: {self.precision}.")
        if not self.provenance and self.params is not None:
            self.provenance = self.params.provenance


def _digest_bytes(hex_digest: str) -> bytes:
    raw = bytes.fromhex(hex_digest)
    if len(raw) != 32:
        raise ValueError(f"expected a sha256 hex digest, got {hex_digest!r}")
    return raw


def _name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _shape(shape) -> bytes:
    return struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)


def _blob(payload: dict) -> bytes:
    raw = json.dumps(payload, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    dtype = _PAYLOAD_DTYPES[checkpoint.precision]
    parts = [
        MAGIC,
        struct.pack("<IB", VERSION, PRECISION_CODES[checkpoint.precision]),
        _digest_bytes(checkpoint.model_digest),
        _digest_bytes(checkpoint.config_digest),
        _name(checkpoint.provenance),
        struct.pack("<q", -1 if checkpoint.epoch is None else checkpoint.epoch),
    ]
    params = checkpoint.params
    parts.append(_blob(params.metadata if params is not None else {}))
    entries = list(params) if params is not None else []
    parts.append(struct.pack("<I", len(entries)))
    for entry in entries:
        if entry.value.dtype != dtype:
            raise PrecisionMismatchError(
                "<memory>", f"{entry.name} is {entry.value.dtype}, checkpoint precision is {checkpoint.precision}"
            )
        parts += [_name(entry.name), _shape(entry.value.shape), entry.value.astype(dtype, copy=False).tobytes()]
    mask = checkpoint.mask
    parts.append(struct.pack("<B", 0 if mask is None else 1))
    if mask is not None:
        parts.append(struct.pack("<I", len(mask.entries)))
        for name, m in mask.entries:
            parts += [_name(name), _shape(m.shape), np.packbits(m.ravel(), bitorder="little").tobytes()]
        parts.append(_blob({"exempt": sorted(mask.exempt_names), "metadata": mask.metadata}))
    return b"".join(parts)


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Write `checkpoint` to `path` (parent directories are created)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(checkpoint)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    tmp.replace(path)
    logger.debug("wrote %s (%d bytes, %s)", path, len(data), checkpoint.provenance)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(self.path, f"needs {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def shape(self) -> tuple:
        (rank,) = self.unpack("<B")
        return self.unpack(f"<{rank}Q")

    def blob(self) -> dict:
        (n,) = self.unpack("<I")
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointTruncatedError(self.path, f"corrupt metadata: {e}") from e


def decode_checkpoint(data: bytes, path="<memory>") -> Checkpoint:
    r = _Reader(data, path)
    if len(data) < len(MAGIC) or r.take(len(MAGIC)) != MAGIC:
        raise CheckpointMagicError(path, "not a TKLB checkpoint")
    version, code = r.unpack("<IB")
    if version != VERSION:
        raise CheckpointVersionError(path, f"version {version}, expected {VERSION}")
    precisions = {v: k for k, v in PRECISION_CODES.items()}
    if code not in precisions:
        raise CheckpointVersionError(path, f"unknown precision code {code}")
    precision = precisions[code]
    dtype = _PAYLOAD_DTYPES[precision]
    model_digest, config_digest = r.take(32).hex(), r.take(32).hex()
    provenance = r.name()
    (epoch,) = r.unpack("<q")
    param_metadata = r.blob()
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        name, shape = r.name(), r.shape()
        size = int(np.prod(shape, dtype=np.int64))
        value = np.frombuffer(r.take(size * dtype.itemsize), dtype=dtype).reshape(shape)
        entries.append(ParamEntry(name, value.astype(dtype_for(precision)), name.endswith(".weight")))
    (has_mask,) = r.unpack("<B")
    mask = None
    if has_mask:
        (n_mask,) = r.unpack("<I")
        mask_entries = []
        for _ in range(n_mask):
            name, shape = r.name(), r.shape()
            size = int(np.prod(shape, dtype=np.int64))
            packed = np.frombuffer(r.take((size + 7) // 8), dtype=np.uint8)
            bits = np.unpackbits(packed, count=size, bitorder="little").astype(bool)
            mask_entries.append((name, bits.reshape(shape)))
        blob = r.blob()
        mask = Mask(mask_entries, frozenset(blob.get("exempt", [])), blob.get("metadata", {}))
    if r.pos != len(data):
        raise CheckpointTruncatedError(path, f"{len(data) - r.pos} trailing bytes")
    params = ParamSet(entries, provenance, param_metadata) if entries else None
    return Checkpoint(precision, model_digest, config_digest, params, mask, provenance, None if epoch < 0 else epoch)


def load_checkpoint(
    path, model_digest: Optional[str] = None, precision: Optional[str] = None
) -> Checkpoint:
    """Read a checkpoint, optionally checking it against the current session.

    Args:
        model_digest: When given, the stored model digest must match it.
        precision: When given, the stored precision must match it (no silent casts).

    Raises:
        CheckpointMagicError, CheckpointVersionError, CheckpointTruncatedError,
        CheckpointDigestError, PrecisionMismatchError
    """
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    checkpoint = decode_checkpoint(data, path)
    if model_digest is not None and checkpoint.model_digest != model_digest:
        raise CheckpointDigestError(
            path, f"model digest {checkpoint.model_digest[:12]}… does not match {model_digest[:12]}…"
        )
    if precision is not None and checkpoint.precision != precision:
        raise PrecisionMismatchError(path, f"stored as {checkpoint.precision}, session uses {precision}")
    return checkpoint
