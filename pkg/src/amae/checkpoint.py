"""Binary checkpoints of named float64 parameter blobs.

Layout (all integers little-endian)::

    magic        8 bytes   b"AMAECKPT"
    version      u32       FORMAT_VERSION
    stage        u8 length + ASCII tag (mae, stage1, moduleA, moduleB)
    fingerprint  32 bytes  sha256 of the config text
    config       u32 length + UTF-8 ``key = value`` text
    count        u32       number of parameters
    per parameter, in sorted name order:
        name     u16 length + UTF-8
        ndim     u8
        shape    ndim x u64
        payload  prod(shape) x f8
    digest       32 bytes  sha256 of every preceding byte
"""

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .exceptions import CheckpointError, ConfigMismatch, VersionMismatch

MAGIC = b"AMAECKPT"
FORMAT_VERSION = 1
STAGES = ("mae", "stage1", "moduleA", "moduleB")


@dataclass
class Checkpoint:
    stage: str
    config: RunConfig
    fingerprint: str
    params: dict  # name -> float64 ndarray


def _as_array(value):
    return np.asarray(getattr(value, "data", value), dtype=np.float64)


def encode_checkpoint(params, config, stage):
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    text = config.to_text().encode("utf-8")
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<B", len(stage)), stage.encode("ascii")]
    out += [hashlib.sha256(text).digest(), struct.pack("<I", len(text)), text, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = _as_array(params[name])
        raw = name.encode("utf-8")
        out += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        out += [struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.astype("<f8").tobytes()]
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, params, config, stage):
    """Write atomically: a temporary sibling file is renamed into place."""
    blob = encode_checkpoint(params, config, stage)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob, expected_config=None, force=False):
    """Parse checkpoint bytes; nothing is returned unless the whole file checks out."""
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an amae checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    if len(blob) < 32 + len(MAGIC) + 4:
        raise CheckpointError("checkpoint truncated before its digest")
    body, digest = blob[:-32], blob[-32:]
    (stage_len,) = r.unpack("<B")
    try:
        stage = r.take(stage_len).decode("ascii")
        fingerprint = r.take(32)
        (text_len,) = r.unpack("<I")
        text = r.take(text_len)
        (count,) = r.unpack("<I")
        params = {}
        for _ in range(count):
            (name_len,) = r.unpack("<H")
            name = r.take(name_len).decode("utf-8")
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}Q")
            size = int(np.prod(shape, dtype=np.int64))
            params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if r.pos != len(body):
        raise CheckpointError("checkpoint length does not match its contents (truncated or padded)")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch (file is corrupt or truncated)")
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage tag {stage!r}")
    if hashlib.sha256(text).digest() != fingerprint:
        raise CheckpointError("config fingerprint does not match the stored config text")
    config = RunConfig.from_text(text.decode("utf-8"))
    if expected_config is not None and expected_config.fingerprint() != fingerprint.hex() and not force:
        raise ConfigMismatch(
            "checkpoint was written under a different configuration "
            f"({fingerprint.hex()[:12]} != {expected_config.fingerprint()[:12]}); pass --force to load anyway"
        )
    return Checkpoint(stage, config, fingerprint.hex(), params)


def load_checkpoint(path, expected_config=None, force=False, stage=None):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = decode_checkpoint(blob, expected_config, force)
    if stage is not None and ckpt.stage != stage:
        raise CheckpointError(f"{path} holds a {ckpt.stage!r} checkpoint, expected {stage!r}")
    return ckpt
