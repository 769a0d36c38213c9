"""Binary model checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"MVTS"
    version u16      format version (currently 1)
    config  u32 length + UTF-8 JSON of the model config (sorted keys)
    arrays  repeated until EOF:
        name_len u32, name bytes (UTF-8),
        rank u32, dims rank x u64,
        data prod(dims) x float32

Arrays hold every trainable tensor plus batch-norm running statistics; a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import FormatError, ParameterError
from .model import ModelConfig, params_from_arrays

MAGIC = b"MVTS"
VERSION = 1
_MAX_RANK = 8


def _config_json(config):
    return json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")


def save_checkpoint(params, path):
    """Write params (trainable + running stats) for ``params.config`` to ``path``."""
    arrays = {name: t.data for name, t in params.named_parameters().items()}
    arrays.update(params.named_state())
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    cfg = _config_json(params.config)
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        blob += struct.pack("<I", len(name_b))
        blob += name_b
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}Q", *data.shape)
        blob += data.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def exhausted(self):
        return self.pos >= len(self.buf)


def read_arrays(path):
    """Parse a checkpoint file into (config, name -> float32 ndarray)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC!r}", offset=0)
    version = r.u16("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    cfg_len = r.u32("config length")
    try:
        cfg_dict = json.loads(r.take(cfg_len, "config block").decode("utf-8"))
        config = ModelConfig.from_dict(cfg_dict)
    except (ValueError, TypeError, ParameterError) as exc:
        raise FormatError(f"invalid config block: {exc}", offset=10) from exc
    arrays = {}
    while not r.exhausted:
        name_len = r.u32("array name length")
        name = r.take(name_len, "array name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        if rank > _MAX_RANK:
            raise FormatError(f"implausible rank {rank} for array {name}", offset=r.pos - 4)
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name}"))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(4 * count, f"data of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return config, arrays


def load_checkpoint(path, expect_config=None):
    """Load a checkpoint; optionally verify it matches an expected config."""
    config, arrays = read_arrays(path)
    if expect_config is not None and expect_config != config:
        raise ParameterError(
            f"checkpoint config {config.to_dict()} does not match expected {expect_config.to_dict()}"
        )
    try:
        params = params_from_arrays(config, arrays)
    except ParameterError as exc:
        raise FormatError(f"checkpoint arrays inconsistent with config: {exc}") from exc
    return params, config


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
