"""Self-describing binary checkpoints with bit-exact round-trips.

Layout: magic bytes, format version, two length-prefixed JSON blocks
(loop config, training metadata), then length-prefixed parameter records of
(name, shape, raw little-endian float64 data). Raw float bytes are what make
save/load reproduce tensors exactly.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from .autodiff import ModelParams
from .detector import DetectorModel
from .feedback import IffConfig
from .tensor import PaddingMode

MAGIC = b"FBDETCK\x00"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint."""


def _config_record(cfg: IffConfig) -> dict:
    return {
        "iterations": cfg.iterations,
        "leak": cfg.leak,
        "pad": cfg.pad.value,
        "enforce_contraction": cfg.enforce_contraction,
        "feedback_kernel": cfg.feedback_kernel,
    }


def _config_from_record(rec: dict) -> IffConfig:
    return IffConfig(
        iterations=rec["iterations"],
        leak=rec["leak"],
        pad=PaddingMode(rec["pad"]),
        enforce_contraction=rec["enforce_contraction"],
        feedback_kernel=rec["feedback_kernel"],
    )


def _json_block(payload: dict) -> bytes:
    data = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(data)) + data


def save_checkpoint(path, model: DetectorModel, cfg: IffConfig, meta: Optional[dict] = None) -> None:
    meta = dict(meta or {})
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += _json_block(_config_record(cfg))
    blob += _json_block(meta)
    names = model.params.names()
    blob += struct.pack("<I", len(names))
    for name in names:
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(model.params[name], dtype=np.float64)
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[DetectorModel, IffConfig, dict]:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a detector checkpoint (bad magic bytes)")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    (cfg_len,) = reader.unpack("<I")
    cfg = _config_from_record(json.loads(reader.take(cfg_len).decode("utf-8")))
    (meta_len,) = reader.unpack("<I")
    meta = json.loads(reader.take(meta_len).decode("utf-8"))
    (count,) = reader.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        raw = reader.take(size * 8)
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    model = DetectorModel(params=ModelParams(params), feedback_kernel=cfg.feedback_kernel)
    return model, cfg, meta
