"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HSCT"  u32 version
    u32 header length, header JSON (UTF-8, sorted keys): {"config": ..., "meta": ...}
    u32 tensor count, then per tensor:
        u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims, float32 data
    u8 optimizer flag; when 1: u64 step, u32 record count, records as above

Saving the same state twice produces identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Mapping

import numpy as np

from .errors import CheckpointFormatError, ConfigError, TruncatedCheckpointError

MAGIC = b"HSCT"
VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class CheckpointData:
    config: dict[str, Any] | None
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)
    optim_step: int | None = None
    optim_tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _header_bytes(config, meta) -> bytes:
    return json.dumps({"config": config, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()


def _write_record(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    if len(raw) > 0xFFFF:
        raise ValueError(f"tensor name too long: {name[:40]}...")
    arr = np.asarray(arr)
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


def encode(ckpt: CheckpointData) -> bytes:
    f = io.BytesIO()
    header = _header_bytes(ckpt.config, ckpt.meta)
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(header)))
    f.write(header)
    f.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        _write_record(f, name, arr)
    if ckpt.optim_step is None:
        f.write(b"\x00")
    else:
        f.write(b"\x01")
        f.write(struct.pack("<QI", ckpt.optim_step, len(ckpt.optim_tensors)))
        for name, arr in ckpt.optim_tensors.items():
            _write_record(f, name, arr)
    return f.getvalue()


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"{self.source}: truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def record(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode()
        (ndim,) = self.unpack("<B")
        dims = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(self.take(count * 4), dtype=_F32).reshape(dims).astype(np.float32)
        return name, arr


def decode(buf: bytes, source: str = "<bytes>") -> CheckpointData:
    r = _Reader(buf, source)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {magic!r}, not a checkpoint file")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: format version {version}, this build reads {VERSION}")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{source}: corrupt header: {e}") from None
    (count,) = r.unpack("<I")
    tensors = dict(r.record() for _ in range(count))
    (flag,) = r.unpack("<B")
    step, optim = None, {}
    if flag == 1:
        step, n_opt = r.unpack("<QI")
        optim = dict(r.record() for _ in range(n_opt))
    elif flag != 0:
        raise CheckpointFormatError(f"{source}: bad optimizer flag {flag}")
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{source}: {len(buf) - r.pos} trailing bytes")
    return CheckpointData(header.get("config"), tensors, header.get("meta") or {}, step, optim)


def read_checkpoint(path: str | Path) -> CheckpointData:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def write_checkpoint(path: str | Path, ckpt: CheckpointData) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)
    return path


def save_checkpoint(path: str | Path, model, optim=None, config: Mapping | None = None,
                    meta: Mapping | None = None) -> Path:
    """Write model tensors (and Adam moments when ``optim`` is given).

    ``config`` is the run-config echo; it defaults to the model config.
    """
    from .config import to_dict

    echo = dict(config) if config is not None else {"model": to_dict(model.cfg)}
    ckpt = CheckpointData(echo, dict(model.state_dict()), dict(meta or {}))
    if optim is not None:
        ckpt.optim_step = int(optim.t)
        for name, p in model.params.items():
            ckpt.optim_tensors[f"{name}.adam_m"] = p.m
            ckpt.optim_tensors[f"{name}.adam_v"] = p.v
    return write_checkpoint(path, ckpt)


def config_mismatch(stored: Mapping | None, expected: Mapping) -> list[str]:
    """Dotted paths where the stored echo disagrees with ``expected``."""
    out: list[str] = []

    def walk(a, b, path):
        if isinstance(a, dict) and isinstance(b, dict):
            for k in sorted(set(a) | set(b)):
                walk(a.get(k, "<missing>"), b.get(k, "<missing>"), f"{path}.{k}" if path else k)
        elif a != b:
            out.append(path)

    walk(stored or {}, dict(expected), "")
    return out


def load_checkpoint(path: str | Path, model, optim=None, expected_config: Mapping | None = None) -> CheckpointData:
    """Restore ``model`` (and ``optim``) in place.

    The model-architecture section of the echo must match ``model.cfg``; a
    full ``expected_config`` may be given to compare every section.
    """
    from .config import to_dict

    ckpt = read_checkpoint(path)
    stored = ckpt.config or {}
    diff = config_mismatch({"model": stored.get("model")}, {"model": to_dict(model.cfg)})
    if expected_config is not None:
        diff += [d for d in config_mismatch(stored, expected_config) if d not in diff]
    if diff:
        raise ConfigError(f"{path}: checkpoint config differs at {', '.join(diff[:8])}")
    model.load_state_dict(ckpt.tensors)
    if optim is not None:
        if ckpt.optim_step is None:
            raise CheckpointFormatError(f"{path}: no optimizer state stored")
        optim.t = ckpt.optim_step
        for name, p in model.params.items():
            p.m = ckpt.optim_tensors[f"{name}.adam_m"].astype(p.data.dtype)
            p.v = ckpt.optim_tensors[f"{name}.adam_v"].astype(p.data.dtype)
    return ckpt
