"""Binary checkpoint format: config echo, RNG state, named float64 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"PMAE"
    version u32
    config  u64 length + UTF-8 text (the flat key = value config)
    rng     u64 length + canonical JSON of the generator state
    count   u64 number of tensors, then per tensor in lexicographic name order:
        name    u32 length + UTF-8
        ndim    u32, then u64 per dimension
        payload raw little-endian float64, C order

Tensors are written sorted by name and the JSON is canonical (sorted keys, no
whitespace), so save -> load -> save reproduces the file byte for byte.
Writes go to a temp file in the target directory and are renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .errors import ConfigError

MAGIC = b"PMAE"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    config_text: str
    rng_state: dict
    tensors: dict[str, np.ndarray]

    def config(self) -> RunConfig:
        return RunConfig.from_text(self.config_text)


def from_store(store: ad.ParamStore, cfg: RunConfig,
               rng: np.random.Generator) -> Checkpoint:
    tensors = {name: t.values.copy() for name, t in store.items()}
    return Checkpoint(version=VERSION, config_text=cfg.to_text(),
                      rng_state=rng.bit_generator.state, tensors=tensors)


def write(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", ckpt.version)
    config_bytes = ckpt.config_text.encode("utf-8")
    blob += struct.pack("<Q", len(config_bytes)) + config_bytes
    rng_bytes = json.dumps(ckpt.rng_state, sort_keys=True,
                           separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<Q", len(rng_bytes)) + rng_bytes
    names = sorted(ckpt.tensors)
    blob += struct.pack("<Q", len(names))
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes)) + name_bytes
        blob += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<Q", d)
        blob += arr.tobytes(order="C")
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | Path, store: ad.ParamStore, cfg: RunConfig,
         rng: np.random.Generator) -> None:
    write(path, from_store(store, cfg, rng))


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise ConfigError(f"truncated checkpoint {self.path} "
                              f"(wanted {n} bytes at offset {self.off})")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    config_text = r.take(r.u64()).decode("utf-8")
    try:
        rng_state = json.loads(r.take(r.u64()).decode("utf-8"))
    except ValueError as exc:
        raise ConfigError(f"{path}: corrupt RNG state: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u64()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u64() for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(shape).copy()
        if name in tensors:
            raise ConfigError(f"{path}: duplicate tensor '{name}'")
        tensors[name] = arr
    if r.off != len(data):
        raise ConfigError(f"{path}: {len(data) - r.off} trailing bytes")
    return Checkpoint(version=version, config_text=config_text,
                      rng_state=rng_state, tensors=tensors)


def load_into(store: ad.ParamStore, ckpt: Checkpoint, strict: bool = True) -> None:
    """Copy checkpoint tensors into an initialised store.

    Names are visited in lexicographic order, so the first offending tensor
    reported is deterministic.  ``strict`` requires the name sets to match
    exactly; otherwise tensors missing on either side are skipped (loading a
    pre-training checkpoint into a classification store, which has no decoder
    but fresh head parameters).  A shape mismatch on a shared name is always
    an error.
    """
    for name in store.names():
        if name not in ckpt.tensors:
            if strict:
                raise ConfigError(f"checkpoint has no tensor '{name}'")
            continue
        arr = ckpt.tensors[name]
        expected = store[name].values.shape
        if arr.shape != expected:
            raise ConfigError(f"tensor '{name}': checkpoint shape "
                              f"{arr.shape} != expected {expected}")
        store[name].values[...] = arr
    if strict:
        extra = sorted(set(ckpt.tensors) - set(store.names()))
        if extra:
            raise ConfigError(f"checkpoint has unexpected tensor '{extra[0]}'")


def restore_rng(ckpt: Checkpoint) -> np.random.Generator:
    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = ckpt.rng_state
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"checkpoint RNG state not restorable: {exc}") from None
    return rng
