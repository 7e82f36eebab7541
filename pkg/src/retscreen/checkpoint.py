"""Binary checkpoint container for exact training resume.

Layout, all little-endian:

    magic "RDRC" | u32 version | u64 payload checksum | payload

    payload:
      network descriptor   u32 length + UTF-8 JSON
      parameter tensors    u32 count, then records
      optimizer tensors    u32 count, then records (names prefixed m./v.)
      optimizer step       u64
      rng state            u32 length + opaque bytes
      epoch counter        u64
      history              u32 count, then length-prefixed epoch records
                           (u32 length + u64 epoch + 4 x f64 metrics)

    tensor record: u32 name length + name UTF-8, u8 rank, rank x u64 dims,
    raw 32-bit reals.

The checksum is the first 8 bytes (little-endian) of SHA-256 over the payload;
a truncated or bit-flipped file fails to load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoError, ScreeningError

MAGIC = b"RDRC"
VERSION = 1


class VersionMismatchError(ScreeningError):
    pass


class CorruptCheckpointError(ScreeningError):
    pass


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_kappa: float
    val_kappa: float
    train_loss: float
    val_acc: float


@dataclass
class Checkpoint:
    descriptor: str  # NetworkSpec JSON
    tensors: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    rng_state: bytes
    epoch: int
    history: list[EpochRecord] = field(default_factory=list)
    version: int = VERSION


def _pack_bytes(out: bytearray, data: bytes) -> None:
    out += struct.pack("<I", len(data))
    out += data


def _pack_tensor(out: bytearray, name: str, tensor: np.ndarray) -> None:
    _pack_bytes(out, name.encode("utf-8"))
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    out += struct.pack("<B", arr.ndim)
    out += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    out += arr.tobytes()


def _pack_tensor_block(out: bytearray, tensors: dict[str, np.ndarray]) -> None:
    out += struct.pack("<I", len(tensors))
    for name, tensor in tensors.items():
        _pack_tensor(out, name, tensor)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.blob().decode("utf-8")
        rank = self.u8()
        dims = tuple(self.u64() for _ in range(rank))
        count = int(np.prod(dims)) if rank else 1
        raw = self.take(4 * count)
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        return name, arr

    def tensor_block(self) -> dict[str, np.ndarray]:
        return dict(self.tensor() for _ in range(self.u32()))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = bytearray()
    _pack_bytes(payload, ckpt.descriptor.encode("utf-8"))
    _pack_tensor_block(payload, ckpt.tensors)
    optimizer = {f"m.{k}": v for k, v in ckpt.adam_m.items()}
    optimizer.update({f"v.{k}": v for k, v in ckpt.adam_v.items()})
    _pack_tensor_block(payload, optimizer)
    payload += struct.pack("<Q", ckpt.adam_t)
    _pack_bytes(payload, ckpt.rng_state)
    payload += struct.pack("<Q", ckpt.epoch)
    payload += struct.pack("<I", len(ckpt.history))
    for rec in ckpt.history:
        body = struct.pack(
            "<Qdddd", rec.epoch, rec.train_kappa, rec.val_kappa, rec.train_loss, rec.val_acc
        )
        _pack_bytes(payload, body)
    checksum = int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", ckpt.version, checksum))
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    version, checksum = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, supported {VERSION}")
    payload = data[16:]
    expected = int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
    if checksum != expected:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    r = _Reader(payload)
    descriptor = r.blob().decode("utf-8")
    tensors = r.tensor_block()
    optimizer = r.tensor_block()
    adam_t = r.u64()
    rng_state = r.blob()
    epoch = r.u64()
    history = []
    for _ in range(r.u32()):
        body = r.blob()
        if len(body) != 40:
            raise CorruptCheckpointError("bad history record length")
        e, tk, vk, tl, va = struct.unpack("<Qdddd", body)
        history.append(EpochRecord(e, tk, vk, tl, va))
    if r.pos != len(payload):
        raise CorruptCheckpointError("trailing bytes after checkpoint payload")
    adam_m = {k[2:]: v for k, v in optimizer.items() if k.startswith("m.")}
    adam_v = {k[2:]: v for k, v in optimizer.items() if k.startswith("v.")}
    return Checkpoint(
        descriptor=descriptor,
        tensors=tensors,
        adam_m=adam_m,
        adam_v=adam_v,
        adam_t=adam_t,
        rng_state=rng_state,
        epoch=epoch,
        history=history,
    )


def rng_state_to_bytes(rng: np.random.Generator) -> bytes:
    return json.dumps(rng.bit_generator.state, sort_keys=True).encode("utf-8")


def rng_from_state_bytes(state: bytes) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(state.decode("utf-8"))
    return rng
