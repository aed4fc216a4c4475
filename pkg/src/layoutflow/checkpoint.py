"""Binary tensor checkpoint format.

Layout: magic "LFCK", format version u32, record count u32, then per record
{name length u32, UTF-8 name, dtype code u8 (0 = float32), rank u8,
extents u32[rank], payload little-endian float32}. All integers little
endian. Records are written sorted by name so identical state always
produces identical bytes.

Scalar float entries named "meta.*" carry model hyperparameters.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LFCK"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    """Malformed checkpoint file; message carries offset and record context."""


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    # np.ascontiguousarray would promote rank 0 to rank 1; keep scalars scalar
    data = np.asarray(arr, dtype="<f4", order="C")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BB", DTYPE_F32, data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    return head + data.tobytes()


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, float] | None = None) -> None:
    entries: dict[str, np.ndarray] = dict(tensors)
    for k, v in (meta or {}).items():
        if not k.startswith("meta."):
            raise ValueError(f"meta entries must be named 'meta.*', got {k!r}")
        entries[k] = np.asarray(v, dtype=np.float32)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(entries))
    for name in sorted(entries):
        blob += _pack_record(name, entries[name])
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, buf: bytes, context: str = "header"):
        self.buf = buf
        self.off = 0
        self.context = context

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(
                f"checkpoint truncated at offset {self.off} while reading {self.context} "
                f"(needed {n} bytes, {len(self.buf) - self.off} left)"
            )
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"bad magic in {path}: expected {MAGIC!r}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, float] = {}
    for i in range(count):
        r.context = f"record {i} name"
        name_len = r.u32()
        name = r.take(name_len).decode("utf-8")
        r.context = f"record {name!r}"
        dtype = r.u8()
        if dtype != DTYPE_F32:
            raise CheckpointError(f"record {name!r}: unknown dtype code {dtype}")
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        r.context = f"record {name!r} payload"
        payload = r.take(4 * n_items)
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith("meta."):
            meta[name] = float(arr)
        else:
            tensors[name] = arr
    if r.off != len(buf):
        raise CheckpointError(f"{len(buf) - r.off} trailing bytes after last record")
    return tensors, meta


def save_model(path: str | Path, model) -> None:
    save_tensors(path, {n: t.data for n, t in model.params.items()}, meta=model.cfg.to_meta())


def load_model(path: str | Path):
    from .denoiser import Denoiser, UNetConfig
    from .tensor import Tensor

    tensors, meta = load_tensors(path)
    cfg = UNetConfig.from_meta(meta)
    params = {n: Tensor(a, requires_grad=True) for n, a in tensors.items()}
    expected = set(Denoiser.create(cfg, seed=0).params)
    got = set(params)
    if expected != got:
        missing = sorted(expected - got)[:4]
        extra = sorted(got - expected)[:4]
        raise CheckpointError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    return Denoiser(cfg, params)
