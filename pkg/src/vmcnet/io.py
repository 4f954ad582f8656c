"""Binary tensor container shared by weight files and golden dumps.

Layout (all little-endian)::

    magic    4s   b"VMCW"
    version  u32
    kind     u8   0 = weights, 1 = dump
    hash     32s  config SHA-256 (zeros for plain weights)
    seed     u64
    count    u32
    count x record:
        name_len u16, name utf-8
        dtype    u8   0 = real32, 1 = real64
        frozen   u8
        rank     u8
        extents  rank x u32
        data     prod(extents) x dtype size bytes
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

MAGIC = b"VMCW"
VERSION = 1
KIND_WEIGHTS, KIND_DUMP = 0, 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sIB32sQI")


class ContainerError(ValueError):
    pass


@dataclass
class Container:
    tensors: "OrderedDict[str, Tuple[np.ndarray, bool]]" = field(default_factory=OrderedDict)
    kind: int = KIND_WEIGHTS
    config_hash: bytes = b"\0" * 32
    seed: int = 0
    version: int = VERSION

    def add(self, name: str, array: np.ndarray, frozen: bool = False) -> None:
        if name in self.tensors:
            raise ContainerError(f"duplicate tensor name {name}")
        self.tensors[name] = (np.asarray(array), bool(frozen))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v for k, (v, _) in self.tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name][0]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(MAGIC, self.version, self.kind, self.config_hash, self.seed, len(self.tensors))]
        for name, (arr, frozen) in self.tensors.items():
            dt = arr.dtype.newbyteorder("<")
            if dt not in _DTYPE_CODES:
                raise ContainerError(f"tensor {name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<BBB", _DTYPE_CODES[dt], int(frozen), arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, source: str = "<bytes>") -> "Container":
        if len(buf) < _HEADER.size:
            raise ContainerError(f"{source}: truncated header")
        magic, version, kind, chash, seed, count = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise ContainerError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise ContainerError(f"{source}: unsupported format version {version}")
        out = cls(kind=kind, config_hash=chash, seed=seed, version=version)
        pos = _HEADER.size
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", buf, pos)
                pos += 2
                name = buf[pos : pos + nlen].decode("utf-8")
                pos += nlen
                code, frozen, rank = struct.unpack_from("<BBB", buf, pos)
                pos += 3
                shape = struct.unpack_from(f"<{rank}I", buf, pos)
                pos += 4 * rank
                if code not in _CODE_DTYPES:
                    raise ContainerError(f"{source}: tensor {name} has unknown dtype code {code}")
                dt = _CODE_DTYPES[code]
                nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
                if pos + nbytes > len(buf):
                    raise ContainerError(f"{source}: tensor {name} truncated")
                arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
                pos += nbytes
                out.add(name, arr, bool(frozen))
        except struct.error as exc:
            raise ContainerError(f"{source}: truncated record ({exc})") from exc
        if pos != len(buf):
            raise ContainerError(f"{source}: {len(buf) - pos} trailing bytes")
        return out

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str) -> "Container":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), source=path)


def save_weights(store, path: str) -> None:
    c = Container(seed=store.seed)
    for name, (arr, frozen) in store.state().items():
        c.add(name, arr, frozen)
    c.save(path)


def load_weights(store, path: str) -> Container:
    c = Container.load(path)
    try:
        store.load(c.arrays())
    except (KeyError, ValueError) as exc:
        raise ContainerError(f"{path}: {exc.args[0]}") from exc
    return c


def compare_dumps(a: Container, b: Container) -> bool:
    """Bit-exact comparison; dumps from different configs are rejected outright."""
    if a.config_hash != b.config_hash:
        raise ContainerError("dumps come from different configurations")
    if list(a.tensors) != list(b.tensors):
        return False
    for name in a.tensors:
        x, y = a[name], b[name]
        if x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
            return False
    return True


def read_ppm(path: str) -> np.ndarray:
    """Binary (P6) or ASCII (P3) PPM -> ``H x W x 3`` array scaled to [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P6":
        pos += 1
        dt = np.uint8 if maxval < 256 else np.dtype(">u2")
        px = np.frombuffer(data, dtype=dt, count=w * h * 3, offset=pos)
    elif magic == b"P3":
        px = np.array(data[pos:].split()[: w * h * 3], dtype=np.int64)
    else:
        raise ValueError(f"{path}: not a PPM image (magic {magic!r})")
    if px.size != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} samples, found {px.size}")
    return px.reshape(h, w, 3).astype(np.float64) / maxval
