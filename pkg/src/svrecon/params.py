"""Named parameter store with Adam state slots and binary checkpointing.

Checkpoint container (magic ``RTSC1``): format version, a length-prefixed
config blob (UTF-8 JSON), then each parameter in insertion order as
``u16 name length | name | u8 rank | u32 dims... | f32le values``, and a
trailing CRC32 over everything after the magic.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .autodiff import Tensor

_MAGIC = b"RTSC1"
_VERSION = 1


class ParamStore:
    """Ordered map of dotted parameter names to trainable tensors.

    Each parameter owns two same-shape moment buffers for Adam; a shared
    step counter advances once per optimizer step.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._m[name] = np.zeros_like(tensor.data)
        self._v[name] = np.zeros_like(tensor.data)
        return tensor

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def moments(self, name):
        return self._m[name], self._v[name]

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def n_values(self):
        return sum(p.data.size for p in self._params.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        if set(values) != set(self._params):
            missing = set(self._params) - set(values)
            extra = set(values) - set(self._params)
            raise ValueError(f"parameter name mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for k, arr in values.items():
            p = self._params[k]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def astype(self, dtype):
        """Return a value-copy of the store at the requested dtype."""
        out = ParamStore()
        for k, p in self._params.items():
            out.add(k, Tensor(p.data.astype(dtype)))
        return out

    def checksum(self) -> int:
        crc = 0
        for k, p in self._params.items():
            crc = zlib.crc32(k.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
        return crc


def serialize_checkpoint(config_json: str, store: ParamStore) -> bytes:
    body = bytearray()
    body += struct.pack("<H", _VERSION)
    cfg = config_json.encode("utf-8")
    body += struct.pack("<I", len(cfg))
    body += cfg
    body += struct.pack("<I", len(store))
    for name, p in store.items():
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb))
        body += nb
        arr = np.ascontiguousarray(p.data, dtype=np.float32)
        body += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            body += struct.pack("<I", d)
        body += arr.astype("<f4", copy=False).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return _MAGIC + bytes(body)


def deserialize_checkpoint(blob: bytes) -> tuple[str, dict[str, np.ndarray]]:
    """Return (config_json, ordered name->float32 array dict)."""
    if blob[:5] != _MAGIC:
        raise ValueError(f"bad checkpoint magic: {blob[:5]!r}")
    body = blob[5:]
    if len(body) < 4:
        raise ValueError("truncated checkpoint")
    crc_stored = struct.unpack("<I", body[-4:])[0]
    if zlib.crc32(body[:-4]) != crc_stored:
        raise ValueError("checkpoint CRC mismatch")
    off = 0
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", body, off)
    off += 4
    config_json = body[off:off + cfg_len].decode("utf-8")
    off += cfg_len
    (n_params,) = struct.unpack_from("<I", body, off)
    off += 4
    values: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", body, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        values[name] = arr.copy()
    return config_json, values


def save_checkpoint(path, config_json: str, store: ParamStore):
    with open(path, "wb") as f:
        f.write(serialize_checkpoint(config_json, store))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        return deserialize_checkpoint(f.read())
