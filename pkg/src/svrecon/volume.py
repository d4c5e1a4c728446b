"""Scalar/vector grid containers and the raw+metadata file format.

A grid serializes as two files: ``<stem>.meta`` holding ``key=value``
lines (magic=RTSV1, dims, spacing_mm, dtype, order=z-major, checksum of
the body) and ``<stem>.raw`` holding the voxel bytes. Arrays are stored
z-major: the numpy shape is (Nz, Ny, Nx) while ``dims`` lists (Nx,Ny,Nz).
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = "RTSV1"


def _as_tuple3(v):
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 components, got {v!r}")
    return t


@dataclass
class Volume:
    """3D scalar grid with physical spacing (mm), voxels shaped (Nz,Ny,Nx)."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)  # (sx, sy, sz) mm per voxel
    origin: tuple = (0.0, 0.0, 0.0)  # mm

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"Volume voxels must be 3D, got shape {self.voxels.shape}")
        if self.voxels.dtype != np.float32:
            self.voxels = self.voxels.astype(np.float32)
        self.spacing = _as_tuple3(self.spacing)
        self.origin = _as_tuple3(self.origin)
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")

    @property
    def dims(self):
        """(Nx, Ny, Nz) voxel counts."""
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)

    @property
    def extent_mm(self):
        return tuple(n * s for n, s in zip(self.dims, self.spacing))

    def same_geometry(self, other) -> bool:
        return (self.voxels.shape == other.voxels.shape
                and self.spacing == other.spacing
                and self.origin == other.origin)

    def copy(self):
        return Volume(self.voxels.copy(), self.spacing, self.origin)


@dataclass
class Mask:
    """Binary grid sharing a Volume's geometry; voxels in {0,1} (uint8)."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"Mask voxels must be 3D, got shape {self.voxels.shape}")
        if self.voxels.dtype != np.uint8:
            bad = np.setdiff1d(np.unique(self.voxels), [0, 1])
            if bad.size:
                raise ValueError(f"Mask voxels must be binary, found values {bad[:4]}")
            self.voxels = self.voxels.astype(np.uint8)
        else:
            bad = np.setdiff1d(np.unique(self.voxels), [0, 1])
            if bad.size:
                raise ValueError(f"Mask voxels must be binary, found values {bad[:4]}")
        self.spacing = _as_tuple3(self.spacing)
        self.origin = _as_tuple3(self.origin)

    @property
    def dims(self):
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)

    def same_geometry(self, other) -> bool:
        return (self.voxels.shape == other.voxels.shape
                and self.spacing == other.spacing
                and self.origin == other.origin)

    def count(self) -> int:
        return int(self.voxels.sum())

    def copy(self):
        return Mask(self.voxels.copy(), self.spacing, self.origin)


@dataclass
class DisplacementField:
    """Per-voxel 3-vectors in mm, shaped (Nz,Ny,Nx,3), components (dx,dy,dz)."""

    vectors: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 4 or self.vectors.shape[-1] != 3:
            raise ValueError(
                f"DisplacementField needs shape (Nz,Ny,Nx,3), got {self.vectors.shape}")
        # float32 for data interchange; float64 kept as-is for model fields
        if self.vectors.dtype not in (np.float32, np.float64):
            self.vectors = self.vectors.astype(np.float32)
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("DisplacementField contains non-finite values")
        self.spacing = _as_tuple3(self.spacing)
        self.origin = _as_tuple3(self.origin)

    @property
    def dims(self):
        nz, ny, nx = self.vectors.shape[:3]
        return (nx, ny, nz)

    def same_geometry(self, other) -> bool:
        return (self.dims == other.dims
                and self.spacing == other.spacing
                and self.origin == other.origin)

    def max_magnitude(self) -> float:
        return float(np.sqrt((self.vectors.astype(np.float64) ** 2).sum(axis=-1)).max())

    def copy(self):
        return DisplacementField(self.vectors.copy(), self.spacing, self.origin)


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def _meta_path(stem):
    return str(stem) + ".meta"


def _raw_path(stem):
    return str(stem) + ".raw"


def _write_pair(stem, body: bytes, meta: dict):
    os.makedirs(os.path.dirname(os.path.abspath(str(stem))), exist_ok=True)
    lines = [f"magic={MAGIC}"]
    for k, v in meta.items():
        lines.append(f"{k}={v}")
    lines.append(f"checksum={zlib.crc32(body):08x}")
    with open(_raw_path(stem), "wb") as f:
        f.write(body)
    with open(_meta_path(stem), "w") as f:
        f.write("\n".join(lines) + "\n")


def _read_pair(stem):
    meta_file = _meta_path(stem)
    if not os.path.exists(meta_file):
        raise FileNotFoundError(f"missing metadata file: {meta_file}")
    meta = {}
    with open(meta_file) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            meta[key] = val
    if meta.get("magic") != MAGIC:
        raise ValueError(f"{meta_file}: bad magic {meta.get('magic')!r}")
    raw_file = _raw_path(stem)
    if not os.path.exists(raw_file):
        raise FileNotFoundError(f"missing raw body file: {raw_file}")
    with open(raw_file, "rb") as f:
        body = f.read()
    stored = meta.get("checksum", "")
    actual = f"{zlib.crc32(body):08x}"
    if stored != actual:
        raise ValueError(f"{raw_file}: checksum mismatch (meta {stored}, body {actual})")
    return meta, body


def _parse_floats(s):
    return tuple(float(x) for x in s.split(","))


def _parse_ints(s):
    return tuple(int(x) for x in s.split(","))


def save_volume(stem, vol: Volume, extra: dict | None = None):
    nx, ny, nz = vol.dims
    meta = {
        "dims": f"{nx},{ny},{nz}",
        "spacing_mm": ",".join(repr(s) for s in vol.spacing),
        "origin_mm": ",".join(repr(s) for s in vol.origin),
        "dtype": "f32le",
        "order": "z-major",
    }
    if extra:
        meta.update(extra)
    body = np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes()
    _write_pair(stem, body, meta)


def load_volume(stem) -> Volume:
    meta, body = _read_pair(stem)
    if meta.get("dtype") != "f32le":
        raise ValueError(f"{stem}: expected dtype f32le, got {meta.get('dtype')!r}")
    nx, ny, nz = _parse_ints(meta["dims"])
    arr = np.frombuffer(body, dtype="<f4")
    if arr.size != nx * ny * nz:
        raise ValueError(f"{stem}: body holds {arr.size} values, dims say {nx * ny * nz}")
    return Volume(arr.reshape(nz, ny, nx).copy(),
                  _parse_floats(meta["spacing_mm"]),
                  _parse_floats(meta.get("origin_mm", "0,0,0")))


def save_mask(stem, mask: Mask, extra: dict | None = None):
    nx, ny, nz = mask.dims
    meta = {
        "dims": f"{nx},{ny},{nz}",
        "spacing_mm": ",".join(repr(s) for s in mask.spacing),
        "origin_mm": ",".join(repr(s) for s in mask.origin),
        "dtype": "u8",
        "order": "z-major",
    }
    if extra:
        meta.update(extra)
    _write_pair(stem, np.ascontiguousarray(mask.voxels, dtype="u1").tobytes(), meta)


def load_mask(stem) -> Mask:
    meta, body = _read_pair(stem)
    if meta.get("dtype") != "u8":
        raise ValueError(f"{stem}: expected dtype u8, got {meta.get('dtype')!r}")
    nx, ny, nz = _parse_ints(meta["dims"])
    arr = np.frombuffer(body, dtype="u1")
    if arr.size != nx * ny * nz:
        raise ValueError(f"{stem}: body holds {arr.size} values, dims say {nx * ny * nz}")
    return Mask(arr.reshape(nz, ny, nx).copy(),
                _parse_floats(meta["spacing_mm"]),
                _parse_floats(meta.get("origin_mm", "0,0,0")))


def save_dvf(stem, dvf: DisplacementField, extra: dict | None = None):
    nx, ny, nz = dvf.dims
    meta = {
        "dims": f"{nx},{ny},{nz}",
        "spacing_mm": ",".join(repr(s) for s in dvf.spacing),
        "origin_mm": ",".join(repr(s) for s in dvf.origin),
        "dtype": "f32le",
        "order": "z-major",
        "components": "3",
    }
    if extra:
        meta.update(extra)
    _write_pair(stem, np.ascontiguousarray(dvf.vectors, dtype="<f4").tobytes(), meta)


def load_dvf(stem) -> DisplacementField:
    meta, body = _read_pair(stem)
    if meta.get("components") != "3":
        raise ValueError(f"{stem}: expected a 3-component field, got {meta.get('components')!r}")
    nx, ny, nz = _parse_ints(meta["dims"])
    arr = np.frombuffer(body, dtype="<f4")
    if arr.size != nx * ny * nz * 3:
        raise ValueError(f"{stem}: body holds {arr.size} values, dims say {nx * ny * nz * 3}")
    return DisplacementField(arr.reshape(nz, ny, nx, 3).copy(),
                             _parse_floats(meta["spacing_mm"]),
                             _parse_floats(meta.get("origin_mm", "0,0,0")))


def save_image2d(stem, pixels: np.ndarray, spacing=(1.0, 1.0), extra: dict | None = None):
    """Persist a 2D image (e.g. a projection) in the same container."""
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {pixels.shape}")
    nv, nu = pixels.shape
    meta = {
        "dims": f"{nu},{nv}",
        "spacing_mm": ",".join(repr(float(s)) for s in spacing),
        "dtype": "f32le",
        "order": "z-major",
    }
    if extra:
        meta.update(extra)
    _write_pair(stem, np.ascontiguousarray(pixels, dtype="<f4").tobytes(), meta)


def load_image2d(stem) -> tuple[np.ndarray, dict]:
    meta, body = _read_pair(stem)
    dims = _parse_ints(meta["dims"])
    if len(dims) != 2:
        raise ValueError(f"{stem}: expected 2D dims, got {meta['dims']!r}")
    nu, nv = dims
    arr = np.frombuffer(body, dtype="<f4")
    if arr.size != nu * nv:
        raise ValueError(f"{stem}: body holds {arr.size} values, dims say {nu * nv}")
    return arr.reshape(nv, nu).copy(), meta
