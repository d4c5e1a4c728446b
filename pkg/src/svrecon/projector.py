"""Digitally reconstructed radiograph rendering at arbitrary gantry angle.

Rays march uniformly (step <= half the smallest voxel spacing) with
trilinear sampling; pixel values are mm-weighted line integrals. The
gantry rotates about the superior-inferior (z) axis: 0 deg is the
left-right (lateral) ray direction, 90 deg anterior-posterior. Parallel
beams are the default; cone beams are a geometry switch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .motion import trilinear_sample
from .volume import Volume


@dataclass
class Geometry:
    angle_deg: float
    beam: str = "parallel"  # parallel | cone
    sad_mm: float = 1000.0  # source-axis distance (cone)
    sdd_mm: float = 1500.0  # source-detector distance (cone)
    det_pixels: tuple = (64, 64)  # (nu, nv)
    det_spacing: tuple = (4.0, 4.0)  # (du, dv) mm

    def __post_init__(self):
        self.angle_deg = float(self.angle_deg) % 360.0
        if self.beam not in ("parallel", "cone"):
            raise ValueError(f"unknown beam model {self.beam!r}")

    def validate(self, vol: Volume):
        nu, nv = self.det_pixels
        du, dv = self.det_spacing
        if nu < 2 or nv < 2 or du <= 0 or dv <= 0:
            raise ValueError(f"degenerate detector: {self.det_pixels} px at "
                             f"{self.det_spacing} mm")
        ex, ey, ez = vol.extent_mm
        r_xy = 0.5 * math.hypot(ex, ey)
        if self.beam == "cone":
            if self.sad_mm <= 0 or self.sdd_mm <= self.sad_mm:
                raise ValueError(f"cone geometry needs SDD > SAD > 0, got "
                                 f"SAD={self.sad_mm}, SDD={self.sdd_mm}")
            if self.sad_mm <= r_xy:
                raise ValueError(f"source (SAD {self.sad_mm} mm) would sit inside the "
                                 f"volume footprint (radius {r_xy:.1f} mm)")
            mag = self.sdd_mm / (self.sad_mm - r_xy)
        else:
            mag = 1.0
        if nu * du < 2 * r_xy * mag or nv * dv < ez * mag:
            raise ValueError(
                f"detector {nu}x{nv} px at {du}x{dv} mm does not cover the projected "
                f"footprint ({2 * r_xy * mag:.1f} x {ez * mag:.1f} mm)")


def auto_geometry(vol: Volume, angle_deg: float, n_pixels: int,
                  beam: str = "parallel", sad_mm: float = 1000.0,
                  sdd_mm: float = 1500.0) -> Geometry:
    """Square detector sized to cover the volume at any angle."""
    ex, ey, ez = vol.extent_mm
    r_xy = 0.5 * math.hypot(ex, ey)
    if beam == "cone":
        mag = sdd_mm / (sad_mm - r_xy)
    else:
        mag = 1.0
    span = 1.05 * mag * max(2 * r_xy, ez)
    return Geometry(angle_deg, beam=beam, sad_mm=sad_mm, sdd_mm=sdd_mm,
                    det_pixels=(n_pixels, n_pixels),
                    det_spacing=(span / n_pixels, span / n_pixels))


@dataclass
class Projection:
    pixels: np.ndarray  # (nv, nu) float32 line integrals
    geometry: Geometry

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValueError(f"projection pixels must be 2D, got {self.pixels.shape}")


def _ray_bundle(vol: Volume, geom: Geometry):
    """Per-pixel ray origins and unit directions in mm (flattened)."""
    nu, nv = geom.det_pixels
    du, dv = geom.det_spacing
    theta = math.radians(geom.angle_deg)
    # snap the radians-conversion residue so axis-aligned beams are exact
    cos_t = 0.0 if abs(math.cos(theta)) < 1e-14 else math.cos(theta)
    sin_t = 0.0 if abs(math.sin(theta)) < 1e-14 else math.sin(theta)
    d = np.array([cos_t, sin_t, 0.0])
    u = np.array([-sin_t, cos_t, 0.0])
    v = np.array([0.0, 0.0, 1.0])
    center = np.array(vol.origin) + 0.5 * np.array(vol.extent_mm)

    uu = (np.arange(nu) - (nu - 1) / 2.0) * du
    vv = (np.arange(nv) - (nv - 1) / 2.0) * dv
    vv_g, uu_g = np.meshgrid(vv, uu, indexing="ij")
    plane = (center[None, :] + uu_g.reshape(-1, 1) * u[None, :]
             + vv_g.reshape(-1, 1) * v[None, :])
    if geom.beam == "parallel":
        origins = plane
        dirs = np.broadcast_to(d, origins.shape).copy()
    else:
        source = center - geom.sad_mm * d
        det = plane + (geom.sdd_mm - geom.sad_mm) * d[None, :]
        dirs = det - source[None, :]
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(source, dirs.shape).copy()
    return origins, dirs


def _aabb_range(origins, dirs, lo, hi):
    """Slab-method entry/exit distances against the volume box."""
    tmin = np.full(origins.shape[0], -np.inf)
    tmax = np.full(origins.shape[0], np.inf)
    for ax in range(3):
        o, dr = origins[:, ax], dirs[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[ax] - o) / dr
            t2 = (hi[ax] - o) / dr
        near, far = np.minimum(t1, t2), np.maximum(t1, t2)
        parallel = np.abs(dr) < 1e-12
        inside = (o >= lo[ax]) & (o <= hi[ax])
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        tmin = np.maximum(tmin, near)
        tmax = np.minimum(tmax, far)
    return tmin, tmax


def render_drr(vol: Volume, geom: Geometry, step_mm: float | None = None) -> Projection:
    """Line-integral projection of the volume onto the detector."""
    geom.validate(vol)
    if step_mm is None:
        step_mm = 0.5 * min(vol.spacing)
    if step_mm <= 0:
        raise ValueError(f"step_mm must be positive, got {step_mm}")

    origins, dirs = _ray_bundle(vol, geom)
    lo = np.array(vol.origin)
    hi = lo + np.array(vol.extent_mm)
    tmin, tmax = _aabb_range(origins, dirs, lo, hi)
    hit = tmax > tmin
    if not hit.any():
        return Projection(np.zeros(geom.det_pixels[::-1], np.float32), geom)

    t0 = float(tmin[hit].min())
    t1 = float(tmax[hit].max())
    n_steps = max(1, int(math.ceil((t1 - t0) / step_mm - 1e-9)))
    dt = (t1 - t0) / n_steps

    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    acc = np.zeros(origins.shape[0], dtype=np.float64)
    for j in range(n_steps):
        t = t0 + (j + 0.5) * dt
        pts = origins + t * dirs
        # mm -> voxel-center coordinates
        px = (pts[:, 0] - ox) / sx - 0.5
        py = (pts[:, 1] - oy) / sy - 0.5
        pz = (pts[:, 2] - oz) / sz - 0.5
        acc += trilinear_sample(vol.voxels, pz, py, px, mode="zero")
    pixels = (acc * dt).reshape(geom.det_pixels[1], geom.det_pixels[0])
    return Projection(pixels.astype(np.float32), geom)


def normalize_unit(data):
    """Affine map of [min, max] onto [0, 1]; constant input maps to zeros.

    Accepts a raw array, Projection, or Volume and returns the same kind.
    """
    if isinstance(data, Projection):
        return Projection(normalize_unit(data.pixels), data.geometry)
    if isinstance(data, Volume):
        return Volume(normalize_unit(data.voxels), data.spacing, data.origin)
    arr = np.asarray(data, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("normalize_unit requires finite values")
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        return np.zeros_like(arr)
    out = (arr - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def add_gaussian_noise(proj: Projection, sigma_ratio: float, seed) -> Projection:
    """Add zero-mean Gaussian noise (std = sigma_ratio of the unit range),
    clamping back to [0, 1]. sigma_ratio 0 returns the input unchanged."""
    if sigma_ratio < 0:
        raise ValueError(f"sigma_ratio must be nonnegative, got {sigma_ratio}")
    if sigma_ratio == 0:
        return Projection(proj.pixels.copy(), proj.geometry)
    rng = np.random.default_rng(seed)
    noisy = proj.pixels + rng.normal(0.0, sigma_ratio, proj.pixels.shape)
    return Projection(np.clip(noisy, 0.0, 1.0).astype(np.float32), proj.geometry)
