"""Respiratory motion modeling: rank-k PCA over displacement fields,
coefficient sampling, field synthesis, and backward warping.

The PCA fit uses the snapshot (Gram-matrix) method since the number of
breathing phases is tiny compared to the field dimension. Model fields
are kept at float64; serialized fields are float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import DisplacementField, Mask, Volume

# Coefficient sampling widens the observed per-component range by this
# factor about its midpoint, allowing mild extrapolation beyond the
# training phases.
DEFAULT_COEFF_WIDEN = 1.2


@dataclass
class PcaMotionModel:
    """Mean field plus top-k principal motion components.

    components[j] are orthonormal under the flattened dot product;
    eigenvalues are the descending eigenvalues of the centered scatter
    matrix (total squared deviation captured per component).
    """

    mean_field: DisplacementField
    components: list  # k DisplacementFields, orthonormal
    eigenvalues: np.ndarray  # k nonnegative scalars, descending
    coeff_bounds: np.ndarray  # (k, 2) observed [min, max] per component

    @property
    def k(self):
        return len(self.components)


def fit_pca(dvfs: list[DisplacementField], k: int) -> PcaMotionModel:
    """Fit the rank-k motion model from phase displacement fields."""
    if len(dvfs) < k + 1:
        raise ValueError(f"need at least {k + 1} fields to fit rank {k}, got {len(dvfs)}")
    first = dvfs[0]
    for i, d in enumerate(dvfs[1:], start=1):
        if not first.same_geometry(d):
            raise ValueError(f"field {i} geometry {d.dims}/{d.spacing} differs from "
                             f"field 0 geometry {first.dims}/{first.spacing}")
    n = len(dvfs)
    x = np.stack([d.vectors.astype(np.float64).reshape(-1) for d in dvfs])
    mean = x.mean(axis=0)
    xc = x - mean
    gram = xc @ xc.T
    lam, u = np.linalg.eigh(gram)
    order = np.argsort(lam)[::-1]
    lam = np.clip(lam[order], 0.0, None)
    u = u[:, order]
    tol = max(n, xc.shape[1]) * np.finfo(np.float64).eps * max(lam[0], 1e-30)
    rank = int((lam > tol).sum())
    if k > rank:
        raise ValueError(f"requested rank {k} exceeds sample rank {rank}")
    comps = []
    for j in range(k):
        v = xc.T @ u[:, j]
        v /= np.sqrt(lam[j])
        comps.append(v)
    shape = first.vectors.shape
    proj = xc @ np.stack(comps).T  # (n, k)
    bounds = np.stack([proj.min(axis=0), proj.max(axis=0)], axis=1)
    return PcaMotionModel(
        mean_field=DisplacementField(mean.reshape(shape), first.spacing, first.origin),
        components=[DisplacementField(c.reshape(shape), first.spacing, first.origin)
                    for c in comps],
        eigenvalues=lam[:k],
        coeff_bounds=bounds,
    )


def project_coeffs(model: PcaMotionModel, dvf: DisplacementField) -> np.ndarray:
    """Coefficients of a field's best rank-k approximation."""
    delta = (dvf.vectors.astype(np.float64) - model.mean_field.vectors).reshape(-1)
    return np.array([float(delta @ c.vectors.reshape(-1)) for c in model.components])


def draw_coeffs(model: PcaMotionModel, rng: np.random.Generator,
                widen: float = DEFAULT_COEFF_WIDEN) -> np.ndarray:
    lo, hi = model.coeff_bounds[:, 0], model.coeff_bounds[:, 1]
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * widen
    return rng.uniform(mid - half, mid + half)


def sample_coeffs(model: PcaMotionModel, rng_seed,
                  widen: float = DEFAULT_COEFF_WIDEN) -> np.ndarray:
    """Draw one coefficient triple, uniform over the widened observed bounds."""
    return draw_coeffs(model, np.random.default_rng(rng_seed), widen)


def synthesize_dvf(model: PcaMotionModel, coeffs) -> DisplacementField:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (model.k,):
        raise ValueError(f"expected {model.k} coefficients, got shape {coeffs.shape}")
    out = model.mean_field.vectors.astype(np.float64).copy()
    for c, comp in zip(coeffs, model.components):
        out += c * comp.vectors
    return DisplacementField(out, model.mean_field.spacing, model.mean_field.origin)


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def _pull_coords(shape, dvf: DisplacementField):
    """Voxel-space sample coordinates for backward (pull) warping."""
    nz, ny, nx = shape
    sx, sy, sz = dvf.spacing
    iz, iy, ix = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx),
                             indexing="ij", sparse=True)
    vec = dvf.vectors.astype(np.float64)
    px = ix - vec[..., 0] / sx
    py = iy - vec[..., 1] / sy
    pz = iz - vec[..., 2] / sz
    return pz, py, px


def trilinear_sample(values: np.ndarray, pz, py, px, mode: str = "clamp"):
    """Trilinear interpolation at voxel coordinates (z,y,x order).

    mode='clamp' extends border values; mode='zero' fades to zero past
    the outermost voxel centers.
    """
    nz, ny, nx = values.shape
    inside = None
    if mode == "zero":
        # one zero ring: values fade linearly to 0 within a voxel of the
        # outermost centers; anything farther contributes nothing
        vals = np.pad(values.astype(np.float64), 1)
        pz, py, px = pz + 1.0, py + 1.0, px + 1.0
        nz, ny, nx = vals.shape
        inside = ((pz >= 0) & (pz <= nz - 1) & (py >= 0) & (py <= ny - 1)
                  & (px >= 0) & (px <= nx - 1))
        pz = np.where(inside, pz, 0.0)
        py = np.where(inside, py, 0.0)
        px = np.where(inside, px, 0.0)
    else:
        vals = values.astype(np.float64)
        pz = np.clip(pz, 0, nz - 1)
        py = np.clip(py, 0, ny - 1)
        px = np.clip(px, 0, nx - 1)
    z0 = np.clip(np.floor(pz).astype(np.int64), 0, nz - 2) if nz > 1 else np.zeros_like(pz, np.int64)
    y0 = np.clip(np.floor(py).astype(np.int64), 0, ny - 2) if ny > 1 else np.zeros_like(py, np.int64)
    x0 = np.clip(np.floor(px).astype(np.int64), 0, nx - 2) if nx > 1 else np.zeros_like(px, np.int64)
    fz, fy, fx = pz - z0, py - y0, px - x0
    z1, y1, x1 = z0 + 1, y0 + 1, x0 + 1
    c000 = vals[z0, y0, x0]
    c001 = vals[z0, y0, x1]
    c010 = vals[z0, y1, x0]
    c011 = vals[z0, y1, x1]
    c100 = vals[z1, y0, x0]
    c101 = vals[z1, y0, x1]
    c110 = vals[z1, y1, x0]
    c111 = vals[z1, y1, x1]
    wz0, wy0, wx0 = 1.0 - fz, 1.0 - fy, 1.0 - fx
    out = (c000 * wz0 * wy0 * wx0 + c001 * wz0 * wy0 * fx
           + c010 * wz0 * fy * wx0 + c011 * wz0 * fy * fx
           + c100 * fz * wy0 * wx0 + c101 * fz * wy0 * fx
           + c110 * fz * fy * wx0 + c111 * fz * fy * fx)
    if inside is not None:
        out = np.where(inside, out, 0.0)
    return out


def warp_volume(vol: Volume, dvf: DisplacementField) -> Volume:
    """Backward warp with trilinear interpolation and border clamping."""
    if vol.dims != dvf.dims or vol.spacing != dvf.spacing:
        raise ValueError(f"geometry mismatch: volume {vol.dims}@{vol.spacing} vs "
                         f"field {dvf.dims}@{dvf.spacing}")
    pz, py, px = _pull_coords(vol.voxels.shape, dvf)
    out = trilinear_sample(vol.voxels, pz, py, px, mode="clamp")
    return Volume(out.astype(np.float32), vol.spacing, vol.origin)


def warp_mask(mask: Mask, dvf: DisplacementField) -> Mask:
    """Backward warp with nearest-neighbor sampling; output stays binary."""
    if mask.dims != dvf.dims or mask.spacing != dvf.spacing:
        raise ValueError(f"geometry mismatch: mask {mask.dims}@{mask.spacing} vs "
                         f"field {dvf.dims}@{dvf.spacing}")
    nz, ny, nx = mask.voxels.shape
    pz, py, px = _pull_coords(mask.voxels.shape, dvf)
    zi = np.clip(np.rint(pz).astype(np.int64), 0, nz - 1)
    yi = np.clip(np.rint(py).astype(np.int64), 0, ny - 1)
    xi = np.clip(np.rint(px).astype(np.int64), 0, nx - 1)
    return Mask(mask.voxels[zi, yi, xi], mask.spacing, mask.origin)
