"""Training-corpus assembly: isotropic resampling, motion-sampled volume
synthesis, projection rendering, resizing, normalization, and on-disk
catalog.

Every sample is generated from its own seed (base_seed + index), so the
corpus is reproducible sample-by-sample regardless of generation order.
The manifest is a CSV (`id,split,angle_deg,c1,c2,c3,proj_path,vol_path,
mask_path`) preceded by `# config_hash=` / `# seed=` comment lines; file
paths are relative to the manifest location.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import motion as mo
from . import projector as pj
from .volume import (DisplacementField, Mask, Volume, load_image2d, load_mask,
                     load_volume, save_image2d, save_mask, save_volume)

SPLIT_RATIO = (880, 100, 100)  # train : val : test


def split_counts(n: int) -> tuple[int, int, int]:
    total = sum(SPLIT_RATIO)
    train = round(n * SPLIT_RATIO[0] / total)
    val = round(n * SPLIT_RATIO[1] / total)
    test = n - train - val
    if min(train, val, test) < 0:
        raise ValueError(f"cannot split {n} samples by {SPLIT_RATIO}")
    return train, val, test


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _catmull_rom_weights(f):
    """Weights for taps at offsets (-1, 0, 1, 2) from the base index."""
    f2, f3 = f * f, f * f * f
    return np.stack([
        -0.5 * f3 + f2 - 0.5 * f,
        1.5 * f3 - 2.5 * f2 + 1.0,
        -1.5 * f3 + 2.0 * f2 + 0.5 * f,
        0.5 * f3 - 0.5 * f2,
    ], axis=-1)


def _axis_matrix(n_in, s_in, n_out, s_out):
    """Dense [n_out, n_in] cubic interpolation matrix (border-clamped)."""
    j = np.arange(n_out)
    x = (j + 0.5) * s_out / s_in - 0.5
    base = np.floor(x).astype(np.int64)
    w = _catmull_rom_weights(x - base)
    mat = np.zeros((n_out, n_in))
    for t in range(4):
        idx = np.clip(base + t - 1, 0, n_in - 1)
        np.add.at(mat, (j, idx), w[:, t])
    mat /= mat.sum(axis=1, keepdims=True)
    return mat


def _nearest_indices(n_in, s_in, n_out, s_out):
    x = (np.arange(n_out) + 0.5) * s_out / s_in - 0.5
    return np.clip(np.rint(x).astype(np.int64), 0, n_in - 1)


def _resample_grid(values, spacing, out_dims, out_spacing, mode):
    """Resample (Nz,Ny,Nx) values to new dims/spacing along each axis."""
    nz, ny, nx = values.shape
    sx, sy, sz = spacing
    ox, oy, oz = out_dims  # (Nx', Ny', Nz')
    tx, ty, tz = out_spacing
    if mode == "nearest":
        zi = _nearest_indices(nz, sz, oz, tz)
        yi = _nearest_indices(ny, sy, oy, ty)
        xi = _nearest_indices(nx, sx, ox, tx)
        return values[np.ix_(zi, yi, xi)]
    if mode != "cubic":
        raise ValueError(f"unknown resample mode {mode!r}")
    out = values.astype(np.float64)
    out = np.tensordot(_axis_matrix(nz, sz, oz, tz), out, axes=(1, 0))
    out = np.tensordot(_axis_matrix(ny, sy, oy, ty), out, axes=(1, 1)).transpose(1, 0, 2)
    out = np.tensordot(_axis_matrix(nx, sx, ox, tx), out, axes=(1, 2)).transpose(1, 2, 0)
    return out


def resample_isotropic(obj, target_spacing: float, mode: str):
    """Resample to an isotropic grid, preserving extent within one voxel."""
    if target_spacing <= 0:
        raise ValueError(f"target_spacing must be positive, got {target_spacing}")
    dims = obj.dims
    spacing = obj.spacing
    out_dims = tuple(max(1, round(n * s / target_spacing))
                     for n, s in zip(dims, spacing))
    out_spacing = (target_spacing,) * 3
    if out_dims == dims and out_spacing == spacing:
        if isinstance(obj, Volume):
            return Volume(obj.voxels.copy(), spacing, obj.origin)
        if isinstance(obj, Mask):
            return Mask(obj.voxels.copy(), spacing, obj.origin)
    if isinstance(obj, Volume):
        out = _resample_grid(obj.voxels, spacing, out_dims, out_spacing,
                             "cubic" if mode == "cubic" else mode)
        return Volume(out.astype(np.float32), out_spacing, obj.origin)
    if isinstance(obj, Mask):
        if mode != "nearest":
            raise ValueError("masks must be resampled with mode='nearest'")
        out = _resample_grid(obj.voxels, spacing, out_dims, out_spacing, "nearest")
        return Mask(out, out_spacing, obj.origin)
    if isinstance(obj, DisplacementField):
        comps = [_resample_grid(obj.vectors[..., c], spacing, out_dims,
                                out_spacing, "cubic") for c in range(3)]
        return DisplacementField(np.stack(comps, axis=-1).astype(np.float32),
                                 out_spacing, obj.origin)
    raise TypeError(f"cannot resample {type(obj).__name__}")


def resize_volume(vol: Volume, size: int) -> Volume:
    """Cubic resize to size^3 voxels; physical extent preserved exactly."""
    out_spacing = tuple(e / size for e in vol.extent_mm)
    out = _resample_grid(vol.voxels, vol.spacing, (size,) * 3, out_spacing, "cubic")
    return Volume(out.astype(np.float32), out_spacing, vol.origin)


def resize_mask(mask: Mask, size: int) -> Mask:
    out_spacing = tuple(e / size for e in
                        (n * s for n, s in zip(mask.dims, mask.spacing)))
    out = _resample_grid(mask.voxels, mask.spacing, (size,) * 3, out_spacing, "nearest")
    return Mask(out, out_spacing, mask.origin)


def resize_image(pixels: np.ndarray, size: int) -> np.ndarray:
    """Cubic resize of a 2D image to size x size."""
    nv, nu = pixels.shape
    mat_v = _axis_matrix(nv, 1.0, size, nv / size)
    mat_u = _axis_matrix(nu, 1.0, size, nu / size)
    out = mat_v @ pixels.astype(np.float64) @ mat_u.T
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# sample synthesis
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    id: int
    angle_deg: float
    pca_coeffs: np.ndarray
    projection: np.ndarray  # (S, S) float32 in [0, 1]
    target_volume: Volume  # size^3, normalized
    target_mask: Mask

    def validate(self, input_size=None, output_size=None):
        if self.projection.min() < 0 or self.projection.max() > 1:
            raise ValueError(f"sample {self.id}: projection outside [0,1]")
        if self.target_volume.voxels.min() < 0 or self.target_volume.voxels.max() > 1:
            raise ValueError(f"sample {self.id}: volume outside [0,1]")
        bad = np.setdiff1d(np.unique(self.target_mask.voxels), [0, 1])
        if bad.size:
            raise ValueError(f"sample {self.id}: mask holds non-binary values")
        if input_size and self.projection.shape != (input_size, input_size):
            raise ValueError(f"sample {self.id}: projection shape "
                             f"{self.projection.shape} != {(input_size,) * 2}")
        if output_size and self.target_volume.voxels.shape != (output_size,) * 3:
            raise ValueError(f"sample {self.id}: volume shape "
                             f"{self.target_volume.voxels.shape} != {(output_size,) * 3}")


@dataclass
class SampleFactory:
    """Deterministic per-index sample synthesis from phantom + motion model.

    The reference volume/mask and the fitted model must share the same
    (already isotropically resampled) grid.
    """

    reference: Volume
    reference_mask: Mask
    model: mo.PcaMotionModel
    input_size: int
    output_size: int
    base_seed: int
    detector_pixels: int | None = None
    beam: str = "parallel"
    sad_mm: float = 1000.0
    sdd_mm: float = 1500.0

    def __post_init__(self):
        if self.detector_pixels is None:
            self.detector_pixels = 2 * self.input_size

    def geometry(self, angle_deg: float) -> pj.Geometry:
        return pj.auto_geometry(self.reference, angle_deg, self.detector_pixels,
                                beam=self.beam, sad_mm=self.sad_mm, sdd_mm=self.sdd_mm)

    def draw_params(self, index: int, fixed_angle: float | None = None):
        rng = np.random.default_rng(self.base_seed + index)
        coeffs = mo.draw_coeffs(self.model, rng)
        angle = float(rng.uniform(0.0, 360.0)) if fixed_angle is None else float(fixed_angle)
        return coeffs, angle

    def make_target(self, coeffs) -> tuple[Volume, Mask]:
        dvf = mo.synthesize_dvf(self.model, coeffs)
        dvf32 = DisplacementField(dvf.vectors.astype(np.float32),
                                  dvf.spacing, dvf.origin)
        vol = mo.warp_volume(self.reference, dvf32)
        mask = mo.warp_mask(self.reference_mask, dvf32)
        return vol, mask

    def make_sample(self, index: int, fixed_angle: float | None = None,
                    angle_override: float | None = None) -> Sample:
        coeffs, angle = self.draw_params(index, fixed_angle)
        if angle_override is not None:
            angle = float(angle_override)
        vol, mask = self.make_target(coeffs)
        proj = pj.render_drr(vol, self.geometry(angle))
        proj_img = pj.normalize_unit(resize_image(proj.pixels, self.input_size))
        target_vol = pj.normalize_unit(resize_volume(vol, self.output_size))
        target_mask = resize_mask(mask, self.output_size)
        return Sample(index, angle, coeffs, np.asarray(proj_img, np.float32),
                      target_vol, target_mask)


def prepare_factory(reference: Volume, reference_mask: Mask, dvfs,
                    target_spacing: float, n_components: int,
                    input_size: int, output_size: int, base_seed: int,
                    detector_pixels: int | None = None, beam: str = "parallel",
                    sad_mm: float = 1000.0, sdd_mm: float = 1500.0) -> SampleFactory:
    """Resample phantom outputs to an isotropic grid and fit the motion
    model, yielding a ready sample factory."""
    ref_iso = resample_isotropic(reference, target_spacing, "cubic")
    mask_iso = resample_isotropic(reference_mask, target_spacing, "nearest")
    dvfs_iso = [resample_isotropic(d, target_spacing, "cubic") for d in dvfs]
    model = mo.fit_pca(dvfs_iso, n_components)
    return SampleFactory(ref_iso, mask_iso, model, input_size, output_size,
                         base_seed, detector_pixels=detector_pixels, beam=beam,
                         sad_mm=sad_mm, sdd_mm=sdd_mm)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    id: int
    split: str
    angle_deg: float
    coeffs: tuple
    proj_path: str
    vol_path: str
    mask_path: str


@dataclass
class DatasetManifest:
    config_hash: str
    seed: int
    records: list = field(default_factory=list)
    root: str = "."

    def ids(self, split: str | None = None):
        return [r.id for r in self.records if split is None or r.split == split]

    def record(self, sample_id: int) -> ManifestRecord:
        for r in self.records:
            if r.id == sample_id:
                return r
        raise KeyError(f"sample id {sample_id} not in manifest")

    def split_sizes(self):
        return {s: len(self.ids(s)) for s in ("train", "val", "test")}


def assign_splits(n: int, seed: int) -> list[str]:
    train, val, _ = split_counts(n)
    perm = np.random.default_rng([seed, 0xC1]).permutation(n)
    labels = [""] * n
    for rank, idx in enumerate(perm):
        if rank < train:
            labels[idx] = "train"
        elif rank < train + val:
            labels[idx] = "val"
        else:
            labels[idx] = "test"
    return labels


def save_manifest(path, manifest: DatasetManifest):
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={manifest.config_hash}\n")
        f.write(f"# seed={manifest.seed}\n")
        writer = csv.writer(f)
        writer.writerow(["id", "split", "angle_deg", "c1", "c2", "c3",
                         "proj_path", "vol_path", "mask_path"])
        for r in manifest.records:
            writer.writerow([r.id, r.split, repr(r.angle_deg),
                             repr(r.coeffs[0]), repr(r.coeffs[1]), repr(r.coeffs[2]),
                             r.proj_path, r.vol_path, r.mask_path])


def load_manifest(path) -> DatasetManifest:
    header = {}
    rows = []
    with open(path, newline="") as f:
        lines = []
        for line in f:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                header[key.strip()] = val.strip()
            else:
                lines.append(line)
        for row in csv.DictReader(lines):
            rows.append(ManifestRecord(
                id=int(row["id"]), split=row["split"],
                angle_deg=float(row["angle_deg"]),
                coeffs=(float(row["c1"]), float(row["c2"]), float(row["c3"])),
                proj_path=row["proj_path"], vol_path=row["vol_path"],
                mask_path=row["mask_path"]))
    return DatasetManifest(config_hash=header.get("config_hash", ""),
                           seed=int(header.get("seed", 0)), records=rows,
                           root=os.path.dirname(os.path.abspath(path)))


def write_sample(out_dir, sample: Sample) -> tuple[str, str, str]:
    stem = f"s{sample.id:05d}"
    rel = (f"{stem}_proj", f"{stem}_vol", f"{stem}_mask")
    save_image2d(os.path.join(out_dir, rel[0]), sample.projection,
                 extra={"angle_deg": repr(sample.angle_deg)})
    save_volume(os.path.join(out_dir, rel[1]), sample.target_volume)
    save_mask(os.path.join(out_dir, rel[2]), sample.target_mask)
    return rel


def build_dataset(factory: SampleFactory, n_samples: int, seed: int,
                  out_dir, config_hash: str = "",
                  fixed_angle: float | None = None) -> DatasetManifest:
    """Synthesize the corpus, persist every sample, and write the manifest.

    `seed` governs the split shuffle; per-sample draws use the factory's
    base_seed so regeneration of any single sample is order-independent.
    """
    os.makedirs(out_dir, exist_ok=True)
    labels = assign_splits(n_samples, seed)
    manifest = DatasetManifest(config_hash=config_hash, seed=seed, root=str(out_dir))
    for i in range(n_samples):
        sample = factory.make_sample(i, fixed_angle=fixed_angle)
        try:
            rel = write_sample(out_dir, sample)
        except OSError as e:
            raise OSError(f"failed to persist sample {i}: {e}") from e
        manifest.records.append(ManifestRecord(
            id=i, split=labels[i], angle_deg=sample.angle_deg,
            coeffs=tuple(float(c) for c in sample.pca_coeffs),
            proj_path=rel[0], vol_path=rel[1], mask_path=rel[2]))
    save_manifest(os.path.join(out_dir, "manifest.csv"), manifest)
    return manifest


def build_fixed_angle_dataset(factory: SampleFactory, n_samples: int, seed: int,
                              out_dir, angle_deg: float,
                              config_hash: str = "") -> DatasetManifest:
    """Same corpus with the gantry angle pinned; targets match the
    random-angle corpus for identical seeds."""
    return build_dataset(factory, n_samples, seed, out_dir,
                         config_hash=config_hash, fixed_angle=angle_deg)


def load_sample(manifest: DatasetManifest, sample_id: int,
                input_size: int | None = None,
                output_size: int | None = None) -> Sample:
    """Load one sample from disk with all invariants re-checked."""
    rec = manifest.record(sample_id)
    root = manifest.root
    pixels, meta = load_image2d(os.path.join(root, rec.proj_path))
    vol = load_volume(os.path.join(root, rec.vol_path))
    mask = load_mask(os.path.join(root, rec.mask_path))
    if vol.voxels.shape != mask.voxels.shape:
        raise ValueError(f"sample {sample_id}: volume {vol.voxels.shape} and "
                         f"mask {mask.voxels.shape} disagree")
    sample = Sample(sample_id, rec.angle_deg, np.array(rec.coeffs), pixels, vol, mask)
    sample.validate(input_size, output_size)
    return sample
