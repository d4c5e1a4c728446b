"""Deterministic synthetic 4D thorax phantom.

Builds a CT-like reference volume (body, lungs, rib shell, spine, tumor),
a tumor mask, ten breathing phases obtained by warping the reference with
analytic displacement fields (superior-inferior translation of the lower
lungs plus mild radial chest compression), and the fields themselves.

Axes: x left-right, y anterior-posterior, z superior-inferior. Breathing
phase i scales the motion by sin(pi * i / (phase_count - 1)), so phase 0
is the reference and mid-cycle phases carry the peak displacement.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .motion import warp_mask, warp_volume
from .volume import (DisplacementField, Mask, Volume, load_dvf, load_mask,
                     load_volume, save_dvf, save_mask, save_volume)

# normalized tissue palette; ordering mimics CT contrast
INTENSITY_BODY = 0.3
INTENSITY_LUNG = 0.05
INTENSITY_BONE = 0.9
INTENSITY_TUMOR = 0.45


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)  # (Nx, Ny, Nz)
    spacing: tuple = (2.0, 2.0, 2.0)  # mm
    # ellipsoid semi-axes in mm; centers are offsets from the volume center
    body_semi_axes_mm: tuple = (54.0, 42.0, 60.0)
    lung_semi_axes_mm: tuple = (20.0, 26.0, 40.0)
    lung_offset_mm: tuple = (26.0, 0.0, 4.0)  # mirrored in +-x
    spine_radius_mm: float = 7.0
    spine_offset_y_mm: float = 28.0
    rib_shell_fractions: tuple = (0.90, 0.97)
    rib_period_mm: float = 18.0
    rib_duty: float = 0.45
    tumor_center_mm: tuple = (26.0, 0.0, 12.0)  # offset from volume center
    tumor_radius_mm: float = 12.0
    breathing_amplitude_mm: float = 8.0
    compression_factor: float = 0.035
    texture_amplitude: float = 0.02
    smooth_sigma_vox: float = 0.6
    phase_count: int = 10
    seed: int = 0

    def validate(self):
        if self.phase_count != 10:
            raise ValueError(f"phase_count must be 10, got {self.phase_count}")
        if min(self.dims) < 8:
            raise ValueError(f"dims too small: {self.dims}")
        if self.tumor_radius_mm <= 0 or self.breathing_amplitude_mm < 0:
            raise ValueError("tumor radius must be positive and amplitude nonnegative")


def _grids_mm(spec: PhantomSpec):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    x = (np.arange(nx) + 0.5) * sx
    y = (np.arange(ny) + 0.5) * sy
    z = (np.arange(nz) + 0.5) * sz
    zz, yy, xx = np.meshgrid(z, y, x, indexing="ij", sparse=True)
    center = (nx * sx / 2.0, ny * sy / 2.0, nz * sz / 2.0)
    return xx, yy, zz, center


def _ellipsoid(xx, yy, zz, center, semi):
    return (((xx - center[0]) / semi[0]) ** 2
            + ((yy - center[1]) / semi[1]) ** 2
            + ((zz - center[2]) / semi[2]) ** 2) <= 1.0


def _lung_regions(spec, xx, yy, zz, center):
    cx, cy, cz = center
    ox, oy, oz = spec.lung_offset_mm
    left = _ellipsoid(xx, yy, zz, (cx - ox, cy + oy, cz + oz), spec.lung_semi_axes_mm)
    right = _ellipsoid(xx, yy, zz, (cx + ox, cy + oy, cz + oz), spec.lung_semi_axes_mm)
    return left | right


def build_reference(spec: PhantomSpec) -> tuple[Volume, Mask, Mask]:
    """Reference CT volume, tumor mask, and lung-region mask."""
    spec.validate()
    xx, yy, zz, center = _grids_mm(spec)
    cx, cy, cz = center

    body = _ellipsoid(xx, yy, zz, center, spec.body_semi_axes_mm)
    lungs = _lung_regions(spec, xx, yy, zz, center)

    f0, f1 = spec.rib_shell_fractions
    inner = _ellipsoid(xx, yy, zz, center,
                       tuple(a * f0 for a in spec.body_semi_axes_mm))
    outer = _ellipsoid(xx, yy, zz, center,
                       tuple(a * f1 for a in spec.body_semi_axes_mm))
    bands = (np.mod(zz, spec.rib_period_mm) / spec.rib_period_mm) < spec.rib_duty
    ribs = (outer & ~inner) & np.broadcast_to(bands, outer.shape)

    spine = ((((xx - cx) / spec.spine_radius_mm) ** 2
              + ((yy - (cy + spec.spine_offset_y_mm)) / spec.spine_radius_mm) ** 2) <= 1.0)
    spine = spine & body

    tx, ty, tz = spec.tumor_center_mm
    tumor = _ellipsoid(xx, yy, zz, (cx + tx, cy + ty, cz + tz),
                       (spec.tumor_radius_mm,) * 3)

    vol = np.zeros((spec.dims[2], spec.dims[1], spec.dims[0]), dtype=np.float64)
    vol[body] = INTENSITY_BODY
    vol[lungs] = INTENSITY_LUNG
    vol[ribs] = INTENSITY_BONE
    vol[spine] = INTENSITY_BONE
    vol[tumor] = INTENSITY_TUMOR

    if spec.texture_amplitude > 0:
        rng = np.random.default_rng(spec.seed)
        tex = np.zeros_like(vol)
        for _ in range(4):
            freq = rng.uniform(0.02, 0.08, size=3)
            phase = rng.uniform(0, 2 * np.pi, size=3)
            tex += np.cos(2 * np.pi * freq[0] * xx + phase[0]) \
                * np.cos(2 * np.pi * freq[1] * yy + phase[1]) \
                * np.cos(2 * np.pi * freq[2] * zz + phase[2])
        vol += spec.texture_amplitude * (tex / 4.0) * (body & ~lungs & ~ribs & ~spine)

    if spec.smooth_sigma_vox > 0:
        vol = ndimage.gaussian_filter(vol, spec.smooth_sigma_vox)
    vol = np.clip(vol, 0.0, 1.0)

    if not tumor.any():
        raise ValueError("tumor mask is empty; check tumor_center_mm/tumor_radius_mm")
    if not (tumor <= lungs).all():
        raise ValueError("tumor must lie strictly inside a lung region")

    volume = Volume(vol.astype(np.float32), spec.spacing)
    tumor_mask = Mask(tumor.astype(np.uint8), spec.spacing)
    lung_mask = Mask(lungs.astype(np.uint8), spec.spacing)
    return volume, tumor_mask, lung_mask


def phase_scale(i: int, phase_count: int) -> float:
    return float(np.sin(np.pi * i / (phase_count - 1)))


# hysteresis sway amplitudes as fractions of the breathing amplitude;
# they give the ten-phase snapshot matrix rank 3 for the motion-model fit
HYSTERESIS_AP_FRACTION = 0.10
HYSTERESIS_LR_FRACTION = 0.05


def _motion_weight(spec: PhantomSpec):
    """Smooth spatial envelope of the breathing translation."""
    xx, yy, zz, center = _grids_mm(spec)
    cx, cy, cz = center
    nz, ny, nx = spec.dims[2], spec.dims[1], spec.dims[0]

    # lateral confinement: full weight well inside the body cross-section
    ax, ay, _ = spec.body_semi_axes_mm
    rho = np.sqrt(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2)
    w_xy = np.clip((0.98 - rho) / (0.98 - 0.80), 0.0, 1.0)

    # axial ramp: 0 at the apex side, 1 from just above the tumor downward
    tz_abs = cz + spec.tumor_center_mm[2]
    z1 = tz_abs - spec.tumor_radius_mm - 4.0
    z0 = z1 - 28.0
    t = np.clip((zz - z0) / (z1 - z0), 0.0, 1.0)
    w_z = 0.5 - 0.5 * np.cos(np.pi * t)
    return np.broadcast_to(w_z * w_xy, (nz, ny, nx)), (xx, yy, cx, cy)


def analytic_dvf(spec: PhantomSpec, phase_index: int) -> DisplacementField:
    """Displacement field for one phase (mm, reference -> target).

    Primary motion: superior-inferior translation of the lower lungs
    (weight 1 over tumor and diaphragm, cosine ramp to 0 toward the apex)
    plus radial chest compression, both scaled by the phase sinusoid.
    Two small higher-harmonic sway modes model breathing hysteresis.
    """
    pc = spec.phase_count
    s1 = phase_scale(phase_index, pc)
    s2 = float(np.sin(2 * np.pi * phase_index / (pc - 1)))
    s3 = float(np.sin(3 * np.pi * phase_index / (pc - 1)))

    w, (xx, yy, cx, cy) = _motion_weight(spec)
    nz, ny, nx = spec.dims[2], spec.dims[1], spec.dims[0]
    amp = spec.breathing_amplitude_mm

    vec = np.zeros((nz, ny, nx, 3), dtype=np.float64)
    vec[..., 2] = s1 * amp * w
    comp = -s1 * spec.compression_factor
    vec[..., 0] = comp * np.broadcast_to(xx - cx, (nz, ny, nx))
    vec[..., 1] = comp * np.broadcast_to(yy - cy, (nz, ny, nx))
    vec[..., 1] += s2 * HYSTERESIS_AP_FRACTION * amp * w
    vec[..., 0] += s3 * HYSTERESIS_LR_FRACTION * amp * w
    return DisplacementField(vec.astype(np.float32), spec.spacing)


def generate_phantom(spec: PhantomSpec):
    """Return (reference, reference_mask, phases, dvfs) for ten phases.

    phases[i] is the (Volume, Mask) pair for phase i; dvfs[i] maps
    reference coordinates to phase-i coordinates. Phase 0 is the
    reference itself under an identity field.
    """
    reference, ref_mask, lung_mask = build_reference(spec)
    phases = []
    dvfs = []
    for i in range(spec.phase_count):
        dvf = analytic_dvf(spec, i)
        if not dvf.vectors.any():
            vol_i, mask_i = reference.copy(), ref_mask.copy()
        else:
            vol_i = warp_volume(reference, dvf)
            mask_i = warp_mask(ref_mask, dvf)
        if mask_i.count() == 0:
            raise ValueError(f"phase {i}: warped tumor mask is empty")
        # swept-path constraint: the moved tumor must stay inside the
        # reference lung envelope (the warped lung contains it trivially)
        if not (mask_i.voxels <= lung_mask.voxels).all():
            raise ValueError(f"phase {i}: tumor leaves the lung region")
        phases.append((vol_i, mask_i))
        dvfs.append(dvf)
    cap = 2.0 * spec.breathing_amplitude_mm
    worst = max(d.max_magnitude() for d in dvfs)
    if worst > cap:
        raise ValueError(f"DVF magnitude {worst:.2f} mm exceeds twice the "
                         f"breathing amplitude ({cap:.2f} mm)")
    return reference, ref_mask, phases, dvfs


# ---------------------------------------------------------------------------
# persistence / external ingestion
# ---------------------------------------------------------------------------

def save_phantom(path, reference: Volume, reference_mask: Mask, phases, dvfs):
    os.makedirs(path, exist_ok=True)
    index = {"phase_count": len(phases),
             "reference_ct": "reference_ct", "reference_mask": "reference_mask",
             "phases": []}
    save_volume(os.path.join(path, "reference_ct"), reference)
    save_mask(os.path.join(path, "reference_mask"), reference_mask)
    for i, ((vol, mask), dvf) in enumerate(zip(phases, dvfs)):
        names = {"ct": f"phase{i:02d}_ct", "mask": f"phase{i:02d}_mask",
                 "dvf": f"phase{i:02d}_dvf"}
        save_volume(os.path.join(path, names["ct"]), vol)
        save_mask(os.path.join(path, names["mask"]), mask)
        save_dvf(os.path.join(path, names["dvf"]),
                 DisplacementField(dvf.vectors.astype(np.float32), dvf.spacing, dvf.origin))
        index["phases"].append(names)
    with open(os.path.join(path, "phantom.json"), "w") as f:
        json.dump(index, f, indent=1)


def load_external_4dct(path):
    """Load a saved 4D dataset: (reference, reference_mask, phases, dvfs).

    Expects the layout written by save_phantom: an index file plus one
    volume/mask/field triple per phase. Displacement fields must be
    supplied by the caller; they are not derived here.
    """
    index_path = os.path.join(path, "phantom.json")
    if not os.path.exists(index_path):
        raise FileNotFoundError(f"missing index file: {index_path}")
    with open(index_path) as f:
        index = json.load(f)
    expected = int(index.get("phase_count", 10))
    listed = index.get("phases", [])
    if len(listed) != expected:
        raise ValueError(f"index lists {len(listed)} phases, expected {expected}")
    reference = load_volume(os.path.join(path, index["reference_ct"]))
    ref_mask = load_mask(os.path.join(path, index["reference_mask"]))
    if ref_mask.dims != reference.dims:
        raise ValueError(f"reference mask dims {ref_mask.dims} differ from "
                         f"volume dims {reference.dims}")
    phases, dvfs = [], []
    for i, names in enumerate(listed):
        for key in ("ct", "mask", "dvf"):
            stem = os.path.join(path, names[key])
            if not os.path.exists(stem + ".meta"):
                raise FileNotFoundError(
                    f"phase {i}: missing {key} file {stem}.meta "
                    f"(expected {expected} phases)")
        vol = load_volume(os.path.join(path, names["ct"]))
        mask = load_mask(os.path.join(path, names["mask"]))
        dvf = load_dvf(os.path.join(path, names["dvf"]))
        if vol.dims != reference.dims or vol.spacing != reference.spacing:
            raise ValueError(f"phase {i}: volume geometry {vol.dims}@{vol.spacing} "
                             f"differs from reference {reference.dims}@{reference.spacing}")
        if mask.dims != vol.dims:
            raise ValueError(f"phase {i}: mask dims {mask.dims} differ from "
                             f"volume dims {vol.dims}")
        if dvf.dims != vol.dims:
            raise ValueError(f"phase {i}: field dims {dvf.dims} differ from "
                             f"volume dims {vol.dims}")
        if mask.count() == 0:
            raise ValueError(f"phase {i}: tumor mask is empty")
        phases.append((vol, mask))
        dvfs.append(dvf)
    return reference, ref_mask, phases, dvfs
