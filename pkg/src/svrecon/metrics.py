"""Evaluation suite: MAE/MSE/RMSE/PSNR/SSIM for reconstruction quality,
DICE and center-of-mass distance for segmentation.

PSNR uses a fixed peak of 1.0 (volumes are unit-normalized); a zero-MSE
pair reports math.inf. SSIM is volumetric: an 11^3 Gaussian window
(sigma 1.5) evaluated wherever the window fits, standard stabilizers
C1 = 0.01^2, C2 = 0.03^2. An empty mask makes COMD undefined (NaN);
aggregates are taken over the defined, finite rows only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import dataset as ds
from . import network as net
from .autodiff import Tensor
from .volume import Mask, Volume

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

METRIC_COLUMNS = ("mae", "mse", "rmse", "psnr_db", "ssim", "dice", "comd_mm")


def _check_pair(pred: Volume, target: Volume):
    if pred.voxels.shape != target.voxels.shape or pred.spacing != target.spacing:
        raise ValueError(f"geometry mismatch: {pred.dims}@{pred.spacing} vs "
                         f"{target.dims}@{target.spacing}")


def mae(pred: Volume, target: Volume) -> float:
    _check_pair(pred, target)
    return float(np.abs(pred.voxels.astype(np.float64)
                        - target.voxels.astype(np.float64)).mean())


def mse(pred: Volume, target: Volume) -> float:
    _check_pair(pred, target)
    d = pred.voxels.astype(np.float64) - target.voxels.astype(np.float64)
    return float((d * d).mean())


def rmse(pred: Volume, target: Volume) -> float:
    return math.sqrt(mse(pred, target))


def psnr(pred: Volume, target: Volume) -> float:
    m = mse(pred, target)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


def _gaussian_kernel1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _windowed_mean(arr, kernel):
    out = arr.astype(np.float64)
    for axis in range(3):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="constant")
    h = SSIM_WINDOW // 2
    return out[h:-h, h:-h, h:-h]


def ssim(pred: Volume, target: Volume) -> float:
    """Mean volumetric SSIM over all fully-supported window positions."""
    _check_pair(pred, target)
    if min(pred.voxels.shape) < SSIM_WINDOW:
        raise ValueError(f"volume {pred.voxels.shape} smaller than the "
                         f"{SSIM_WINDOW}^3 SSIM window")
    k = _gaussian_kernel1d()
    x = pred.voxels.astype(np.float64)
    y = target.voxels.astype(np.float64)
    mu_x = _windowed_mean(x, k)
    mu_y = _windowed_mean(y, k)
    xx = _windowed_mean(x * x, k) - mu_x * mu_x
    yy = _windowed_mean(y * y, k) - mu_y * mu_y
    xy = _windowed_mean(x * y, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * xy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (xx + yy + SSIM_C2)
    return float((num / den).mean())


def dice(pred_mask: Mask, target_mask: Mask) -> float:
    """2|A∩B| / (|A|+|B|); defined as 1.0 when both masks are empty."""
    if pred_mask.voxels.shape != target_mask.voxels.shape:
        raise ValueError(f"geometry mismatch: {pred_mask.dims} vs {target_mask.dims}")
    a = pred_mask.voxels.astype(bool)
    b = target_mask.voxels.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def centroid_mm(mask: Mask) -> np.ndarray | None:
    """Spacing-weighted center of mass (mm), or None for an empty mask."""
    idx = np.argwhere(mask.voxels > 0)
    if idx.size == 0:
        return None
    sx, sy, sz = mask.spacing
    ox, oy, oz = mask.origin
    mean = idx.astype(np.float64).mean(axis=0)  # (z, y, x)
    return np.array([ox + mean[2] * sx, oy + mean[1] * sy, oz + mean[0] * sz])


def comd(pred_mask: Mask, target_mask: Mask) -> float:
    """Euclidean distance between mask centroids in mm; NaN if either
    mask is empty (undefined, carried into reports as an empty cell)."""
    if (pred_mask.voxels.shape != target_mask.voxels.shape
            or pred_mask.spacing != target_mask.spacing):
        raise ValueError(f"geometry mismatch: {pred_mask.dims}@{pred_mask.spacing} "
                         f"vs {target_mask.dims}@{target_mask.spacing}")
    ca = centroid_mm(pred_mask)
    cb = centroid_mm(target_mask)
    if ca is None or cb is None:
        return math.nan
    return float(np.linalg.norm(ca - cb))


def binarize_seg(seg_probs, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Mask:
    """Tumor where the tumor channel strictly exceeds the background
    channel; exact ties go to background."""
    probs = seg_probs.data if isinstance(seg_probs, Tensor) else np.asarray(seg_probs)
    if probs.shape[0] != 2:
        raise ValueError(f"expected 2-channel probabilities, got shape {probs.shape}")
    return Mask((probs[0] > probs[1]).astype(np.uint8), spacing, origin)


# ---------------------------------------------------------------------------
# suite evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    tag: str
    rows: list = field(default_factory=list)  # dicts: sample_id + metrics

    def aggregates(self):
        """(mean, std) over defined finite values, per metric column."""
        means, stds = {}, {}
        for col in METRIC_COLUMNS:
            vals = np.array([r[col] for r in self.rows
                             if r.get(col) is not None and np.isfinite(r[col])])
            means[col] = float(vals.mean()) if vals.size else math.nan
            stds[col] = float(vals.std()) if vals.size else math.nan
        return means, stds

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["sample_id", "tag"] + list(METRIC_COLUMNS))
            for r in self.rows:
                writer.writerow([r["sample_id"], self.tag]
                                + [_fmt_metric(r[c]) for c in METRIC_COLUMNS])
            mean, std = self.aggregates()
            writer.writerow(["__mean__", self.tag]
                            + [_fmt_metric(mean[c]) for c in METRIC_COLUMNS])
            writer.writerow(["__std__", self.tag]
                            + [_fmt_metric(std[c]) for c in METRIC_COLUMNS])


def _fmt_metric(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return repr(float(v))


def _parse_metric(s):
    if s == "":
        return math.nan
    if s == "inf":
        return math.inf
    return float(s)


def load_report(path) -> EvalReport:
    rows = []
    tag = ""
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            if row["sample_id"].startswith("__"):
                continue
            tag = row["tag"]
            parsed = {"sample_id": row["sample_id"]}
            for c in METRIC_COLUMNS:
                parsed[c] = _parse_metric(row[c])
            rows.append(parsed)
    return EvalReport(tag=tag, rows=rows)


def evaluate_pair(pred_vol: Volume, pred_mask: Mask | None,
                  target_vol: Volume, target_mask: Mask) -> dict:
    row = {
        "mae": mae(pred_vol, target_vol),
        "mse": mse(pred_vol, target_vol),
        "rmse": rmse(pred_vol, target_vol),
        "psnr_db": psnr(pred_vol, target_vol),
        "ssim": ssim(pred_vol, target_vol),
    }
    if pred_mask is not None:
        row["dice"] = dice(pred_mask, target_mask)
        row["comd_mm"] = comd(pred_mask, target_mask)
    else:
        row["dice"] = None
        row["comd_mm"] = None
    return row


def predict_sample(model: net.ModelState, sample: ds.Sample,
                   projection_override: np.ndarray | None = None):
    """Inference on one sample: (predicted Volume, predicted Mask or None)."""
    proj = (sample.projection if projection_override is None
            else projection_override)
    with ad.no_grad():
        result = net.forward(model, Tensor(proj[None, :, :]))
    spacing = sample.target_volume.spacing
    origin = sample.target_volume.origin
    pred_vol = Volume(result.recon.data[0], spacing, origin)
    pred_mask = None
    if result.seg_probs is not None:
        pred_mask = binarize_seg(result.seg_probs, spacing, origin)
    return pred_vol, pred_mask


def evaluate_samples(model: net.ModelState, samples, tag: str,
                     projection_overrides: dict | None = None) -> EvalReport:
    report = EvalReport(tag=tag)
    for sample in samples:
        override = (projection_overrides or {}).get(sample.id)
        pred_vol, pred_mask = predict_sample(model, sample, override)
        row = evaluate_pair(pred_vol, pred_mask,
                            sample.target_volume, sample.target_mask)
        row["sample_id"] = sample.id
        report.rows.append(row)
    return report


def evaluate_suite(model: net.ModelState, manifest: ds.DatasetManifest,
                   split: str, tag: str) -> EvalReport:
    """Score every sample of a manifest split with all seven metrics."""
    ids = manifest.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    samples = [ds.load_sample(manifest, i) for i in ids]
    return evaluate_samples(model, samples, tag)
