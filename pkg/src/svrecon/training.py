"""Two-part loss, Adam optimizer, learning-rate schedule, training loop.

Batch size is fixed at 1: each step zeroes gradients, runs the full
forward pass, backpropagates the weighted sum of volume MSE and tumor
BCE, and applies one bias-corrected Adam update. After every epoch the
model is scored on the validation split; the parameters with the
smallest validation loss are returned.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dataset as ds
from . import network as net
from .autodiff import Tensor
from .params import ParamStore


@dataclass
class TrainConfig:
    epochs: int = 100
    lr0: float = 2e-3
    decay_start: int = 50  # constant lr through this epoch, then linear to 0
    beta1: float = 0.50
    beta2: float = 0.99
    eps: float = 1e-8
    alpha1: float = 1.0  # reconstruction weight
    alpha2: float = 1.0  # segmentation weight
    deep_supervision: bool = False  # also supervise the pre-refinement output
    seed: int = 0

    def validate(self):
        if not (0 < self.decay_start < self.epochs):
            raise ValueError(f"decay_start {self.decay_start} must lie in "
                             f"(0, epochs={self.epochs})")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # per-epoch dict rows
    best_epoch: int = -1
    best_val: float = float("inf")

    def append(self, **row):
        self.epochs.append(row)

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "lr", "train_mse", "train_bce",
                             "train_total", "val_total", "seconds"])
            for r in self.epochs:
                writer.writerow([r["epoch"], repr(r["lr"]), repr(r["train_mse"]),
                                 repr(r["train_bce"]), repr(r["train_total"]),
                                 repr(r["val_total"]), f"{r['seconds']:.3f}"])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    """Voxel-mean squared error between volumes of identical shape."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = ad.sub(pred, target)
    return ad.mean(ad.mul(diff, diff))


def bce_loss(p: Tensor, y) -> Tensor:
    """Voxel-mean binary cross entropy of tumor probabilities vs labels.

    p is clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    y_arr = np.asarray(y.data if isinstance(y, Tensor) else y)
    if p.shape != y_arr.shape:
        raise ValueError(f"bce_loss shape mismatch: {p.shape} vs {y_arr.shape}")
    y_t = Tensor(y_arr.astype(p.dtype))
    pc = ad.clamp(p, 1e-7, 1.0 - 1e-7)
    pos = ad.mul(y_t, ad.log(pc))
    neg = ad.mul(ad.sub(1.0, y_t), ad.log(ad.sub(1.0, pc)))
    return ad.neg(ad.mean(ad.add(pos, neg)))


def total_loss(recon: Tensor, target_vol, seg_p, target_mask,
               alpha1: float = 1.0, alpha2: float = 1.0):
    """alpha1 * MSE + alpha2 * BCE; the BCE term is dropped when the
    segmentation branch is absent. Returns (total, mse, bce_or_None)."""
    mse = mse_loss(recon, target_vol)
    total = ad.mul(alpha1, mse)
    bce = None
    if seg_p is not None:
        bce = bce_loss(seg_p, target_mask)
        total = ad.add(total, ad.mul(alpha2, bce))
    return total, mse, bce


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant lr0 through decay_start, then linear decay to 0 at epochs."""
    if not (1 <= epoch <= cfg.epochs):
        raise ValueError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if epoch <= cfg.decay_start:
        return cfg.lr0
    return cfg.lr0 * (cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.5,
              beta2: float = 0.99, eps: float = 1e-8):
    """One bias-corrected Adam update over every parameter in the store."""
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        if g is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        m, v = store.moments(name)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def _sample_tensors(sample: ds.Sample):
    proj = Tensor(sample.projection[None, :, :])
    vol = Tensor(sample.target_volume.voxels[None, :, :, :])
    mask = sample.target_mask.voxels[None, :, :, :]
    return proj, vol, mask


def _seg_head_prob(result: net.ForwardResult):
    if result.seg_probs is None:
        return None
    return ad.slice_channels(result.seg_probs, 0, 1)


def _loss_for_sample(model, sample, cfg: TrainConfig):
    proj, vol, mask = _sample_tensors(sample)
    result = net.forward(model, proj)
    total, mse, bce = total_loss(result.recon, vol, _seg_head_prob(result), mask,
                                 cfg.alpha1, cfg.alpha2)
    if (cfg.deep_supervision and model.config.enable_ure
            and result.seg_initial is not None):
        initial_p = ad.slice_channels(result.seg_initial, 0, 1)
        total = ad.add(total, ad.mul(cfg.alpha2, bce_loss(initial_p, mask)))
    return total, mse, bce


def evaluate_loss(model, samples, cfg: TrainConfig) -> float:
    """Mean total loss over samples; never mutates parameters."""
    with ad.no_grad():
        vals = []
        for s in samples:
            total, _, _ = _loss_for_sample(model, s, cfg)
            vals.append(float(total.data))
    return float(np.mean(vals))


class SampleCache:
    """Lazy in-memory cache of manifest samples."""

    def __init__(self, manifest: ds.DatasetManifest):
        self.manifest = manifest
        self._cache = {}

    def get(self, sample_id: int) -> ds.Sample:
        if sample_id not in self._cache:
            self._cache[sample_id] = ds.load_sample(self.manifest, sample_id)
        return self._cache[sample_id]


def train(model: net.ModelState, manifest: ds.DatasetManifest,
          cfg: TrainConfig, log_path=None, progress=None):
    """Run the full loop; returns (best ModelState, TrainLog).

    Aborts with epoch/sample context on any non-finite loss.
    """
    cfg.validate()
    train_ids = manifest.ids("train")
    val_ids = manifest.ids("val")
    if not train_ids:
        raise ValueError("manifest has no training split")
    cache = SampleCache(manifest)
    log = TrainLog()
    best_values = model.params.copy_values()

    for epoch in range(1, cfg.epochs + 1):
        t_start = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(train_ids)
        mse_sum = bce_sum = total_sum = 0.0
        for sid in order:
            sample = cache.get(int(sid))
            model.params.zero_grad()
            total, mse, bce = _loss_for_sample(model, sample, cfg)
            value = float(total.data)
            if not np.isfinite(value):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, "
                                   f"sample {sid}: {value}")
            ad.backward(total)
            adam_step(model.params, lr, cfg.beta1, cfg.beta2, cfg.eps)
            total_sum += value
            mse_sum += float(mse.data)
            bce_sum += float(bce.data) if bce is not None else 0.0
        n = len(order)
        val_total = (evaluate_loss(model, [cache.get(i) for i in val_ids], cfg)
                     if val_ids else total_sum / n)
        seconds = time.perf_counter() - t_start
        log.append(epoch=epoch, lr=lr, train_mse=mse_sum / n, train_bce=bce_sum / n,
                   train_total=total_sum / n, val_total=val_total, seconds=seconds)
        if val_total < log.best_val:
            log.best_val = val_total
            log.best_epoch = epoch
            best_values = model.params.copy_values()
        if progress:
            progress(log.epochs[-1])

    best = net.build(model.config, seed=0)
    best.params.load_values(best_values)
    if log_path:
        log.save_csv(log_path)
    return best, log
