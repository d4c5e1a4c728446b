"""Binary 8-bit grayscale PGM (P5) output for slice dumps.

The segmentation overlay encodes false negatives, false positives, and
true positives as three gray levels on a black background.
"""

from __future__ import annotations

import numpy as np

OVERLAY_FN = 64
OVERLAY_FP = 160
OVERLAY_TP = 255


def write_pgm(path, image: np.ndarray):
    """Write a 2D array as binary PGM; float input is scaled from [0,1]."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


def overlay_slice(pred_mask_slice: np.ndarray, target_mask_slice: np.ndarray) -> np.ndarray:
    """Gray-level overlay: FN=64, FP=160, TP=255, background 0."""
    pred = pred_mask_slice.astype(bool)
    target = target_mask_slice.astype(bool)
    out = np.zeros(pred.shape, np.uint8)
    out[target & ~pred] = OVERLAY_FN
    out[pred & ~target] = OVERLAY_FP
    out[pred & target] = OVERLAY_TP
    return out
