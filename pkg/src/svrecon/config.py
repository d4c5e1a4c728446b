"""Run configuration: JSON file with strict key validation.

Unknown keys are rejected with their full path; the resolved
(defaults-expanded) configuration is what gets written next to every
command's outputs and hashed into dataset manifests.
"""

from __future__ import annotations

import copy
import hashlib
import json

from .network import NetworkConfig
from .phantom import PhantomSpec
from .training import TrainConfig

DEFAULTS = {
    "seed": 0,
    "phantom": {
        "dims": [64, 64, 64],
        "spacing_mm": [2.0, 2.0, 2.0],
        "body_semi_axes_mm": [54.0, 42.0, 60.0],
        "lung_semi_axes_mm": [20.0, 26.0, 40.0],
        "lung_offset_mm": [26.0, 0.0, 4.0],
        "spine_radius_mm": 7.0,
        "spine_offset_y_mm": 28.0,
        "rib_shell_fractions": [0.90, 0.97],
        "rib_period_mm": 18.0,
        "rib_duty": 0.45,
        "tumor_center_mm": [26.0, 0.0, 12.0],
        "tumor_radius_mm": 12.0,
        "breathing_amplitude_mm": 8.0,
        "compression_factor": 0.035,
        "texture_amplitude": 0.02,
        "smooth_sigma_vox": 0.6,
        "phase_count": 10,
    },
    "dataset": {
        "n_samples": 120,
        "target_spacing_mm": 1.0,
        "n_components": 3,
        "input_size": 32,
        "output_size": 32,
        "detector_pixels": None,  # default: 2 * input_size
        "beam": "parallel",
        "sad_mm": 1000.0,
        "sdd_mm": 1500.0,
    },
    "network": {
        "base_channels": 16,
        "enable_seg_branch": True,
        "enable_aec": True,
        "enable_ure": True,
        "attention_residual_init": 0.0,
        "aec_norm": True,
        "bottleneck_mode": "reshape",
    },
    "training": {
        "epochs": 60,
        "lr0": 2e-3,
        "decay_start": 30,
        "beta1": 0.50,
        "beta2": 0.99,
        "eps": 1e-8,
        "alpha1": 1.0,
        "alpha2": 1.0,
        "deep_supervision": False,
    },
    "noise_sigmas": [0.0, 0.01, 0.02, 0.05],
}


def _merge(defaults, override, path=""):
    if not isinstance(override, dict):
        raise ValueError(f"config section {path or '<root>'} must be an object")
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ValueError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            merged[key] = _merge(defaults[key], value, where)
        else:
            merged[key] = value
    return merged


def resolve_config(overrides: dict | None = None) -> dict:
    return _merge(DEFAULTS, overrides or {})


def load_config(path) -> dict:
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON: {e}") from e
    return resolve_config(raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_config(path, cfg: dict):
    with open(path, "w") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)
        f.write("\n")


def phantom_spec(cfg: dict) -> PhantomSpec:
    p = cfg["phantom"]
    return PhantomSpec(
        dims=tuple(p["dims"]), spacing=tuple(p["spacing_mm"]),
        body_semi_axes_mm=tuple(p["body_semi_axes_mm"]),
        lung_semi_axes_mm=tuple(p["lung_semi_axes_mm"]),
        lung_offset_mm=tuple(p["lung_offset_mm"]),
        spine_radius_mm=p["spine_radius_mm"],
        spine_offset_y_mm=p["spine_offset_y_mm"],
        rib_shell_fractions=tuple(p["rib_shell_fractions"]),
        rib_period_mm=p["rib_period_mm"], rib_duty=p["rib_duty"],
        tumor_center_mm=tuple(p["tumor_center_mm"]),
        tumor_radius_mm=p["tumor_radius_mm"],
        breathing_amplitude_mm=p["breathing_amplitude_mm"],
        compression_factor=p["compression_factor"],
        texture_amplitude=p["texture_amplitude"],
        smooth_sigma_vox=p["smooth_sigma_vox"],
        phase_count=p["phase_count"], seed=cfg["seed"])


def network_config(cfg: dict) -> NetworkConfig:
    n = cfg["network"]
    d = cfg["dataset"]
    return NetworkConfig(
        input_size=d["input_size"], output_size=d["output_size"],
        base_channels=n["base_channels"],
        enable_seg_branch=n["enable_seg_branch"],
        enable_aec=n["enable_aec"], enable_ure=n["enable_ure"],
        attention_residual_init=n["attention_residual_init"],
        aec_norm=n["aec_norm"], bottleneck_mode=n["bottleneck_mode"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(
        epochs=t["epochs"], lr0=t["lr0"], decay_start=t["decay_start"],
        beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"],
        alpha1=t["alpha1"], alpha2=t["alpha2"],
        deep_supervision=t["deep_supervision"], seed=cfg["seed"])
