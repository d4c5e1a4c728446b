"""Dual-branch reconstruction/segmentation network.

A shared 2D residual encoder (five stride-2 blocks) feeds a channel-to-
depth bottleneck reshape; two mirrored 3D decoders (five transposed-conv
blocks each) emit the reconstructed volume (sigmoid head) and the tumor
probability pair (softmax head). Attention-enhanced skip calibrators
compress each encoder scale, apply channel self-attention, and replicate
the 2D map across depth before concatenation into both decoders; the
uncertainty-guided refinement stage reweights segmentation features by a
per-voxel confidence map and re-predicts through a fresh head.

Ablation switches: enable_seg_branch, enable_aec, enable_ure.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore

LEAKY_SLOPE = 0.2

# strictly-monotone ceiling for the confidence map: keeps the output
# inside [0, 1) where the exact formula would round to 1.0 (deviation
# bounded by CONF_CAP_K / r, far below any stated tolerance)
CONF_CAP_K = 1e-9


@dataclass
class NetworkConfig:
    input_size: int = 32
    output_size: int = 32
    levels: int = 5
    base_channels: int = 16
    enable_seg_branch: bool = True
    enable_aec: bool = True
    enable_ure: bool = True
    attention_residual_init: float = 0.0
    aec_norm: bool = True
    bottleneck_mode: str = "reshape"  # reshape | replicate

    def validate(self):
        if self.levels != 5:
            raise ValueError(f"levels must be 5, got {self.levels}")
        if self.input_size % (1 << self.levels) != 0:
            raise ValueError(f"input_size {self.input_size} not divisible by "
                             f"2^levels = {1 << self.levels}")
        if self.output_size != self.input_size:
            raise ValueError(f"output_size {self.output_size} must equal "
                             f"input_size {self.input_size}")
        h = self.bottleneck_hw
        c5 = self.encoder_channels[-1]
        if c5 % h != 0:
            raise ValueError(f"bottleneck channels {c5} not divisible by "
                             f"bottleneck depth {h}")
        c0 = c5 * h if self.bottleneck_mode == "replicate" else c5 // h
        if c0 % (1 << self.levels) != 0:
            raise ValueError(f"decoder start channels {c0} not divisible by "
                             f"2^levels; raise base_channels")
        if self.enable_ure and not self.enable_seg_branch:
            raise ValueError("enable_ure requires enable_seg_branch")
        if self.bottleneck_mode not in ("reshape", "replicate"):
            raise ValueError(f"unknown bottleneck_mode {self.bottleneck_mode!r}")

    @property
    def encoder_channels(self):
        return [self.base_channels * (1 << l) for l in range(self.levels)]

    @property
    def bottleneck_hw(self):
        return self.input_size >> self.levels

    @property
    def decoder_start_channels(self):
        c5 = self.encoder_channels[-1]
        if self.bottleneck_mode == "replicate":
            return c5
        return c5 // self.bottleneck_hw

    @property
    def decoder_channels(self):
        c0 = self.decoder_start_channels
        return [c0 >> i for i in range(1, self.levels + 1)]

    @property
    def aec_source_channels(self):
        # decoder block i concatenates the calibrated encoder level 5-i;
        # the full-resolution block draws from the input projection itself
        enc = self.encoder_channels
        return [enc[self.levels - 1 - i] for i in range(1, self.levels)] + [1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls(**json.loads(text))


@dataclass
class ModelState:
    config: NetworkConfig
    params: ParamStore


@dataclass
class FeaturePyramid:
    levels: list  # five per-level 2D feature maps, H_l = input_size / 2^l
    bottleneck: Tensor  # deepest 2D feature, fed to the 2D->3D transform
    input_image: Tensor  # the projection, source of the full-res skip


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _init_tensor(seed, name, shape, fan_in=None):
    if fan_in:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        bound = 1.0 / np.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape)
    else:
        data = np.zeros(shape)
    return Tensor(data.astype(np.float32))


def _add_conv(store, seed, name, c_out, c_in, k, nd, bias=False):
    shape = (c_out, c_in) + (k,) * nd
    store.add(f"{name}.weight", _init_tensor(seed, f"{name}.weight", shape,
                                             fan_in=c_in * k ** nd))
    if bias:
        store.add(f"{name}.bias", _init_tensor(seed, f"{name}.bias", (c_out,)))


def _add_norm(store, seed, name, c):
    store.add(f"{name}.weight", Tensor(np.ones(c, np.float32)))
    store.add(f"{name}.bias", Tensor(np.zeros(c, np.float32)))


def build(config: NetworkConfig, seed: int = 0) -> ModelState:
    """Instantiate all parameters for the configured sub-networks.

    Initialization is fan-in-scaled uniform, derived per parameter name,
    so two builds with the same (config, seed) agree bit-exactly and
    shared parameters are unaffected by ablation flags.
    """
    config.validate()
    store = ParamStore()
    enc = config.encoder_channels

    for l in range(1, config.levels + 1):
        c_in = 1 if l == 1 else enc[l - 2]
        c_out = enc[l - 1]
        name = f"encoder.block{l}"
        _add_conv(store, seed, f"{name}.conv1", c_out, c_in, 3, 2)
        _add_norm(store, seed, f"{name}.n1", c_out)
        _add_conv(store, seed, f"{name}.conv2", c_out, c_out, 3, 2)
        _add_norm(store, seed, f"{name}.n2", c_out)
        _add_conv(store, seed, f"{name}.skip", c_out, c_in, 1, 2)
        _add_norm(store, seed, f"{name}.skip_n", c_out)

    if config.bottleneck_mode == "replicate":
        _add_conv(store, seed, "bottleneck.compress",
                  config.decoder_start_channels, enc[-1], 1, 2)

    if config.enable_aec:
        for i, (c3d, c2d) in enumerate(zip(config.decoder_channels,
                                           config.aec_source_channels), start=1):
            name = f"aec.block{i}"
            _add_conv(store, seed, f"{name}.compress", c3d, c2d, 3, 2)
            if config.aec_norm:
                _add_norm(store, seed, f"{name}.norm", c3d)
            store.add(f"{name}.gamma",
                      Tensor(np.full(1, config.attention_residual_init, np.float32)))

    branches = ["recon"] + (["seg"] if config.enable_seg_branch else [])
    for branch in branches:
        c_in = config.decoder_start_channels
        for i, c_out in enumerate(config.decoder_channels, start=1):
            name = f"decoder.{branch}.block{i}"
            _add_conv(store, seed, f"{name}.up", c_in, c_out, 4, 3)  # [C_in, C_out, k^3]
            _add_norm(store, seed, f"{name}.up_n", c_out)
            conv_in = 2 * c_out if config.enable_aec else c_out
            _add_conv(store, seed, f"{name}.conv", c_out, conv_in, 3, 3)
            _add_norm(store, seed, f"{name}.conv_n", c_out)
            c_in = c_out
        heads = 1 if branch == "recon" else 2
        _add_conv(store, seed, f"decoder.{branch}.head", heads,
                  config.decoder_channels[-1], 1, 3, bias=True)

    if config.enable_ure:
        c = config.decoder_channels[-1]
        _add_conv(store, seed, "ure.refine", c, c, 3, 3, bias=True)
        _add_conv(store, seed, "ure.head", 2, c, 1, 3, bias=True)

    return ModelState(config, store)


def rebuild(config: NetworkConfig, values: dict) -> ModelState:
    """Model from (config, serialized parameter values), bit-exact."""
    model = build(config, seed=0)
    model.params.load_values(values)
    return model


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _norm(store, name, x, ndim):
    w, b = store[f"{name}.weight"], store[f"{name}.bias"]
    if int(np.prod(x.shape[1:])) < 2:
        # single spatial element: standardization is undefined, keep the
        # learnable affine part so the bottleneck signal survives
        shape = (x.shape[0],) + (1,) * (len(x.shape) - 1)
        return ad.add(ad.mul(x, ad.reshape(w, shape)), ad.reshape(b, shape))
    return ad.instance_norm(x, w, b)


def _conv_bias(x, store, name, nd, stride=1, padding=0):
    op = ad.conv3d if nd == 3 else ad.conv2d
    y = op(x, store[f"{name}.weight"], stride=stride, padding=padding)
    if f"{name}.bias" in store:
        b = store[f"{name}.bias"]
        y = ad.add(y, ad.reshape(b, (b.shape[0],) + (1,) * nd))
    return y


def _encoder_block(store, name, x):
    y = ad.conv2d(x, store[f"{name}.conv1.weight"], stride=2, padding=1)
    y = _norm(store, f"{name}.n1", y, 2)
    y = ad.leaky_relu(y, LEAKY_SLOPE)
    y = ad.conv2d(y, store[f"{name}.conv2.weight"], stride=1, padding=1)
    y = _norm(store, f"{name}.n2", y, 2)
    sc = ad.conv2d(x, store[f"{name}.skip.weight"], stride=2, padding=0)
    sc = _norm(store, f"{name}.skip_n", sc, 2)
    return ad.leaky_relu(ad.add(y, sc), LEAKY_SLOPE)


def encode(model: ModelState, projection) -> FeaturePyramid:
    """Run the shared representation ladder on a [1, S, S] projection."""
    cfg = model.config
    x = projection if isinstance(projection, Tensor) else Tensor(projection)
    if x.shape != (1, cfg.input_size, cfg.input_size):
        raise ValueError(f"encode expects shape (1, {cfg.input_size}, "
                         f"{cfg.input_size}), got {x.shape}")
    levels = []
    cur = x
    for l in range(1, cfg.levels + 1):
        cur = _encoder_block(model.params, f"encoder.block{l}", cur)
        levels.append(cur)
    return FeaturePyramid(levels=levels, bottleneck=levels[-1], input_image=x)


def bottleneck_2d_to_3d(feature2d: Tensor) -> Tensor:
    """Channel-to-depth reshape: [C, h, w] -> [C/h, h, h, w]."""
    c, h, w = feature2d.shape
    if h != w:
        raise ValueError(f"bottleneck feature must be square, got {feature2d.shape}")
    if c % h != 0:
        raise ValueError(f"channels {c} not divisible by depth {h}")
    return ad.reshape(feature2d, (c // h, h, h, w))


def _bottleneck_3d(model: ModelState, pyramid: FeaturePyramid) -> Tensor:
    cfg = model.config
    if cfg.bottleneck_mode == "replicate":
        y = ad.conv2d(pyramid.bottleneck,
                      model.params["bottleneck.compress.weight"])
        return ad.repeat_depth(y, cfg.bottleneck_hw)
    return bottleneck_2d_to_3d(pyramid.bottleneck)


def aec_calibrate(feature2d: Tensor, store: ParamStore, name: str,
                  target_depth: int, aec_norm: bool = True) -> Tensor:
    """Compress channels, apply channel self-attention, replicate in depth.

    The affinity between channels of the flattened feature map is row-
    softmax-normalized; the attended sum is gated by a learnable scalar
    around an identity path, then the 2D map is stacked target_depth times.
    """
    y = ad.conv2d(feature2d, store[f"{name}.compress.weight"], stride=1, padding=1)
    if aec_norm:
        y = ad.leaky_relu(_norm(store, f"{name}.norm", y, 2), LEAKY_SLOPE)
    c, h, w = y.shape
    if h != w:
        raise ValueError(f"AEC target must be square, got {y.shape}")
    flat = ad.reshape(y, (c, h * w))
    affinity = ad.matmul(flat, ad.transpose2d(flat))  # [C, C], symmetric
    row_softmax = ad.transpose2d(ad.softmax_channel(affinity))
    attended = ad.matmul(row_softmax, flat)
    gated = ad.add(ad.mul(store[f"{name}.gamma"], attended), flat)
    return ad.repeat_depth(ad.reshape(gated, (c, h, w)), target_depth)


@dataclass
class SegOutput:
    probs: Tensor  # [2, S, S, S] channel-softmax probabilities
    features: Tensor  # pre-head feature map [F, S, S, S]


def decode(model: ModelState, pyramid: FeaturePyramid, branch: str):
    """Run one decoder branch; returns a Tensor (recon) or SegOutput."""
    cfg = model.config
    store = model.params
    if branch not in ("recon", "seg"):
        raise ValueError(f"unknown branch {branch!r}")
    if branch == "seg" and not cfg.enable_seg_branch:
        raise ValueError("segmentation branch is disabled in this configuration")

    sources = list(reversed(pyramid.levels[:-1])) + [pyramid.input_image]
    x = _bottleneck_3d(model, pyramid)
    for i in range(1, cfg.levels + 1):
        name = f"decoder.{branch}.block{i}"
        x = ad.conv_transpose3d(x, store[f"{name}.up.weight"], stride=2,
                                padding=1, output_padding=0)
        x = ad.leaky_relu(_norm(store, f"{name}.up_n", x, 3), LEAKY_SLOPE)
        if cfg.enable_aec:
            skip = aec_calibrate(sources[i - 1], store, f"aec.block{i}",
                                 target_depth=x.shape[1], aec_norm=cfg.aec_norm)
            x = ad.concat([x, skip], axis=0)
        x = ad.conv3d(x, store[f"{name}.conv.weight"], stride=1, padding=1)
        x = ad.leaky_relu(_norm(store, f"{name}.conv_n", x, 3), LEAKY_SLOPE)

    if branch == "recon":
        return ad.sigmoid(_conv_bias(x, store, "decoder.recon.head", 3))
    logits = _conv_bias(x, store, "decoder.seg.head", 3)
    return SegOutput(probs=ad.softmax_channel(logits), features=x)


def uncertainty_map(m1: Tensor, m2: Tensor) -> Tensor:
    """Per-voxel confidence 1 - exp(1 - m/(1-m)), m = max(m1, m2).

    m is clamped to [0.5, 1 - 1e-6]; the output is kept strictly below 1
    by a monotone ceiling so the stated range [0, 1) holds in floating
    point (see CONF_CAP_K).
    """
    m = ad.maximum(m1, m2)
    m = ad.clamp(m, 0.5, 1.0 - 1e-6)
    r = ad.div(m, ad.sub(1.0, m))
    u = ad.neg(ad.expm1(ad.sub(1.0, r)))  # 1 - exp(1 - r), accurately
    cap = ad.sub(1.0, ad.div(CONF_CAP_K, ad.add(1.0, r)))
    u = ad.minimum(u, cap)
    top = float(np.nextafter(np.array(1, m.dtype), np.array(0, m.dtype)))
    return ad.clamp(u, 0.0, top)


def ure_refine(seg_features: Tensor, m1: Tensor, m2: Tensor,
               store: ParamStore) -> tuple[Tensor, Tensor]:
    """Re-predict segmentation from confidence-weighted features.

    Features are scaled by the confidence map (gradients flow through
    it), passed through a local 3^3 convolution with a residual path,
    and a fresh 2-channel head re-normalizes with channel softmax.
    """
    if seg_features.shape[1:] != m1.shape[1:]:
        raise ValueError(f"feature grid {seg_features.shape} does not match "
                         f"probability grid {m1.shape}")
    u = uncertainty_map(m1, m2)
    weighted = ad.mul(seg_features, u)  # u broadcasts over channels
    refined = _conv_bias(weighted, store, "ure.refine", 3, padding=1)
    refined = ad.add(refined, seg_features)
    logits = _conv_bias(refined, store, "ure.head", 3)
    probs = ad.softmax_channel(logits)
    return ad.slice_channels(probs, 0, 1), ad.slice_channels(probs, 1, 2)


@dataclass
class ForwardResult:
    recon: Tensor  # [1, S, S, S] in (0, 1)
    seg_probs: Tensor | None  # final probabilities (refined when URE is on)
    seg_initial: Tensor | None  # pre-refinement probabilities
    seg_features: Tensor | None


def forward(model: ModelState, projection) -> ForwardResult:
    """Full pass: encode, 2D->3D, both decoders, optional refinement."""
    pyramid = encode(model, projection)
    recon = decode(model, pyramid, "recon")
    if not model.config.enable_seg_branch:
        return ForwardResult(recon, None, None, None)
    seg = decode(model, pyramid, "seg")
    if not model.config.enable_ure:
        return ForwardResult(recon, seg.probs, seg.probs, seg.features)
    m1 = ad.slice_channels(seg.probs, 0, 1)
    m2 = ad.slice_channels(seg.probs, 1, 2)
    f1, f2 = ure_refine(seg.features, m1, m2, model.params)
    final = ad.concat([f1, f2], axis=0)
    return ForwardResult(recon, final, seg.probs, seg.features)
