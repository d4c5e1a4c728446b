"""Network architecture, attention calibrator, confidence map, refinement."""

import math

import numpy as np
import pytest

from svrecon import autodiff as ad
from svrecon import network as net
from svrecon.autodiff import Tensor
from svrecon.network import (FeaturePyramid, ModelState, NetworkConfig,
                             aec_calibrate, bottleneck_2d_to_3d, build, decode,
                             encode, forward, rebuild, uncertainty_map,
                             ure_refine)


def tiny_config(**kw):
    base = dict(input_size=32, output_size=32, base_channels=2)
    base.update(kw)
    return NetworkConfig(**base)


def model64(model):
    return ModelState(model.config, model.params.astype(np.float64))


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------

def test_build_deterministic_and_param_counts_stable():
    a = build(tiny_config(), seed=3)
    b = build(tiny_config(), seed=3)
    assert a.params.names() == b.params.names()
    for name in a.params.names():
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    c = build(tiny_config(), seed=4)
    assert any(a.params[n].data.tobytes() != c.params[n].data.tobytes()
               for n in a.params.names() if "n1" not in n and "gamma" not in n)


def test_ablation_rows_build_and_differ_only_by_submodules():
    rows = [
        dict(enable_seg_branch=False, enable_aec=False, enable_ure=False),
        dict(enable_seg_branch=True, enable_aec=False, enable_ure=False),
        dict(enable_seg_branch=True, enable_aec=True, enable_ure=False),
        dict(enable_seg_branch=True, enable_aec=True, enable_ure=True),
    ]
    models = [build(tiny_config(**r), seed=1) for r in rows]
    names = [set(m.params.names()) for m in models]
    assert {n for n in names[1] - names[0]} == {n for n in names[1] if n.startswith("decoder.seg")}
    assert all(n.startswith("aec.") or ".conv" in n for n in names[2] - names[1])
    assert {n for n in names[3] - names[2]} == {n for n in names[3] if n.startswith("ure.")}
    # parameters shared across rows are bit-identical (per-name seeding)
    for n in names[0] & names[3]:
        if models[0].params[n].data.shape == models[3].params[n].data.shape:
            assert models[0].params[n].data.tobytes() == models[3].params[n].data.tobytes()


def test_build_rejects_invalid_configs():
    with pytest.raises(ValueError, match="divisible"):
        build(NetworkConfig(input_size=48, output_size=48))
    with pytest.raises(ValueError, match="enable_seg_branch"):
        build(tiny_config(enable_seg_branch=False, enable_ure=True))
    with pytest.raises(ValueError, match="output_size"):
        build(NetworkConfig(input_size=32, output_size=64))


def test_checkpoint_rebuild_bit_exact(tmp_path):
    from svrecon.params import load_checkpoint, save_checkpoint
    model = build(tiny_config(), seed=9)
    path = tmp_path / "m.rtsc"
    save_checkpoint(path, model.config.to_json(), model.params)
    cfg_json, values = load_checkpoint(path)
    model2 = rebuild(NetworkConfig.from_json(cfg_json), values)
    assert model2.params.names() == model.params.names()
    for n in model.params.names():
        assert model2.params[n].data.tobytes() == model.params[n].data.tobytes()


# ---------------------------------------------------------------------------
# encode / bottleneck
# ---------------------------------------------------------------------------

def test_encode_shape_ladder_desk_scale():
    model = build(tiny_config(base_channels=8), seed=0)
    pyr = encode(model, np.zeros((1, 32, 32), np.float32))
    shapes = [t.shape for t in pyr.levels]
    assert shapes == [(8, 16, 16), (16, 8, 8), (32, 4, 4), (64, 2, 2), (128, 1, 1)]
    assert pyr.bottleneck.shape == (128, 1, 1)


def test_encode_rejects_wrong_shape():
    model = build(tiny_config(), seed=0)
    with pytest.raises(ValueError, match="expects shape"):
        encode(model, np.zeros((1, 16, 16), np.float32))


def test_encode_distinguishes_projections():
    model = build(tiny_config(), seed=0)
    rng = np.random.default_rng(0)
    a = encode(model, rng.random((1, 32, 32)).astype(np.float32))
    b = encode(model, rng.random((1, 32, 32)).astype(np.float32))
    assert not np.allclose(a.bottleneck.data, b.bottleneck.data)


def test_bottleneck_reshape_semantics():
    x = Tensor(np.arange(64 * 16, dtype=np.float32).reshape(64, 4, 4))
    y = bottleneck_2d_to_3d(x)
    assert y.shape == (16, 4, 4, 4)
    assert y.data.sum() == x.data.sum()
    # gradient of the pure reshape is the inverse permutation
    x2 = Tensor(np.random.default_rng(0).random((64, 4, 4)), requires_grad=True)
    ad.backward(ad.tensor_sum(bottleneck_2d_to_3d(x2)))
    np.testing.assert_array_equal(x2.grad, np.ones((64, 4, 4)))


def test_bottleneck_rejects_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        bottleneck_2d_to_3d(Tensor(np.zeros((10, 4, 4))))


# ---------------------------------------------------------------------------
# AEC
# ---------------------------------------------------------------------------

def test_aec_depth_slices_identical():
    model = build(tiny_config(base_channels=8), seed=2)
    feat = Tensor(np.random.default_rng(1).random((8, 16, 16)).astype(np.float32))
    out = aec_calibrate(feat, model.params, "aec.block4", target_depth=16)
    for d in range(1, 16):
        np.testing.assert_array_equal(out.data[:, d], out.data[:, 0])


def test_aec_gamma_zero_disables_attention():
    model = build(tiny_config(base_channels=8), seed=2)
    store = model.params
    feat = Tensor(np.random.default_rng(2).random((8, 16, 16)).astype(np.float32))
    assert float(store["aec.block4.gamma"].data[0]) == 0.0
    out = aec_calibrate(feat, store, "aec.block4", target_depth=4)
    # compressed feature replicated, attention contributes nothing at init
    y = ad.conv2d(feat, store["aec.block4.compress.weight"], stride=1, padding=1)
    y = ad.instance_norm(y, store["aec.block4.norm.weight"], store["aec.block4.norm.bias"])
    y = ad.leaky_relu(y, net.LEAKY_SLOPE)
    np.testing.assert_allclose(out.data[:, 0], y.data, atol=1e-6)


def test_aec_single_channel_attention_is_identity_times_gate():
    # C3d = 1: the affinity row-softmax is 1, so out = (1 + gamma) * x
    from svrecon.params import ParamStore
    store = ParamStore()
    w = np.zeros((1, 1, 3, 3), np.float32)
    w[0, 0, 1, 1] = 1.0  # delta kernel: compression is the identity
    store.add("a.compress.weight", Tensor(w))
    store.add("a.gamma", Tensor(np.array([0.3], np.float32)))
    x = Tensor(np.random.default_rng(3).random((1, 4, 4)).astype(np.float32))
    out = aec_calibrate(x, store, "a", target_depth=2, aec_norm=False)
    np.testing.assert_allclose(out.data[:, 0], 1.3 * x.data, rtol=1e-6)


# ---------------------------------------------------------------------------
# decode / forward
# ---------------------------------------------------------------------------

def test_decode_output_shapes_and_softmax_sum():
    model = build(tiny_config(base_channels=4), seed=5)
    pyr = encode(model, np.random.default_rng(4).random((1, 32, 32)).astype(np.float32))
    recon = decode(model, pyr, "recon")
    assert recon.shape == (1, 32, 32, 32)
    assert 0.0 < recon.data.min() and recon.data.max() < 1.0
    seg = decode(model, pyr, "seg")
    assert seg.probs.shape == (2, 32, 32, 32)
    np.testing.assert_allclose(seg.probs.data.sum(axis=0), 1.0, atol=1e-6)


def test_decode_disabled_branch_rejected():
    model = build(tiny_config(enable_seg_branch=False, enable_ure=False), seed=0)
    pyr = encode(model, np.zeros((1, 32, 32), np.float32))
    with pytest.raises(ValueError, match="disabled"):
        decode(model, pyr, "seg")


def test_aec_disabled_halves_conv_input_channels():
    on = build(tiny_config(enable_aec=True), seed=0)
    off = build(tiny_config(enable_aec=False), seed=0)
    for i in range(1, 6):
        for branch in ("recon", "seg"):
            w_on = on.params[f"decoder.{branch}.block{i}.conv.weight"].data
            w_off = off.params[f"decoder.{branch}.block{i}.conv.weight"].data
            assert w_off.shape[1] * 2 == w_on.shape[1]


def test_forward_desk_scale_shapes_and_ablation_row1():
    model = build(tiny_config(base_channels=4), seed=6)
    out = forward(model, np.random.default_rng(5).random((1, 32, 32)).astype(np.float32))
    assert out.recon.shape == (1, 32, 32, 32)
    assert out.seg_probs.shape == (2, 32, 32, 32)
    baseline = build(tiny_config(base_channels=4, enable_seg_branch=False,
                                 enable_aec=False, enable_ure=False), seed=6)
    out0 = forward(baseline, np.zeros((1, 32, 32), np.float32))
    assert out0.recon.shape == (1, 32, 32, 32)
    assert out0.seg_probs is None


def test_forward_deterministic():
    model = build(tiny_config(base_channels=4), seed=7)
    x = np.random.default_rng(6).random((1, 32, 32)).astype(np.float32)
    a = forward(model, x)
    b = forward(model, x)
    assert a.recon.data.tobytes() == b.recon.data.tobytes()
    assert a.seg_probs.data.tobytes() == b.seg_probs.data.tobytes()


# ---------------------------------------------------------------------------
# confidence map
# ---------------------------------------------------------------------------

def test_uncertainty_reference_values():
    m1 = Tensor(np.array([0.5, 0.8, 0.9], np.float64))
    m2 = Tensor(1.0 - m1.data)
    u = uncertainty_map(m1, m2).data
    assert u[0] == 0.0
    assert abs(u[1] - (1.0 - math.exp(-3.0))) < 1e-9
    assert abs(u[2] - (1.0 - math.exp(-8.0))) < 1e-9
    assert u[2] > u[1] > u[0]


def test_uncertainty_range_and_strict_monotonicity():
    m = np.linspace(0.5, 1.0 - 1e-6, 1000)
    u = uncertainty_map(Tensor(m), Tensor(1.0 - m)).data
    assert u.min() >= 0.0 and u.max() < 1.0
    assert np.all(np.diff(u) > 0)


def test_uncertainty_symmetric_in_channels():
    rng = np.random.default_rng(7)
    m1 = rng.uniform(0.01, 0.99, (1, 4, 4, 4))
    a = uncertainty_map(Tensor(m1), Tensor(1 - m1)).data
    b = uncertainty_map(Tensor(1 - m1), Tensor(m1)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_uncertainty_gradient_flows():
    m1 = Tensor(np.array([0.7, 0.85]), requires_grad=True)
    m2 = ad.sub(1.0, m1)
    u = uncertainty_map(m1, m2)
    ad.backward(ad.tensor_sum(u))
    assert m1.grad is not None and np.all(np.isfinite(m1.grad))
    assert np.all(m1.grad > 0)  # confidence rises with the max channel


# ---------------------------------------------------------------------------
# URE
# ---------------------------------------------------------------------------

def test_ure_channel_sum_and_zero_head_degenerate():
    model = build(tiny_config(base_channels=4), seed=8)
    store = model.params
    rng = np.random.default_rng(8)
    feats = Tensor(rng.random((1, 8, 8, 8)).astype(np.float32))
    logits = rng.random((2, 8, 8, 8)).astype(np.float32)
    probs = ad.softmax_channel(Tensor(logits))
    m1, m2 = ad.slice_channels(probs, 0, 1), ad.slice_channels(probs, 1, 2)
    # shapes differ from the configured net; build a matching refine head
    from svrecon.params import ParamStore
    small = ParamStore()
    small.add("ure.refine.weight", Tensor(rng.standard_normal((1, 1, 3, 3, 3)).astype(np.float32) * 0.1))
    small.add("ure.refine.bias", Tensor(np.zeros(1, np.float32)))
    small.add("ure.head.weight", Tensor(rng.standard_normal((2, 1, 1, 1, 1)).astype(np.float32)))
    small.add("ure.head.bias", Tensor(np.zeros(2, np.float32)))
    f1, f2 = ure_refine(feats, m1, m2, small)
    np.testing.assert_allclose(f1.data + f2.data, 1.0, atol=1e-6)
    # zeroed head and conv: constant logits -> (0.5, 0.5) everywhere
    small["ure.refine.weight"].data[:] = 0
    small["ure.head.weight"].data[:] = 0
    small["ure.head.bias"].data[:] = 0
    g1, g2 = ure_refine(feats, m1, m2, small)
    np.testing.assert_allclose(g1.data, 0.5, atol=1e-7)
    np.testing.assert_allclose(g2.data, 0.5, atol=1e-7)


def test_ure_rejects_shape_mismatch():
    model = build(tiny_config(base_channels=4), seed=8)
    feats = Tensor(np.zeros((1, 8, 8, 8), np.float32))
    m = Tensor(np.full((1, 4, 4, 4), 0.5, np.float32))
    with pytest.raises(ValueError, match="does not match"):
        ure_refine(feats, m, m, model.params)


# ---------------------------------------------------------------------------
# gradient checks through the stacks (float64 replay)
# ---------------------------------------------------------------------------

def model_grad_check(make_loss, model, coords_per_tensor=2, names=None, rel=1e-3):
    m64 = model64(model)
    loss = make_loss(m64)
    ad.backward(loss)
    rng = np.random.default_rng(0)
    checked = 0
    for name in (names or m64.params.names()):
        p = m64.params[name]
        assert p.grad is not None, name
        flat = p.data.reshape(-1)
        for _ in range(coords_per_tensor):
            idx = int(rng.integers(flat.size))
            orig = flat[idx]
            h = 1e-5 * max(1.0, abs(orig))
            flat[idx] = orig + h
            fp = float(make_loss(m64).data)
            flat[idx] = orig - h
            fm = float(make_loss(m64).data)
            flat[idx] = orig
            want = (fp - fm) / (2 * h)
            got = p.grad.reshape(-1)[idx]
            denom = max(abs(want), 1e-4)
            assert abs(got - want) / denom < rel, \
                f"{name}[{idx}]: got {got:.6e}, want {want:.6e}"
            checked += 1
    assert checked > 0


def test_grad_check_through_encode():
    model = build(tiny_config(base_channels=2), seed=10)
    x = np.random.default_rng(9).random((1, 32, 32))

    def loss(m):
        pyr = encode(m, Tensor(x))
        return ad.mean(ad.mul(pyr.bottleneck, pyr.bottleneck))

    model_grad_check(loss, model,
                     names=["encoder.block1.conv1.weight", "encoder.block3.n2.weight",
                            "encoder.block5.skip.weight", "encoder.block2.n1.bias"])


def test_grad_check_through_full_forward():
    model = build(tiny_config(base_channels=2), seed=11)
    x = np.random.default_rng(10).random((1, 32, 32))

    def loss(m):
        out = forward(m, Tensor(x))
        return ad.add(ad.mean(ad.mul(out.recon, out.recon)),
                      ad.mean(ad.mul(out.seg_probs, out.seg_probs)))

    model_grad_check(loss, model, coords_per_tensor=1,
                     names=["decoder.recon.block5.conv.weight",
                            "decoder.seg.block1.up.weight",
                            "aec.block4.compress.weight", "aec.block2.gamma",
                            "ure.refine.weight", "ure.head.weight",
                            "encoder.block1.conv1.weight",
                            "decoder.seg.head.bias"])
