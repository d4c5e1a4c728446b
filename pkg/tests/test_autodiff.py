"""Tensor-core operator tests against independent brute-force oracles."""

import math

import numpy as np
import pytest

from svrecon import autodiff as ad
from svrecon.autodiff import Tensor
from svrecon.params import (ParamStore, deserialize_checkpoint,
                            serialize_checkpoint)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def conv2d_loops(x, w, stride, padding):
    """Direct quadruple-loop cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    y = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(cin):
            for a in range(ho):
                for b in range(wo):
                    acc = 0.0
                    for p in range(k):
                        for q in range(k):
                            acc += w[o, i, p, q] * xp[i, a * stride + p, b * stride + q]
                    y[o, a, b] += acc
    return y


def conv3d_loops(x, w, stride, padding):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3)
    do = (d + 2 * padding - k) // stride + 1
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    y = np.zeros((cout, do, ho, wo))
    for o in range(cout):
        for i in range(cin):
            for a in range(do):
                for b in range(ho):
                    for c in range(wo):
                        acc = 0.0
                        for p in range(k):
                            for q in range(k):
                                for r in range(k):
                                    acc += w[o, i, p, q, r] * xp[
                                        i, a * stride + p, b * stride + q, c * stride + r]
                        y[o, a, b, c] += acc
    return y


def matmul_loops(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    _, n = b.shape
    y = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                y[i, j] += a[i, t] * b[t, j]
    return y


def finite_diff_grad(f, x, h=1e-6):
    """Central finite differences of scalar f at float64 array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def check_grad(op, shapes, rel=1e-4, seed=0, **kwargs):
    """Compare backward() against finite differences for each input slot."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    for slot in range(len(arrays)):
        tensors = [Tensor(a.copy(), requires_grad=(i == slot)) for i, a in enumerate(arrays)]
        out = op(*tensors, **kwargs)
        loss = ad.tensor_sum(ad.mul(out, out))
        ad.backward(loss)
        got = tensors[slot].grad

        def scalar(x, slot=slot):
            ts = [Tensor(x if i == slot else a) for i, a in enumerate(arrays)]
            o = op(*ts, **kwargs)
            return float(ad.tensor_sum(ad.mul(o, o)).data)

        want = finite_diff_grad(scalar, arrays[slot])
        denom = np.maximum(np.abs(want), 1e-3)
        err = np.abs(got - want) / denom
        assert err.max() < rel, f"slot {slot}: max rel err {err.max():.2e}"


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_all_ones():
    x = Tensor(np.ones((1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    y = ad.conv2d(x, w, stride=1, padding=0)
    assert y.shape == (1, 1, 1)
    assert y.data[0, 0, 0] == 9.0


def test_conv2d_delta_kernel_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 7, 7)).astype(np.float32)
    k = 3
    w = np.zeros((2, 2, k, k), dtype=np.float32)
    for c in range(2):
        w[c, c, k // 2, k // 2] = 1.0
    y = ad.conv2d(Tensor(x), Tensor(w), stride=1, padding=k // 2)
    np.testing.assert_array_equal(y.data, x)


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 5, 5))
    w = rng.standard_normal((2, 1, 3, 3))
    y = ad.conv2d(Tensor(x), Tensor(w), stride=1, padding=0)
    want = conv2d_loops(x, w, 1, 0)
    np.testing.assert_allclose(y.data, want, rtol=1e-6)


def test_conv2d_strided_padded_matches_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 9, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    y = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1)
    want = conv2d_loops(x, w, 2, 1)
    np.testing.assert_allclose(y.data, want, rtol=1e-6)


def test_conv2d_channel_mismatch_names_shapes():
    x = Tensor(np.ones((2, 4, 4)))
    w = Tensor(np.ones((1, 3, 3, 3)))
    with pytest.raises(ValueError, match=r"\(2, 4, 4\).*\(1, 3, 3, 3\)"):
        ad.conv2d(x, w)


# ---------------------------------------------------------------------------
# conv3d / conv_transpose3d
# ---------------------------------------------------------------------------

def test_conv3d_all_ones():
    x = Tensor(np.ones((1, 3, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3, 3)))
    y = ad.conv3d(x, w)
    assert y.data.reshape(-1)[0] == 27.0


def test_conv3d_delta_kernel_identity():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 5, 4, 6)).astype(np.float32)
    w = np.zeros((2, 2, 3, 3, 3), dtype=np.float32)
    for c in range(2):
        w[c, c, 1, 1, 1] = 1.0
    y = ad.conv3d(Tensor(x), Tensor(w), stride=1, padding=1)
    np.testing.assert_array_equal(y.data, x)


def test_conv3d_matches_loop_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 5, 5, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    y = ad.conv3d(Tensor(x), Tensor(w), stride=2, padding=1)
    want = conv3d_loops(x, w, 2, 1)
    np.testing.assert_allclose(y.data, want, rtol=1e-6)


def test_conv_transpose3d_doubles_extent():
    x = Tensor(np.random.default_rng(6).standard_normal((1, 2, 2, 2)))
    w = Tensor(np.random.default_rng(7).standard_normal((1, 3, 4, 4, 4)))
    y = ad.conv_transpose3d(x, w, stride=2, padding=1)
    assert y.shape == (3, 4, 4, 4)


def test_conv_transpose3d_is_adjoint_of_conv3d():
    rng = np.random.default_rng(8)
    for stride, padding in [(1, 0), (2, 1), (2, 0)]:
        x = rng.standard_normal((2, 6, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        cx = ad.conv3d(Tensor(x), Tensor(w), stride=stride, padding=padding)
        y = rng.standard_normal(cx.shape)
        # conv_transpose kernel layout is [C_in, C_out, ...] = w as stored
        ty = ad.conv_transpose3d(
            Tensor(y), Tensor(w), stride=stride, padding=padding,
            output_padding=(x.shape[1] - ((cx.shape[1] - 1) * stride + 3 - 2 * padding)))
        lhs = float((cx.data * y).sum())
        rhs = float((x * ty.data).sum())
        assert abs(lhs - rhs) / max(abs(lhs), 1e-12) < 1e-5


def test_conv_transpose3d_zero_input():
    x = Tensor(np.zeros((2, 3, 3, 3)))
    w = Tensor(np.random.default_rng(9).standard_normal((2, 1, 4, 4, 4)))
    y = ad.conv_transpose3d(x, w, stride=2, padding=1)
    assert not y.data.any()


def test_conv_transpose3d_rejects_bad_output_padding():
    x = Tensor(np.zeros((1, 2, 2, 2)))
    w = Tensor(np.zeros((1, 1, 4, 4, 4)))
    with pytest.raises(ValueError, match="output_padding"):
        ad.conv_transpose3d(x, w, stride=2, padding=1, output_padding=2)


# ---------------------------------------------------------------------------
# instance_norm / softmax / matmul
# ---------------------------------------------------------------------------

def test_instance_norm_two_point_channel():
    x = Tensor(np.array([[1.0, 3.0]]))
    y = ad.instance_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=0.0)
    np.testing.assert_allclose(y.data, [[-1.0, 1.0]], atol=1e-12)


def test_instance_norm_constant_channel_zeros():
    x = Tensor(np.full((2, 4, 4), 3.7))
    y = ad.instance_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5)
    np.testing.assert_allclose(y.data, 0.0, atol=1e-6)


def test_instance_norm_moments():
    rng = np.random.default_rng(10)
    x = Tensor(rng.standard_normal((3, 11, 13)) * 2.5 + 1.0)
    y = ad.instance_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-5)
    for c in range(3):
        assert abs(y.data[c].mean()) < 1e-6
        assert abs(y.data[c].var() - 1.0) < 1e-3


def test_softmax_symmetry_and_shift_invariance():
    y = ad.softmax_channel(Tensor(np.zeros((2, 1))))
    np.testing.assert_allclose(y.data, 0.5)
    rng = np.random.default_rng(11)
    x = rng.standard_normal((4, 5, 5))
    a = ad.softmax_channel(Tensor(x))
    b = ad.softmax_channel(Tensor(x + 7.3))
    np.testing.assert_allclose(a.data, b.data, rtol=1e-6)


def test_softmax_scalar_oracle():
    # logits (2, -1): tumor channel weight e^2 / (e^2 + e^-1)
    y = ad.softmax_channel(Tensor(np.array([[2.0], [-1.0]])))
    want = math.exp(2.0) / (math.exp(2.0) + math.exp(-1.0))
    np.testing.assert_allclose(y.data[0, 0], want, rtol=1e-12)


def test_softmax_sums_to_one_everywhere():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 6, 6, 6)).astype(np.float32) * 30
    y = ad.softmax_channel(Tensor(x))
    np.testing.assert_allclose(y.data.sum(axis=0), 1.0, atol=1e-6)


def test_matmul_identity_and_hand_case():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    eye = np.eye(2)
    np.testing.assert_array_equal(ad.matmul(Tensor(a), Tensor(eye)).data, a)
    np.testing.assert_array_equal(ad.matmul(Tensor(eye), Tensor(a)).data, a)


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(13)
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 3))
    y = ad.matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(y.data, matmul_loops(a, b), rtol=1e-6)


def test_matmul_rejects_dim_mismatch():
    with pytest.raises(ValueError, match="inner dims"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(ad.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_power_rule():
    x = Tensor(np.array(3.0), requires_grad=True)
    ad.backward(ad.tensor_sum(ad.mul(x, x)))
    np.testing.assert_allclose(x.grad, 6.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.mul(x, x))


def test_gradients_accumulate_until_zeroed():
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = ad.tensor_sum(ad.mul(x, x))
    ad.backward(loss)
    first = x.grad.copy()
    ad.backward(ad.tensor_sum(ad.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * first)
    x.zero_grad()
    assert x.grad is None


def test_no_grad_suppresses_tape():
    x = Tensor(np.ones(4), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad and y._grad_fn is None


# finite-difference gradient checks, one per operator
def test_grad_conv2d():
    check_grad(ad.conv2d, [(2, 5, 5), (3, 2, 3, 3)], stride=1, padding=1)
    check_grad(ad.conv2d, [(2, 6, 6), (3, 2, 3, 3)], stride=2, padding=1, seed=1)


def test_grad_conv3d():
    check_grad(ad.conv3d, [(2, 4, 4, 4), (2, 2, 3, 3, 3)], stride=1, padding=1)
    check_grad(ad.conv3d, [(1, 5, 5, 5), (2, 1, 3, 3, 3)], stride=2, padding=1, seed=1)


def test_grad_conv_transpose3d():
    check_grad(ad.conv_transpose3d, [(2, 3, 3, 3), (2, 2, 4, 4, 4)],
               stride=2, padding=1)


def test_grad_instance_norm():
    check_grad(ad.instance_norm, [(2, 4, 4), (2,), (2,)], eps=1e-5)


def test_grad_softmax_channel():
    check_grad(ad.softmax_channel, [(3, 4, 4)])


def test_grad_matmul():
    check_grad(ad.matmul, [(3, 4), (4, 2)])


def test_grad_elementwise_ops():
    check_grad(lambda a, b: ad.add(a, b), [(3, 4), (3, 4)])
    check_grad(lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)])
    check_grad(lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)])
    check_grad(lambda a: ad.exp(a), [(3, 4)])
    check_grad(lambda a: ad.sigmoid(a), [(3, 4)])
    check_grad(lambda a: ad.leaky_relu(a, 0.2), [(3, 4)], seed=3)
    check_grad(lambda a: ad.repeat_depth(a, 3), [(2, 3, 3)])
    check_grad(lambda a: ad.transpose2d(a), [(3, 4)])
    check_grad(lambda a, b: ad.concat([a, b], axis=0), [(2, 3, 3), (1, 3, 3)])
    check_grad(lambda a: ad.slice_channels(a, 1, 3), [(4, 2, 2)])


def test_grad_div_and_log_positive_domain():
    rng = np.random.default_rng(14)
    a = rng.uniform(0.5, 2.0, (3, 3))
    b = rng.uniform(0.5, 2.0, (3, 3))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    loss = ad.tensor_sum(ad.log(ad.div(ta, tb)))
    ad.backward(loss)
    np.testing.assert_allclose(ta.grad, 1.0 / a, rtol=1e-10)
    np.testing.assert_allclose(tb.grad, -1.0 / b, rtol=1e-10)


def test_grad_composition_of_operators():
    # conv2d -> instance_norm -> leaky_relu -> softmax, checked end to end
    rng = np.random.default_rng(15)
    x0 = rng.standard_normal((2, 6, 6))

    def run(x_arr):
        x = x_arr if isinstance(x_arr, Tensor) else Tensor(x_arr)
        w = Tensor(w0)
        y = ad.conv2d(x, w, stride=1, padding=1)
        y = ad.instance_norm(y, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-5)
        y = ad.leaky_relu(y, 0.2)
        y = ad.softmax_channel(y)
        return ad.tensor_sum(ad.mul(y, y))

    w0 = rng.standard_normal((3, 2, 3, 3))
    x = Tensor(x0.copy(), requires_grad=True)
    ad.backward(run(x))
    want = finite_diff_grad(lambda a: float(run(a).data), x0)
    denom = np.maximum(np.abs(want), 1e-3)
    assert (np.abs(x.grad - want) / denom).max() < 1e-4


def test_all_ops_deterministic():
    rng = np.random.default_rng(16)
    x = rng.standard_normal((2, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    a = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    b = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# ParamStore
# ---------------------------------------------------------------------------

def test_param_store_order_and_uniqueness():
    store = ParamStore()
    store.add("b.w", Tensor(np.ones(2)))
    store.add("a.w", Tensor(np.ones(3)))
    assert store.names() == ["b.w", "a.w"]
    with pytest.raises(ValueError, match="duplicate"):
        store.add("a.w", Tensor(np.ones(1)))


def test_checkpoint_round_trip_bit_exact():
    rng = np.random.default_rng(17)
    store = ParamStore()
    store.add("enc.w", Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32)))
    store.add("enc.b", Tensor(rng.standard_normal(3).astype(np.float32)))
    blob = serialize_checkpoint('{"k": 1}', store)
    cfg, values = deserialize_checkpoint(blob)
    assert cfg == '{"k": 1}'
    assert list(values) == ["enc.w", "enc.b"]
    for name, arr in values.items():
        assert arr.tobytes() == store[name].data.tobytes()


def test_checkpoint_rejects_corruption():
    store = ParamStore()
    store.add("w", Tensor(np.ones(4, dtype=np.float32)))
    blob = bytearray(serialize_checkpoint("{}", store))
    blob[20] ^= 0xFF
    with pytest.raises(ValueError, match="CRC"):
        deserialize_checkpoint(bytes(blob))
