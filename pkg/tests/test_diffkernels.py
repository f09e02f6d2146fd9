import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tadkit import diffkernels as dk
from tadkit.core import ConfigError

from gradsuite import op_cases


def T(a):
    return dk.Tensor(np.asarray(a, dtype=np.float64))


def conv_loop(x, w, b, stride, pad):
    """Direct cross-correlation of (B, C, T) by (O, C, k)."""
    bsz, c, t = x.shape
    o, _, k = w.shape
    xp = np.zeros((bsz, c, t + 2 * pad))
    xp[:, :, pad:pad + t] = x
    n = (t + 2 * pad - k) // stride + 1
    out = np.zeros((bsz, o, n))
    for bi in range(bsz):
        for oi in range(o):
            for i in range(n):
                acc = 0.0 if b is None else b[oi]
                for ci in range(c):
                    for j in range(k):
                        acc += w[oi, ci, j] * xp[bi, ci, i * stride + j]
                out[bi, oi, i] = acc
    return out


def test_conv_hand_example():
    out = dk.conv_temporal(T([[[1, 2, 3, 4]]]), T([[[1, 1, 1]]]), None, 2, 1)
    np.testing.assert_array_equal(out.data, [[[3, 9]]])


def test_conv_identity_kernel():
    x = np.random.default_rng(1).standard_normal((2, 3, 7))
    out = dk.conv_temporal(T(x), T(np.eye(3)[:, :, None]), None, 1, 0)
    np.testing.assert_array_equal(out.data, x)


@given(st.integers(1, 9), st.sampled_from([1, 3, 5]), st.integers(1, 3), st.integers(0, 2), st.integers(0, 99))
@settings(max_examples=40, deadline=None)
def test_conv_matches_loop_and_length_formula(t, k, stride, pad, seed):
    if t + 2 * pad < k:
        return
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((2, 2, t)), rng.standard_normal((3, 2, k)), rng.standard_normal(3)
    out = dk.conv_temporal(T(x), T(w), T(b), stride, pad).data
    assert out.shape[2] == dk.conv_out_len(t, k, stride, pad) == (t + 2 * pad - k) // stride + 1
    np.testing.assert_allclose(out, conv_loop(x, w, b, stride, pad), atol=1e-12)


def test_conv_appendix_shape():
    x = dk.Tensor(np.zeros((1, 2048, 96), dtype=np.float32))
    w = dk.Tensor(np.zeros((512, 2048, 3), dtype=np.float32))
    assert dk.conv_temporal(x, w, None, 2, 1).shape == (1, 512, 48)


def test_conv_shape_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        dk.conv_temporal(T(np.zeros((1, 3, 5))), T(np.zeros((2, 4, 3))), None, 1, 1)


def test_conv_3d_matches_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 5, 3, 3))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    out = dk.conv_temporal(T(x), T(w), None, 1, 1).data
    xp = np.pad(x, [(0, 0), (0, 0), (1, 1), (1, 1), (1, 1)])
    ref = np.zeros((1, 2, 5, 3, 3))
    for o in range(2):
        for t in range(5):
            for h in range(3):
                for v in range(3):
                    ref[0, o, t, h, v] = np.sum(w[o] * xp[0, :, t:t + 3, h:h + 3, v:v + 3])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_maxpool_examples():
    out = dk.maxpool_temporal(T([[[1, 3, 2, 5]]]), 3, 2, 1)
    np.testing.assert_array_equal(out.data, [[[3, 5]]])
    const = dk.maxpool_temporal(T(np.full((1, 2, 8), 4.0)), 3, 2, 1)
    np.testing.assert_array_equal(const.data, np.full((1, 2, 4), 4.0))
    big = dk.maxpool_temporal(dk.Tensor(np.zeros((1, 2048, 96), np.float32)), 3, 2, 1)
    assert big.shape == (1, 2048, 48)


def test_maxpool_tie_routes_to_first():
    x = dk.Param(np.array([[[2.0, 2.0, 1.0]]]))
    out = dk.maxpool_temporal(x, 3, 1, 0)
    out.backward(np.ones_like(out.data))
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0, 0.0]]])


@given(st.integers(1, 12), st.integers(0, 99))
@settings(max_examples=30, deadline=None)
def test_maxpool_matches_loop(t, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, t))
    out = dk.maxpool_temporal(T(x), 3, 2, 1).data
    xp = np.pad(x, [(0, 0), (0, 0), (1, 1)], constant_values=-np.inf)
    ref = np.array([[[xp[0, c, i * 2:i * 2 + 3].max() for i in range(out.shape[2])] for c in range(2)]])
    np.testing.assert_array_equal(out, ref)


def test_spatial_avg_pool_examples():
    x = np.arange(4.0).reshape(1, 1, 1, 2, 2) + 1
    assert dk.spatial_avg_pool(T(x)).data[0, 0, 0] == 2.5
    y = np.random.default_rng(0).standard_normal((1, 3, 4, 1, 1))
    np.testing.assert_array_equal(dk.spatial_avg_pool(T(y)).data, y[..., 0, 0])
    z = np.full((1, 2, 3, 2, 2), 7.0)
    np.testing.assert_array_equal(dk.spatial_avg_pool(T(z)).data, np.full((1, 2, 3), 7.0))


def test_upsample_examples():
    np.testing.assert_allclose(dk.upsample_temporal_x2(T([[[0, 2]]])).data, [[[0, 0.5, 1.5, 2]]])
    assert dk.upsample_temporal_x2(T(np.zeros((1, 1, 6)))).shape == (1, 1, 12)
    np.testing.assert_array_equal(dk.upsample_temporal_x2(T(np.full((1, 2, 5), 3.0))).data,
                                  np.full((1, 2, 10), 3.0))


@given(st.integers(1, 10), st.integers(0, 99))
@settings(max_examples=30, deadline=None)
def test_upsample_matches_coordinate_map(t, seed):
    x = np.random.default_rng(seed).standard_normal(t)
    out = dk.upsample_temporal_x2(T(x[None, None])).data[0, 0]
    coords = np.clip((np.arange(2 * t) + 0.5) / 2 - 0.5, 0, t - 1)
    np.testing.assert_allclose(out, np.interp(coords, np.arange(t), x), atol=1e-12)


def test_elementwise_examples():
    np.testing.assert_array_equal(dk.relu(T([-1.0, 2.0])).data, [0.0, 2.0])
    assert dk.sigmoid(T([0.0])).data[0] == 0.5
    x, y = dk.Param(np.ones(3)), dk.Param(np.ones(3))
    g = np.array([1.0, -2.0, 3.0])
    dk.add(x, y).backward(g)
    np.testing.assert_array_equal(x.grad, g)
    np.testing.assert_array_equal(y.grad, g)


def test_sigmoid_is_stable_for_large_inputs():
    with np.errstate(over="raise"):
        out = dk.sigmoid(T([-1000.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_grad_check_exact_for_linear():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(300)
    w = dk.Param(rng.standard_normal(300))
    f = lambda: dk.scalar_from([w], float(w.data @ x), [x])
    assert dk.grad_check(f, [w]) < 1e-10
    assert dk.grad_check.last_checked == 200


def test_grad_check_detects_wrong_gradient():
    w = dk.Param(np.ones(5))
    f = lambda: dk.scalar_from([w], float(np.sum(w.data ** 2)), [np.ones(5)])  # true grad is 2w
    assert dk.grad_check(f, [w]) == pytest.approx(0.5)  # |1 - 2| / 2


@pytest.mark.parametrize("case", op_cases(), ids=lambda c: c[0])
def test_op_gradients(case):
    name, f, params = case
    assert dk.grad_check(f, params, n_coords=200) < 1e-4
    assert dk.grad_check.last_checked >= 200


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((2, 8, 20)), rng.standard_normal((8, 8, 3))
    a = dk.conv_temporal(T(x), T(w), None, 2, 1).data
    b = dk.conv_temporal(T(x), T(w), None, 2, 1).data
    assert a.tobytes() == b.tobytes()


def test_param_grad_shape_matches_value():
    p = dk.Param(np.ones((3, 4)))
    assert p.grad_or_zeros().shape == p.value.shape
    dk.scale(p, 2.0).backward(np.ones((3, 4)))
    assert p.grad.shape == p.value.shape
    np.testing.assert_array_equal(p.grad, 2.0)
