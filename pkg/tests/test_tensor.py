import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hdlsr.tensor import (
    ActivationKind,
    BatchNormState,
    ConvKernel,
    activate,
    activate_backward,
    add,
    area_downsample,
    as_tensor,
    batchnorm,
    batchnorm_backward,
    bilinear_resize,
    concat_channels,
    conv2d,
    conv2d_backward,
    grad_check,
    split_channels,
)

from .oracles import bilinear_1d, block_mean_loops, conv2d_loops

seeds = st.integers(0, 2**32 - 1)


# -- construction ---------------------------------------------------------


def test_as_tensor_rejects_bad_input():
    with pytest.raises(ValueError):
        as_tensor(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        as_tensor(np.zeros((1, 0, 2, 2)))
    with pytest.raises(ValueError):
        as_tensor(np.full((1, 2, 2, 1), np.nan))


def test_conv_kernel_validates_shape():
    with pytest.raises(ValueError):
        ConvKernel(np.zeros((5, 5, 1, 1)), np.zeros(1))
    with pytest.raises(ValueError):
        ConvKernel(np.zeros((3, 3, 1, 2)), np.zeros(3))
    k = ConvKernel(np.zeros((3, 3, 4, 2)), np.zeros(2))
    assert (k.cin, k.cout) == (4, 2)


def test_batchnorm_state_validates():
    with pytest.raises(ValueError):
        BatchNormState(np.ones(2), np.zeros(2), np.zeros(2), -np.ones(2))
    with pytest.raises(ValueError):
        BatchNormState(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), eps=0.0)


# -- conv2d ---------------------------------------------------------------


def test_conv1x1_scalar_affine():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    y = conv2d(x, ConvKernel(np.full((1, 1, 1, 1), 2.0), np.array([1.0])))
    np.testing.assert_array_equal(y[0, :, :, 0], [[3, 5], [7, 9]])


def test_conv3x3_zero_padding_counts():
    y = conv2d(np.ones((1, 3, 3, 1)), ConvKernel(np.ones((3, 3, 1, 1)), np.zeros(1)))
    np.testing.assert_array_equal(y[0, :, :, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


@pytest.mark.parametrize("k,pad", [(3, "same"), (1, "same"), (3, "none")])
def test_conv_matches_loop_oracle(rng, k, pad):
    x = rng.standard_normal((2, 5, 5, 3))
    w = rng.standard_normal((k, k, 3, 4))
    b = rng.standard_normal(4)
    y = conv2d(x, ConvKernel(w, b), pad)
    np.testing.assert_allclose(y, conv2d_loops(x, w, b, pad), rtol=1e-5, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 3, 3, 2)), ConvKernel(np.zeros((3, 3, 3, 1)), np.zeros(1)))


def test_conv_preserves_float32(rng):
    x = rng.standard_normal((1, 4, 4, 2)).astype(np.float32)
    k = ConvKernel(rng.standard_normal((3, 3, 2, 2)).astype(np.float32), np.zeros(2, np.float32))
    assert conv2d(x, k).dtype == np.float32


@given(seeds, st.sampled_from([1, 3]), st.sampled_from(["same", "none"]))
def test_conv_backward_is_adjoint(seed, k, pad):
    # <conv(x) - b, dy> == <x, dx(dy)> and the weight gradient is the matching bilinear form
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 5, 4, 3))
    w = r.standard_normal((k, k, 3, 2))
    kern = ConvKernel(w, np.zeros(2))
    y = conv2d(x, kern, pad)
    dy = r.standard_normal(y.shape)
    dx, dw, db = conv2d_backward(dy, x, kern, pad)
    assert np.isclose(np.sum(y * dy), np.sum(x * dx), rtol=1e-10)
    assert np.isclose(np.sum(y * dy), np.sum(w * dw), rtol=1e-10)
    np.testing.assert_allclose(db, dy.sum(axis=(0, 1, 2)))


@given(seeds, st.integers(1, 3), st.integers(1, 3))
def test_conv_translation_equivariance(seed, di, dj):
    # circular shift commutes with the conv away from the zero-padded border
    r = np.random.default_rng(seed)
    x = np.zeros((1, 12, 12, 2))
    x[:, 3:7, 3:7] = r.standard_normal((1, 4, 4, 2))
    kern = ConvKernel(r.standard_normal((3, 3, 2, 3)), np.zeros(3))
    a = np.roll(conv2d(x, kern), (di, dj), axis=(1, 2))
    b = conv2d(np.roll(x, (di, dj), axis=(1, 2)), kern)
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- activation, concat, add ----------------------------------------------


def test_relu_values_and_idempotence():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 3, 1)
    y = activate(x)
    np.testing.assert_array_equal(y.ravel(), [0, 0, 2])
    np.testing.assert_array_equal(activate(y), y)
    np.testing.assert_array_equal(activate(x, ActivationKind.IDENTITY), x)


def test_relu_backward_subgradient():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 3, 1)
    dy = np.array([1.0, 5.0, 3.0]).reshape(x.shape)
    np.testing.assert_array_equal(activate_backward(dy, x).ravel(), [0, 0, 3])
    np.testing.assert_array_equal(activate_backward(dy, x, ActivationKind.IDENTITY), dy)


def test_concat_split_roundtrip(rng):
    a = rng.standard_normal((2, 3, 3, 2))
    b = rng.standard_normal((2, 3, 3, 3))
    y = concat_channels(a, b)
    assert y.shape == (2, 3, 3, 5)
    np.testing.assert_array_equal(y[..., :2], a)
    da, db = split_channels(y, 2)
    np.testing.assert_array_equal(da, a)
    np.testing.assert_array_equal(db, b)
    with pytest.raises(ValueError):
        concat_channels(a, np.zeros((2, 4, 3, 1)))


def test_add_identities(rng):
    a = rng.standard_normal((1, 3, 4, 2))
    b = rng.standard_normal((1, 3, 4, 2))
    np.testing.assert_array_equal(add(a, np.zeros_like(a)), a)
    np.testing.assert_array_equal(add(a, -a), np.zeros_like(a))
    ref = np.empty_like(a)
    for idx in np.ndindex(a.shape):
        ref[idx] = a[idx] + b[idx]
    np.testing.assert_array_equal(add(a, b), ref)
    with pytest.raises(ValueError):
        add(a, b[..., :1])


# -- batch norm -----------------------------------------------------------


def test_batchnorm_constant_channel_gives_beta():
    s = BatchNormState(np.array([2.0, 0.5]), np.array([0.3, -0.7]), np.zeros(2), np.ones(2))
    x = np.broadcast_to(np.array([4.0, -1.0]), (2, 3, 3, 2)).copy()
    y, _, _ = batchnorm(x, s, "train")
    np.testing.assert_allclose(y[..., 0], 0.3)
    np.testing.assert_allclose(y[..., 1], -0.7)


def test_batchnorm_pm_one():
    s = BatchNormState.identity(1, np.float64)
    x = np.array([-1.0, 1.0]).reshape(1, 1, 2, 1)
    y, new, _ = batchnorm(x, s, "train")
    np.testing.assert_allclose(y.ravel(), [-1 / np.sqrt(1 + 1e-5), 1 / np.sqrt(1 + 1e-5)], rtol=1e-12)
    np.testing.assert_allclose(y.ravel(), [-0.999995, 0.999995], atol=1e-7)
    # running stats move by the momentum towards the batch stats (mean 0, var 1)
    np.testing.assert_allclose(new.running_mean, [0.0])
    np.testing.assert_allclose(new.running_var, [1.0])


@given(seeds)
def test_batchnorm_train_output_statistics(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 4, 4, 3)) * 3 + 1
    s = BatchNormState.identity(3, np.float64)
    y, _, _ = batchnorm(x, s, "train")
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0, atol=1e-12)
    var = x.var(axis=(0, 1, 2))
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), var / (var + 1e-5), rtol=1e-10)


def test_batchnorm_infer_uses_running_stats():
    s = BatchNormState(np.array([2.0]), np.array([1.0]), np.array([0.5]), np.array([4.0]))
    x = np.full((1, 2, 2, 1), 2.5)
    y, same, cache = batchnorm(x, s, "infer")
    assert cache is None and same is s
    np.testing.assert_allclose(y, 2.0 * (2.5 - 0.5) / np.sqrt(4.0 + 1e-5) + 1.0)


def test_batchnorm_backward_finite_differences(rng):
    x = rng.standard_normal((2, 3, 3, 2)) * 2
    proj = rng.standard_normal(x.shape)
    gamma, beta = np.array([0.7, 1.3]), np.array([0.1, -0.2])

    def f(t):
        s = BatchNormState(t["gamma"], t["beta"], np.zeros(2), np.ones(2))
        return float(np.sum(batchnorm(t["x"], s, "train")[0] * proj))

    s = BatchNormState(gamma, beta, np.zeros(2), np.ones(2))
    _, _, cache = batchnorm(x, s, "train")
    dx, dg, db = batchnorm_backward(proj, cache)
    rep = grad_check(f, {"x": x, "gamma": gamma, "beta": beta}, {"x": dx, "gamma": dg, "beta": db})
    assert rep.passed, rep.rows


# -- resampling -----------------------------------------------------------


def test_bilinear_two_to_four():
    x = np.array([0.0, 1.0]).reshape(1, 1, 2, 1)
    np.testing.assert_array_equal(bilinear_resize(x, 1, 4).ravel(), [0, 0.25, 0.75, 1])


@given(seeds, st.integers(1, 9), st.integers(1, 9))
def test_bilinear_matches_separable_oracle(seed, oh, ow):
    r = np.random.default_rng(seed)
    x = r.uniform(0, 1, (1, 3, 4, 2))
    y = bilinear_resize(x, oh, ow)
    ref = np.empty((oh, ow, 2))
    for c in range(2):
        cols = np.stack([bilinear_1d(x[0, :, j, c], oh) for j in range(4)], axis=1)
        ref[:, :, c] = np.stack([bilinear_1d(cols[i], ow) for i in range(oh)])
    np.testing.assert_allclose(y[0], ref, atol=1e-12)
    # convex combination: stays within the input range
    assert y.min() >= x.min() and y.max() <= x.max()


@given(st.floats(-10, 10, allow_nan=False, width=32), st.integers(1, 12), st.integers(1, 12))
def test_bilinear_constant_is_exact(v, oh, ow):
    x = np.full((1, 4, 6, 2), v, np.float32)
    np.testing.assert_array_equal(bilinear_resize(x, oh, ow), np.full((1, oh, ow, 2), v, np.float32))


def test_bilinear_same_size_is_identity(rng):
    x = rng.standard_normal((1, 5, 7, 3))
    assert np.array_equal(bilinear_resize(x, 5, 7), x)


def test_area_downsample_block_mean():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    assert area_downsample(x, 2).ravel().tolist() == [2.5]


@given(seeds, st.sampled_from([2, 4, 8]))
def test_area_downsample_matches_loop_exactly(seed, s):
    # dyadic values keep every partial sum exact, so any summation order agrees bitwise
    r = np.random.default_rng(seed)
    x = r.integers(-512, 512, (2, 2 * s, 3 * s, 2)) / 64.0
    np.testing.assert_array_equal(area_downsample(x, s), block_mean_loops(x, s))


def test_area_downsample_random_floats_close(rng):
    x = rng.standard_normal((1, 8, 8, 3))
    np.testing.assert_allclose(area_downsample(x, 4), block_mean_loops(x, 4), rtol=1e-14, atol=1e-15)


@given(st.floats(0, 1, width=32), st.sampled_from([2, 4, 8]))
def test_area_downsample_constant_exact(v, s):
    x = np.full((1, 16, 16, 2), v, np.float32)
    np.testing.assert_array_equal(area_downsample(x, s), np.full((1, 16 // s, 16 // s, 2), v, np.float32))


@given(seeds, st.sampled_from([2, 4, 8]))
def test_area_downsample_preserves_mean(seed, s):
    x = np.random.default_rng(seed).uniform(0, 1, (1, 16, 16, 2))
    np.testing.assert_allclose(area_downsample(x, s).mean(axis=(1, 2)), x.mean(axis=(1, 2)), rtol=1e-12)


def test_area_downsample_errors():
    with pytest.raises(ValueError):
        area_downsample(np.zeros((1, 6, 6, 1)), 4)
    with pytest.raises(ValueError):
        area_downsample(np.zeros((1, 6, 6, 1)), 3)


# -- gradient checker -----------------------------------------------------


def test_grad_check_quadratic():
    rep = grad_check(lambda t: float(t["a"][0] ** 2), {"a": np.array([3.0])}, {"a": np.array([6.0])})
    assert rep.rows[0].max_abs < 1e-6
    assert rep.passed


def test_grad_check_flags_wrong_gradient():
    rep = grad_check(lambda t: float(np.sum(t["a"] ** 3)), {"a": np.array([1.0, 2.0])},
                     {"a": np.array([3.0, 11.0])})
    assert not rep.passed
    assert rep.failures()[0].name == "a"


def test_grad_check_excludes_relu_kink():
    a = np.array([5e-3, 1.0, -2.0])

    def f(t):
        return float(np.sum(np.maximum(t["a"], 0)))

    rep = grad_check(f, {"a": a}, {"a": np.array([0.0, 1.0, 0.0])}, relu_inputs=("a",))
    assert rep.rows[0].excluded == 1 and rep.rows[0].checked == 2
    assert rep.passed


def test_grad_check_subsets_large_tensors():
    a = np.arange(500, dtype=float) / 500
    rep = grad_check(lambda t: float(np.sum(t["a"] ** 2)), {"a": a}, {"a": 2 * a})
    assert rep.rows[0].checked == 64
