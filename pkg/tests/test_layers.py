import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grn import layers as L
from grn.optim import Adam, NonFiniteGradient, grad_check, relative_error
from oracles import avg_pool_direct, central_difference, conv_direct, rel_err, softmax_direct


def random_conv_case(rng):
    groups = int(rng.integers(1, 4))
    cg = int(rng.integers(1, 3))
    og = int(rng.integers(1, 3))
    kernel = tuple(int(k) for k in rng.integers(1, 4, size=3))
    stride = tuple(int(s) for s in rng.integers(1, 3, size=3))
    extent = tuple(int(k + rng.integers(0, 5)) for k in kernel)
    spec = L.ConvSpec(groups * cg, groups * og, kernel, stride, groups)
    n = int(rng.integers(1, 3))
    x = rng.normal(size=(n, spec.in_channels, *extent))
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=spec.out_channels)
    return spec, x, w, b


# -- convolution ---------------------------------------------------------------


def test_conv_matches_loop_oracle_on_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(200):
        spec, x, w, b = random_conv_case(rng)
        got = L.conv_forward(x, spec, w, b)
        want = conv_direct(x, w, b, spec.stride, spec.groups)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) <= 1e-12


def test_conv_layer1_extent():
    spec = L.ConvSpec(1, 36, (1, 1, 65))
    assert spec.output_extent((5, 5, 750)) == (5, 5, 686)
    x = np.random.default_rng(0).normal(size=(1, 5, 5, 750))
    out = L.conv_forward(x, spec, np.zeros(spec.weight_shape), np.zeros(36))
    assert out.shape == (36, 5, 5, 686)


def test_conv_strided_depthwise_extent():
    spec = L.ConvSpec.depthwise(72, (1, 1, 65), stride=(1, 1, 10))
    assert spec.depth_multiplier == 1
    assert spec.output_extent((1, 1, 686)) == (1, 1, 63)


def test_depthwise_multiplier_channels():
    spec = L.ConvSpec.depthwise(36, (5, 5, 1), multiplier=2)
    assert spec.out_channels == 72
    assert spec.depth_multiplier == 2
    assert spec.output_extent((5, 5, 686)) == (1, 1, 686)


def test_conv_zero_input_gives_zero():
    spec = L.ConvSpec(4, 6, (2, 1, 3), groups=2)
    out = L.conv_forward(np.zeros((2, 4, 3, 3, 7)), spec, np.ones(spec.weight_shape), np.zeros(6))
    assert not out.any()


def test_conv_error_names_axis():
    spec = L.ConvSpec(1, 1, (1, 1, 9))
    with pytest.raises(L.DimensionError, match="axis T"):
        L.conv_forward(np.zeros((1, 1, 1, 5)), spec, np.zeros(spec.weight_shape), np.zeros(1))
    with pytest.raises(L.DimensionError, match="axis C"):
        L.conv_forward(np.zeros((2, 1, 1, 9)), spec, np.zeros(spec.weight_shape), np.zeros(1))


def test_conv_spec_rejects_indivisible_groups():
    with pytest.raises(ValueError):
        L.ConvSpec(5, 6, (1, 1, 1), groups=2)


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(1)
    spec, x, w, b = random_conv_case(rng)
    out = L.conv_forward(x, spec, w, b)
    gx, gw, gb = L.conv_backward(np.zeros_like(out), x, spec, w)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_single_channel_fd():
    rng = np.random.default_rng(2)
    spec = L.ConvSpec(1, 1, (1, 1, 3))
    x = rng.normal(size=(1, 1, 1, 1, 5))
    w = rng.normal(size=spec.weight_shape)
    b = np.zeros(1)
    g = rng.normal(size=(1, 1, 1, 1, 3))

    def loss():
        return float(np.sum(L.conv_forward(x, spec, w, b) * g))

    _, gw, _ = L.conv_backward(g, x, spec, w)
    assert rel_err(gw, central_difference(loss, w)) < 1e-6


def test_conv_backward_identity_kernel_places_gradient():
    spec = L.ConvSpec(1, 1, (1, 1, 2))
    w = np.zeros(spec.weight_shape)
    w[0, 0, 0, 0, 1] = 1.0  # picks x[t + 1]
    x = np.arange(4.0).reshape(1, 1, 1, 4)
    g = np.array([10.0, 20.0, 30.0]).reshape(1, 1, 1, 3)
    gx, _, gb = L.conv_backward(g, x, spec, w)
    np.testing.assert_array_equal(gx.ravel(), [0.0, 10.0, 20.0, 30.0])
    assert gb[0] == 60.0


def test_conv_backward_matches_fd_on_random_instances():
    rng = np.random.default_rng(3)
    for _ in range(10):
        spec, x, w, b = random_conv_case(rng)
        g = rng.normal(size=L.conv_forward(x, spec, w, b).shape)

        def loss():
            return float(np.sum(L.conv_forward(x, spec, w, b) * g))

        gx, gw, gb = L.conv_backward(g, x, spec, w)
        assert rel_err(gx, central_difference(loss, x)) < 1e-4
        assert rel_err(gw, central_difference(loss, w)) < 1e-4
        assert rel_err(gb, central_difference(loss, b)) < 1e-4


def test_conv_backward_rejects_wrong_grad_shape():
    spec = L.ConvSpec(1, 2, (1, 1, 3))
    x = np.zeros((1, 1, 1, 1, 6))
    with pytest.raises(L.DimensionError):
        L.conv_backward(np.zeros((1, 2, 1, 1, 5)), x, spec, np.zeros(spec.weight_shape))


# -- batch norm ----------------------------------------------------------------


def test_bn_constant_channel_is_zero():
    x = np.full((3, 1, 4), 7.0)
    y, _ = L.batch_norm_forward(x, np.ones(1), np.zeros(1), L.BatchNormState.fresh(1))
    assert np.all(y == 0.0)


def test_bn_gamma_zero_gives_beta():
    x = np.random.default_rng(0).normal(size=(4, 2, 5))
    y, _ = L.batch_norm_forward(x, np.zeros(2), np.array([0.5, -2.0]), L.BatchNormState.fresh(2))
    np.testing.assert_array_equal(y[:, 0], 0.5)
    np.testing.assert_array_equal(y[:, 1], -2.0)


def test_bn_two_samples_closed_form():
    x = np.array([[-1.0], [1.0]])
    y, _ = L.batch_norm_forward(x, np.ones(1), np.zeros(1), L.BatchNormState.fresh(1))
    np.testing.assert_allclose(y.ravel(), np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5), rtol=0, atol=1e-15)


def test_bn_running_stats_momentum():
    x = np.array([[-1.0], [1.0], [3.0]])
    st_ = L.BatchNormState.fresh(1)
    L.batch_norm_forward(x, np.ones(1), np.zeros(1), st_)
    # mean 1, unbiased variance 4
    assert st_.mean[0] == pytest.approx(0.1)
    assert st_.var[0] == pytest.approx(0.9 + 0.4)


def test_bn_momentum_one_stores_batch_stats():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 3, 7))
    state = L.BatchNormState.fresh(3)
    y_train, _ = L.batch_norm_forward(x, np.ones(3), np.zeros(3), state, momentum=1.0)
    y_eval, _ = L.batch_norm_forward(x, np.ones(3), np.zeros(3), state, "eval")
    np.testing.assert_allclose(y_train, y_eval, atol=1e-14)


def test_bn_eval_leaves_state():
    state = L.BatchNormState(np.array([0.3]), np.array([2.0]))
    L.batch_norm_forward(np.ones((2, 1)), np.ones(1), np.zeros(1), state, "eval")
    assert state.mean[0] == 0.3 and state.var[0] == 2.0


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_bn_backward_fd(mode):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 2, 4))
    gamma = rng.normal(size=2)
    beta = rng.normal(size=2)
    g = rng.normal(size=x.shape)
    running = L.BatchNormState(rng.normal(size=2), rng.uniform(0.5, 2, size=2))

    def loss():
        y, _ = L.batch_norm_forward(x, gamma, beta, running.copy(), mode)
        return float(np.sum(y * g))

    _, cache = L.batch_norm_forward(x, gamma, beta, running.copy(), mode)
    gx, gg, gb = L.batch_norm_backward(g, cache)
    assert rel_err(gx, central_difference(loss, x)) < 1e-4
    assert rel_err(gg, central_difference(loss, gamma)) < 1e-4
    assert rel_err(gb, central_difference(loss, beta)) < 1e-4


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_fused_bn_elu_equals_composition(mode):
    rng = np.random.default_rng(6)
    for _ in range(200):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)), *rng.integers(1, 5, size=2))
        x = rng.normal(size=shape) * 3
        c = shape[1]
        gamma, beta = rng.normal(size=c), rng.normal(size=c)
        s1 = L.BatchNormState(rng.normal(size=c), rng.uniform(0.5, 2, size=c))
        s2 = s1.copy()
        fused, fcache = L.bn_elu_forward(x, gamma, beta, s1, mode)
        y, bcache = L.batch_norm_forward(x, gamma, beta, s2, mode)
        ref = L.elu(y)
        assert np.max(np.abs(fused - ref)) <= 1e-12
        np.testing.assert_allclose(s1.mean, s2.mean, atol=1e-12)
        np.testing.assert_allclose(s1.var, s2.var, atol=1e-12)
        g = rng.normal(size=shape)
        dx_f, dg_f, db_f = L.bn_elu_backward(g, fcache)
        dx_r, dg_r, db_r = L.batch_norm_backward(L.elu_backward(g, ref), bcache)
        assert np.max(np.abs(dx_f - dx_r)) <= 1e-10
        assert np.max(np.abs(dg_f - dg_r)) <= 1e-10
        assert np.max(np.abs(db_f - db_r)) <= 1e-10


# -- activations ---------------------------------------------------------------


def test_elu_examples():
    np.testing.assert_array_equal(L.elu(np.array([0.0, 2.0])), [0.0, 2.0])
    assert L.elu(np.array([-1.0]))[0] == pytest.approx(math.exp(-1) - 1, abs=1e-15)
    assert L.elu(np.array([-1.0]))[0] == pytest.approx(-0.6321, abs=1e-4)


def test_elu_backward_fd():
    x = np.array([-2.0, -0.3, 0.4, 1.5])
    g = np.array([0.5, -1.0, 2.0, 1.0])
    gx = L.elu_backward(g, L.elu(x))
    assert rel_err(gx, central_difference(lambda: float(np.sum(L.elu(x) * g)), x)) < 1e-6


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=50))
def test_elu_monotone(values):
    v = np.sort(np.array(values))
    assert np.all(np.diff(L.elu(v)) >= 0)


def test_elu_continuous_at_zero():
    eps = np.array([-1e-12, 1e-12])
    assert np.max(np.abs(L.elu(eps))) < 1e-11


def test_sigmoid_values_and_gradient():
    assert L.sigmoid(np.array([0.0]))[0] == 0.5
    big = L.sigmoid(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0
    x = np.array([-3.0, 0.2, 4.0])
    g = np.array([1.0, -2.0, 0.5])
    gx = L.sigmoid_backward(g, L.sigmoid(x))
    assert rel_err(gx, central_difference(lambda: float(np.sum(L.sigmoid(x) * g)), x)) < 1e-7


def test_softmax_examples():
    np.testing.assert_allclose(L.softmax(np.array([4.0, 4.0, 4.0])), [1 / 3] * 3, atol=1e-15)
    p = L.softmax(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(p, [0.09003057317038046, 0.24472847105479764, 0.6652409557748219], atol=1e-15)
    np.testing.assert_allclose(p, [0.09003, 0.24473, 0.66524], atol=5e-6)


def test_softmax_matches_direct_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        v = rng.normal(size=int(rng.integers(1, 8))) * 5
        assert np.max(np.abs(L.softmax(v) - softmax_direct(v))) <= 1e-12


@given(
    st.lists(st.floats(-300, 300), min_size=1, max_size=20),
    st.floats(-1000, 1000),
)
def test_softmax_properties(values, shift):
    v = np.array(values)
    p = L.softmax(v)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(L.softmax(v + shift), p, atol=1e-12)


# -- pooling and dense ---------------------------------------------------------


def test_avg_pool_examples():
    np.testing.assert_array_equal(L.avg_pool_time(np.array([1.0, 2.0, 3.0, 4.0])), [1.5, 3.5])
    np.testing.assert_array_equal(L.avg_pool_time(np.full(7, 2.5)), np.full(3, 2.5))
    assert L.avg_pool_time(np.zeros((288, 54))).shape == (288, 27)
    with pytest.raises(L.DimensionError):
        L.avg_pool_time(np.zeros(3), window=4)


def test_avg_pool_matches_oracle():
    rng = np.random.default_rng(8)
    for _ in range(200):
        t = int(rng.integers(1, 12))
        window = int(rng.integers(1, t + 1))
        stride = int(rng.integers(1, 4))
        x = rng.normal(size=(int(rng.integers(1, 4)), t))
        assert np.max(np.abs(L.avg_pool_time(x, window, stride) - avg_pool_direct(x, window, stride))) <= 1e-12


def test_avg_pool_backward_fd():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 9))
    g = rng.normal(size=(2, 3))
    gx = L.avg_pool_time_backward(g, 9, 3, 3)
    assert rel_err(gx, central_difference(lambda: float(np.sum(L.avg_pool_time(x, 3, 3) * g)), x)) < 1e-8


def test_global_avg_pool():
    assert L.global_avg_pool(np.zeros((2, 288, 18))).shape == (2, 288)
    assert L.global_avg_pool(np.array([[2.0, 4.0, 6.0]]), channel_axis=0)[0] == 4.0
    np.testing.assert_array_equal(L.global_avg_pool(np.array([[[3.0]]])), [[3.0]])
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 3, 5))
    g = rng.normal(size=(2, 3))
    gx = L.global_avg_pool_backward(g, x.shape)
    assert rel_err(gx, central_difference(lambda: float(np.sum(L.global_avg_pool(x) * g)), x)) < 1e-8


def test_dense_examples_and_gradient():
    np.testing.assert_array_equal(L.dense(np.array([3.0, 4.0]), np.eye(2), np.zeros(2)), [3.0, 4.0])
    np.testing.assert_array_equal(L.dense(np.array([3.0, 4.0]), np.array([[1.0, 1.0]]), np.zeros(1)), [7.0])
    rng = np.random.default_rng(12)
    h = L.dense(rng.normal(size=(1, 288)), rng.normal(size=(8, 288)), np.zeros(8))
    assert L.dense(h, rng.normal(size=(1, 8)), np.zeros(1)).shape == (1, 1)
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)
    g = rng.normal(size=(3, 2))
    gx, gw, gb = L.dense_backward(g, x, w)

    def loss():
        return float(np.sum(L.dense(x, w, b) * g))

    for got, arr in ((gx, x), (gw, w), (gb, b)):
        assert rel_err(got, central_difference(loss, arr)) < 1e-9
    with pytest.raises(L.DimensionError):
        L.dense(np.zeros(3), np.zeros((2, 4)), np.zeros(2))


def test_mse_pair_loss_examples():
    loss, grad = L.mse_pair_loss(np.array([1.0, 0.0, 0.3]), np.array([True, True, False]))
    np.testing.assert_allclose(loss, [0.0, 1.0, 0.09], atol=1e-15)
    np.testing.assert_allclose(grad, [0.0, -2.0, 0.6], atol=1e-15)


# -- Adam and gradient checker -------------------------------------------------


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam()
    opt.step(p, {"w": np.array([0.5, 0.5])})
    before = p["w"].copy()
    m = opt.m["w"].copy()
    v = opt.v["w"].copy()
    opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_allclose(opt.m["w"], 0.9 * m)
    np.testing.assert_allclose(opt.v["w"], 0.999 * v)
    # the decayed first moment still moves the weights; a fresh optimizer would not
    fresh = {"w": before.copy()}
    Adam().step(fresh, {"w": np.zeros(2)})
    np.testing.assert_array_equal(fresh["w"], before)
    assert opt.step_count == 2


def test_adam_first_step_magnitude_is_lr():
    p = {"w": np.zeros(4)}
    g = np.array([3.0, -0.01, 1e3, -7.0])
    Adam().step(p, {"w": g})
    np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-5)
    assert Adam().lr == 1e-3


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(13)
    w = rng.normal(size=5)
    p = {"w": w.copy()}
    opt = Adam(lr=0.01)
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 6):
        g = rng.normal(size=5)
        opt.step(p, {"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12, atol=1e-15)


def test_adam_rejects_non_finite():
    p = {"a": np.zeros(2), "b": np.zeros(3)}
    with pytest.raises(NonFiniteGradient, match="'b'"):
        Adam().step(p, {"a": np.zeros(2), "b": np.array([0.0, np.nan, 1.0])})
    assert not p["b"].any()


def test_adam_bit_reproducible():
    def run():
        rng = np.random.default_rng(14)
        p = {"w": rng.normal(size=(3, 3))}
        opt = Adam()
        for _ in range(4):
            opt.step(p, {"w": rng.normal(size=(3, 3))})
        return p["w"]

    assert run().tobytes() == run().tobytes()


def test_grad_check_linear_layer():
    rng = np.random.default_rng(15)
    params = {"w": rng.normal(size=(2, 3)), "b": rng.normal(size=2)}
    x = rng.normal(size=3)
    c = rng.normal(size=2)

    def fn():
        return float(c @ L.dense(x, params["w"], params["b"]))

    grads = {"w": np.outer(c, x), "b": c.copy()}
    assert grad_check(fn, params, grads) < 1e-9


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda: 0.0, {"w": np.zeros(1)}, {"w": np.zeros(1)}, h=0)


def test_relative_error_floor():
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_conv_linearity_property(seed):
    rng = np.random.default_rng(seed)
    spec, x, w, b = random_conv_case(rng)
    y = rng.normal(size=x.shape)
    zero = np.zeros(spec.out_channels)
    lhs = L.conv_forward(2.0 * x - y, spec, w, zero)
    rhs = 2.0 * L.conv_forward(x, spec, w, zero) - L.conv_forward(y, spec, w, zero)
    assert np.max(np.abs(lhs - rhs)) < 1e-10
