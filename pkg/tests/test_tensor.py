import numpy as np
import pytest

from sambd.tensor import (
    OptimState,
    Tensor,
    bilinear_upsample,
    conv2d,
    depthwise_conv2d,
    grad_check,
    no_grad,
    pointwise_activation,
    relu,
    same_padding,
    separable_conv2d,
    sgd_momentum_step,
    sigmoid,
    softmax_over_classes,
)


def conv_oracle(x, k, b=None, stride=1, dilation=1, padding=0):
    """Direct nested-loop cross-correlation, the reference for conv2d."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (xp.shape[2] - ((kh - 1) * dilation + 1)) // stride + 1
    ow = (xp.shape[3] - ((kw - 1) * dilation + 1)) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, i * stride + u * dilation, j * stride + v * dilation] * k[co, ci, u, v]
                    out[ni, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# -- conv2d --------------------------------------------------------------------


def test_conv_all_ones_sums_to_nine():
    y = conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3))), t64(np.zeros(1)))
    assert y.shape == (1, 1, 1, 1)
    assert y.item() == pytest.approx(9.0)


def test_conv_1x1_identity():
    x = np.random.default_rng(0).normal(size=(1, 1, 4, 4))
    k = np.ones((1, 1, 1, 1))
    y = conv2d(t64(x), t64(k), t64(np.zeros(1)))
    np.testing.assert_allclose(y.data, x, rtol=1e-12)


def test_conv_dilated_matches_bruteforce_oracle():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    got = conv2d(t64(x), t64(k), t64(b), dilation=2, padding=2)
    want = conv_oracle(x, k, b, dilation=2, padding=2)
    np.testing.assert_allclose(got.data, want, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("stride,dilation,padding", [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 2, 0), (3, 1, 2)])
def test_conv_matches_oracle_across_geometry(stride, dilation, padding):
    rng = np.random.default_rng(stride * 100 + dilation * 10 + padding)
    x = rng.normal(size=(2, 3, 9, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = conv2d(t64(x), t64(k), t64(b), stride=stride, dilation=dilation, padding=padding)
    want = conv_oracle(x, k, b, stride=stride, dilation=dilation, padding=padding)
    np.testing.assert_allclose(got.data, want, rtol=1e-10, atol=1e-12)


def test_conv_same_padding_preserves_extents():
    x = t64(np.random.default_rng(1).normal(size=(1, 2, 12, 16)))
    k = t64(np.random.default_rng(2).normal(size=(5, 2, 3, 3)))
    y = conv2d(x, k, padding=same_padding(3))
    assert y.shape == (1, 5, 12, 16)
    yd = conv2d(x, k, dilation=2, padding=same_padding(3, dilation=2))
    assert yd.shape == (1, 5, 12, 16)


def test_conv_rejects_bad_arguments():
    x = t64(np.zeros((1, 2, 5, 5)))
    k = t64(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValueError):
        conv2d(x, k)  # channel mismatch
    with pytest.raises(ValueError):
        conv2d(x, t64(np.zeros((1, 2, 2, 2))))  # even kernel
    with pytest.raises(ValueError):
        conv2d(x, t64(np.zeros((1, 2, 3, 3))), stride=0)
    with pytest.raises(ValueError):
        conv2d(x, t64(np.zeros((1, 2, 3, 3))), dilation=0)


# -- separable conv -------------------------------------------------------------


def test_separable_identity():
    x = np.random.default_rng(3).normal(size=(1, 2, 4, 4))
    dw = np.zeros((2, 1, 3, 3))
    dw[:, 0, 1, 1] = 1.0  # per-channel delta kernel
    pw = np.stack([np.eye(2)]).reshape(2, 2, 1, 1)
    y = separable_conv2d(t64(x), t64(dw), t64(pw), t64(np.zeros(2)), padding=1)
    np.testing.assert_allclose(y.data, x, rtol=1e-12)


def test_separable_equals_composition():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 8, 8))
    dw = rng.normal(size=(3, 1, 3, 3))
    pw = rng.normal(size=(5, 3, 1, 1))
    b = rng.normal(size=5)
    fused = separable_conv2d(t64(x), t64(dw), t64(pw), t64(b), stride=2, padding=1)
    staged = conv2d(depthwise_conv2d(t64(x), t64(dw), stride=2, padding=1), t64(pw), t64(b))
    np.testing.assert_array_equal(fused.data, staged.data)


def test_separable_parameter_count_beats_dense():
    cin = cout = 16
    k = 3
    separable = cin * k * k + cout * cin + cout
    dense = cout * cin * k * k + cout
    assert separable == 144 + 272
    assert dense == 2320
    assert separable < dense


def test_separable_channel_mismatch():
    with pytest.raises(ValueError):
        separable_conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((2, 1, 3, 3))), t64(np.zeros((4, 3, 1, 1))))


# -- bilinear upsampling -----------------------------------------------------------


def test_upsample_constant_map():
    y = bilinear_upsample(t64(np.full((1, 2, 3, 3), 7.0)), 2)
    assert y.shape == (1, 2, 6, 6)
    np.testing.assert_allclose(y.data, 7.0, rtol=1e-12)


def test_upsample_half_pixel_hand_values():
    # x_in = (i + 0.5)/2 - 0.5 with edge clamping on the row [0, 2]
    x = np.array([[[[0.0, 2.0]]]])
    y = bilinear_upsample(t64(x), 2)
    assert y.shape == (1, 1, 2, 4)
    np.testing.assert_allclose(y.data[0, 0, 0], [0.0, 0.5, 1.5, 2.0], rtol=1e-12)
    np.testing.assert_allclose(y.data[0, 0, 1], [0.0, 0.5, 1.5, 2.0], rtol=1e-12)


def test_upsample_factor_four_shape():
    y = bilinear_upsample(t64(np.zeros((1, 3, 4, 4))), 4)
    assert y.shape == (1, 3, 16, 16)


def test_upsample_rejects_small_factor():
    with pytest.raises(ValueError):
        bilinear_upsample(t64(np.zeros((1, 1, 2, 2))), 1)


# -- activations + softmax -----------------------------------------------------------


def test_activation_values():
    assert pointwise_activation(t64([0.0]), "sigmoid").item() == pytest.approx(0.5)
    y = pointwise_activation(t64([-1.0, 2.0]), "relu")
    np.testing.assert_allclose(y.data, [0.0, 2.0])
    with pytest.raises(ValueError):
        pointwise_activation(t64([0.0]), "tanh")


def test_sigmoid_gradient_matches_central_difference():
    x = t64([0.0], grad=True)
    sigmoid(x).sum().backward()
    eps = 1e-6
    fd = (1 / (1 + np.exp(-eps)) - 1 / (1 + np.exp(eps))) / (2 * eps)
    assert x.grad[0] == pytest.approx(fd, rel=1e-9)
    assert x.grad[0] == pytest.approx(0.25, rel=1e-9)


def test_sigmoid_output_strictly_inside_unit_interval():
    x = t64([-30.0, -5.0, 0.0, 5.0, 30.0])
    y = sigmoid(x).data
    assert np.all(y > 0.0) and np.all(y < 1.0)
    # extreme logits saturate without overflowing
    extreme = sigmoid(t64([-2000.0, 2000.0])).data
    assert np.isfinite(extreme).all()


def test_softmax_uniform_and_shift_invariance():
    logits = t64(np.zeros((1, 3, 2, 2)))
    sm = softmax_over_classes(logits, axis=1)
    np.testing.assert_allclose(sm.data, 1.0 / 3.0, atol=1e-12)
    rng = np.random.default_rng(5)
    raw = rng.normal(size=(1, 4, 3, 3))
    a = softmax_over_classes(t64(raw), axis=1).data
    b = softmax_over_classes(t64(raw + 17.3), axis=1).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_softmax_peaked_logits():
    sm = softmax_over_classes(t64(np.array([10.0, 0.0, 0.0]).reshape(1, 3, 1, 1)), axis=1)
    probs = sm.data.ravel()
    assert probs.argmax() == 0 and probs[0] > 0.999


def test_softmax_sums_to_one():
    rng = np.random.default_rng(6)
    sm = softmax_over_classes(t64(rng.normal(size=(2, 3, 4, 4)) * 10), axis=1)
    np.testing.assert_allclose(sm.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(sm.data >= 0)


# -- backward -------------------------------------------------------------------------


def test_backward_square():
    w = t64([3.0], grad=True)
    (w * w).sum().backward()
    assert w.grad[0] == pytest.approx(6.0)


def test_backward_product():
    a = t64([2.0], grad=True)
    b = t64([5.0], grad=True)
    (a * b).sum().backward()
    assert a.grad[0] == pytest.approx(5.0)
    assert b.grad[0] == pytest.approx(2.0)


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        t64(np.zeros(3), grad=True).backward()


def test_backward_accumulates_without_reset():
    w = t64([3.0], grad=True)
    (w * w).sum().backward()
    (w * w).sum().backward()
    assert w.grad[0] == pytest.approx(12.0)
    w.zero_grad()
    (w * w).sum().backward()
    assert w.grad[0] == pytest.approx(6.0)


@pytest.mark.parametrize("op", ["conv", "sepconv", "upsample", "sigmoid", "relu", "softmax", "mean"])
def test_per_op_gradients_match_finite_differences(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True, dtype=np.float64)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64)
    dw = Tensor(rng.normal(size=(2, 1, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64)
    pw = Tensor(rng.normal(size=(3, 2, 1, 1)) * 0.5, requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
    weight = rng.normal(size=(1, 3, 4, 4))

    def loss():
        if op == "conv":
            y = conv2d(x, k, b, padding=1)
        elif op == "sepconv":
            y = separable_conv2d(x, dw, pw, b, padding=1)
        elif op == "upsample":
            y = bilinear_upsample(x, 2)
        elif op == "sigmoid":
            y = sigmoid(x)
        elif op == "relu":
            y = relu(x * 2.0 + 0.05)
        elif op == "softmax":
            y = softmax_over_classes(conv2d(x, k, b, padding=1), axis=1)
        else:
            y = x.mean(axis=(2, 3), keepdims=True)
        if y.shape[1] == 3:
            y = y * Tensor(weight[:, :, : y.shape[2], : y.shape[3]])
        return (y * y).sum()

    err = grad_check(loss, [x, k, dw, pw, b], eps=1e-5)
    assert err < 1e-5


# -- grad_check harness -----------------------------------------------------------------


def test_grad_check_linear_function_is_exact():
    w = Tensor(np.array([1.5, -2.0]), requires_grad=True, dtype=np.float64)
    err = grad_check(lambda: (w * 3.0).sum(), [w], eps=1e-5)
    assert err < 1e-10


def test_grad_check_sigmoid_composite_two_eps_agree():
    w = Tensor(np.array([0.3, -0.7, 1.1]), requires_grad=True, dtype=np.float64)

    def loss():
        return (sigmoid(w * w + w) * Tensor(np.array([1.0, 2.0, -1.0]))).sum()

    assert grad_check(loss, [w], eps=1e-5) < 1e-7
    assert grad_check(loss, [w], eps=1e-4) < 1e-7


def test_grad_check_detects_corrupted_gradient():
    w = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)

    def loss():
        out = (w * w).sum()
        orig = out._backward

        def corrupted(g):
            orig(g * 2.0)  # doubled analytic gradient

        out._backward = corrupted
        return out

    err = grad_check(loss, [w], eps=1e-5)
    assert err == pytest.approx(1.0, rel=1e-3)


def test_grad_check_rejects_bad_eps():
    w = Tensor(np.ones(1), requires_grad=True, dtype=np.float64)
    with pytest.raises(ValueError):
        grad_check(lambda: (w * w).sum(), [w], eps=0.0)


# -- optimizer ----------------------------------------------------------------------------


def test_sgd_momentum_single_step():
    p = {"w": Tensor(np.array([1.0], dtype=np.float64), requires_grad=True)}
    p["w"].grad = np.array([0.5])
    state = OptimState(lr=0.1, momentum=0.9)
    sgd_momentum_step(p, state)
    assert state.velocity["w"][0] == pytest.approx(0.5)
    assert p["w"].data[0] == pytest.approx(0.95)


def test_sgd_zero_gradient_keeps_parameters():
    p = {"w": Tensor(np.array([1.0, -2.0], dtype=np.float64), requires_grad=True)}
    state = OptimState(lr=0.1, momentum=0.9)
    sgd_momentum_step(p, state)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_sgd_two_steps_hand_iterated():
    p = {"w": Tensor(np.array([1.0], dtype=np.float64), requires_grad=True)}
    state = OptimState(lr=0.1, momentum=0.9)
    p["w"].grad = np.array([1.0])
    sgd_momentum_step(p, state)
    assert p["w"].data[0] == pytest.approx(0.9)  # moved by 0.1
    p["w"].grad = np.array([1.0])
    sgd_momentum_step(p, state)
    assert p["w"].data[0] == pytest.approx(0.71)  # moved by 0.19


def test_sgd_shape_mismatch():
    p = {"w": Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(ValueError):
        sgd_momentum_step(p, OptimState(lr=0.1), grads={"w": np.ones(3)})


def test_optim_state_validation():
    with pytest.raises(ValueError):
        OptimState(lr=0.0)
    with pytest.raises(ValueError):
        OptimState(lr=0.1, momentum=1.0)


# -- determinism ---------------------------------------------------------------------------


def test_forward_passes_bit_deterministic():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)

    def run():
        with no_grad():
            y = conv2d(Tensor(x), Tensor(k), Tensor(b), padding=1)
            return softmax_over_classes(bilinear_upsample(y, 2), axis=1).data

    np.testing.assert_array_equal(run(), run())
