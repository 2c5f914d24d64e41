import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from simcount.tensor_core import (
    ConfigurationError,
    ModelParams,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    bilinear_upsample,
    concat,
    conv2d,
    corrupt_gradient,
    elementwise,
    global_avg_pool,
    grad_check,
    hadamard,
    matmul,
    relu,
    reshape,
    same_padding,
    scale,
    scale_by,
    softmax,
    square,
    tanh,
    total,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# --- matmul ---------------------------------------------------------------


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, b).data, b.data)


def test_matmul_hand_product():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad_check(rng):
    assert grad_check(matmul, [leaf(rng, 3, 3), leaf(rng, 3, 3)], 1e-5) < 1e-4


# --- conv2d ---------------------------------------------------------------


def test_conv_identity_kernel_is_bit_exact(rng):
    x = Tensor(rng.standard_normal((1, 6, 5)))
    out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x.data)


def test_conv_all_ones_kernel_on_constant():
    c = 0.7
    x = Tensor(np.full((1, 5, 5), c))
    out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    np.testing.assert_allclose(out.data, 9 * c, rtol=0, atol=1e-15)


def test_conv_stride_two_output_size():
    out = conv2d(Tensor(np.zeros((1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)
    assert out.shape == (1, 2, 2)


def test_conv_non_integral_output_is_configuration_error():
    with pytest.raises(ConfigurationError):
        conv2d(Tensor(np.zeros((1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)


def test_conv_even_kernel_rejected():
    with pytest.raises(ConfigurationError):
        conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


@pytest.mark.parametrize("size,stride", [(64, 2), (65, 2), (16, 1), (7, 2)])
def test_same_padding_gives_ceil_output(size, stride):
    pad = same_padding(size, 3, stride)
    out = conv2d(Tensor(np.zeros((1, size, size))), Tensor(np.zeros((1, 1, 3, 3))), stride=stride, padding=pad + pad)
    assert out.shape[1:] == (-(-size // stride),) * 2


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, (1, 1, 0, 2)), (1, 0)])
def test_conv_grad_check(rng, stride, padding):
    x, k, b = leaf(rng, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    err = grad_check(lambda x, k, b: conv2d(x, k, b, stride, padding), [x, k, b])
    assert err < 1e-4


# --- pooling / upsampling ---------------------------------------------------


def test_pool_constant_map():
    np.testing.assert_allclose(global_avg_pool(Tensor(np.full((3, 4, 2), 2.5))).data, [2.5] * 3)


def test_pool_hand_mean():
    assert global_avg_pool(Tensor([[[0.0, 2.0], [4.0, 6.0]]])).data[0] == 3.0


def test_pool_single_pixel_unchanged(rng):
    x = rng.standard_normal((4, 1, 1))
    np.testing.assert_array_equal(global_avg_pool(Tensor(x)).data, x.reshape(4))


def test_pool_grad_is_uniform():
    x = Tensor(np.zeros((1, 2, 3)), requires_grad=True)
    backward(total(global_avg_pool(x)))
    np.testing.assert_allclose(x.grad, np.full((1, 2, 3), 1 / 6))


def test_upsample_constant():
    out = bilinear_upsample(Tensor(np.full((2, 3, 3), 1.5)), 4)
    assert out.shape == (2, 12, 12)
    np.testing.assert_allclose(out.data, 1.5, atol=1e-15)


def test_upsample_corner_aligned_slice():
    out = bilinear_upsample(Tensor([[[0.0, 2.0]]]), 2)
    np.testing.assert_allclose(out.data[0, 0], [0.0, 2 / 3, 4 / 3, 2.0], atol=1e-15)


def test_upsample_factor_one_identity(rng):
    x = rng.standard_normal((2, 3, 4))
    np.testing.assert_array_equal(bilinear_upsample(Tensor(x), 1).data, x)


def test_upsample_corners_match(rng):
    x = rng.standard_normal((1, 4, 5))
    out = bilinear_upsample(Tensor(x), 3).data
    for i, j in [(0, 0), (0, -1), (-1, 0), (-1, -1)]:
        assert out[0, i, j] == pytest.approx(x[0, i, j], abs=1e-14)


def test_pool_and_upsample_grad_check(rng):
    assert grad_check(global_avg_pool, leaf(rng, 3, 4, 5)) < 1e-4
    assert grad_check(lambda x: bilinear_upsample(x, 2), leaf(rng, 2, 3, 4)) < 1e-4


# --- elementwise / softmax --------------------------------------------------


def test_relu_definition():
    np.testing.assert_array_equal(elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_tanh_zero_and_range(rng):
    assert tanh(Tensor([0.0])).data[0] == 0.0
    out = tanh(Tensor(rng.standard_normal(100) * 5)).data
    assert np.all(np.abs(out) < 1)


def test_hadamard_hand_product():
    np.testing.assert_array_equal(hadamard(Tensor([1.0, 2, 3]), Tensor([4.0, 5, 6])).data, [4, 10, 18])


def test_binary_shape_mismatch():
    with pytest.raises(ShapeError):
        elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0]))


def test_elementwise_grad_checks(rng):
    away = rng.uniform(0.1, 2.0, 20) * rng.choice([-1, 1], 20)
    assert grad_check(relu, Tensor(away, requires_grad=True)) < 1e-4
    assert grad_check(tanh, leaf(rng, 10)) < 1e-4
    assert grad_check(lambda x: scale(x, -2.5), leaf(rng, 4)) < 1e-4
    assert grad_check(hadamard, [leaf(rng, 5), leaf(rng, 5)]) < 1e-4
    assert grad_check(lambda a, b: elementwise("add", a, b), [leaf(rng, 5), leaf(rng, 5)]) < 1e-4
    assert grad_check(square, leaf(rng, 6)) < 1e-4
    assert grad_check(scale_by, [leaf(rng, 2, 3), leaf(rng, 1)]) < 1e-4
    assert grad_check(lambda a, b: concat([a, b]), [leaf(rng, 2, 3), leaf(rng, 1, 3)]) < 1e-4


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(4))).data, 0.25, atol=1e-15)
    np.testing.assert_allclose(softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-15)
    assert softmax(Tensor([7.0])).data[0] == 1.0


def test_softmax_grad_check(rng):
    assert grad_check(softmax, leaf(rng, 7)) < 1e-4
    assert grad_check(softmax, leaf(rng, 3, 4)) < 1e-4


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_normalised_and_shift_invariant(x, c):
    y = softmax(Tensor(x)).data
    assert np.all(y > 0)
    assert abs(y.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(softmax(Tensor(x + c)).data, y, atol=1e-12)


# --- backward ---------------------------------------------------------------


def test_backward_rejects_non_scalar(rng):
    with pytest.raises(ShapeError):
        backward(leaf(rng, 3))


def test_backward_accumulates(rng):
    x = leaf(rng, 3)
    backward(total(square(x)))
    first = x.grad.copy()
    backward(total(square(x)))
    np.testing.assert_allclose(x.grad, 2 * first)


def test_gradient_linearity(rng):
    x = leaf(rng, 4, 4)
    w = Tensor(rng.standard_normal((4, 4)))

    def loss_a():
        return total(square(matmul(x, w)))

    def loss_b():
        return total(tanh(x))

    backward(loss_a())
    ga = x.grad.copy()
    x.grad = None
    backward(loss_b())
    gb = x.grad.copy()
    x.grad = None
    backward(loss_a() + loss_b())
    np.testing.assert_allclose(x.grad, ga + gb, rtol=0, atol=1e-12)


def test_shared_subexpression_gradients(rng):
    x = leaf(rng, 3)
    y = hadamard(x, x)  # same node used twice
    backward(total(y))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_reshape_grad(rng):
    assert grad_check(lambda x: reshape(x, (6,)), leaf(rng, 2, 3)) < 1e-4


# --- grad_check itself ------------------------------------------------------


def test_grad_check_skips_detached_input(rng):
    assert grad_check(tanh, Tensor(rng.standard_normal(3))) is None


def test_grad_check_detects_corrupted_backward(rng):
    x = leaf(rng, 3, 3)
    with corrupt_gradient("matmul"):
        assert grad_check(lambda a: matmul(a, a), x) > 1e-2
    assert grad_check(lambda a: matmul(a, a), x) < 1e-4


# --- parameters ---------------------------------------------------------------


def test_model_params_reject_duplicate_names():
    params = ModelParams([Parameter(np.zeros(2), "w")])
    with pytest.raises(ValueError):
        params.add(Parameter(np.zeros(2), "w"))


def test_parameter_flags():
    p = Parameter(np.ones((2, 2)), "b", decay_enabled=False)
    assert p.requires_grad and not p.decay_enabled and p.grad is None


def test_forward_outputs_finite(rng):
    x = Tensor(rng.standard_normal((2, 8, 8)) * 10)
    k = Tensor(rng.standard_normal((3, 2, 3, 3)))
    out = softmax(reshape(relu(conv2d(x, k, padding=1)), (3, 64)))
    assert np.isfinite(out.data).all()
