import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fvalign import tensor as T
from fvalign.errors import NumericError, ShapeError
from fvalign.gradcheck import check_gradients, numeric_grad, relative_error
from fvalign.tensor import Tape, Tensor

TOL = 1e-6


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- forward values


def test_identity_matmul():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(T.matmul(np.eye(3), a).data, a)


def test_identity_conv_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 6))
    out = T.conv2d(x, np.ones((1, 1, 1, 1)))
    assert np.array_equal(out.data, x)


def test_relu_definition():
    assert np.array_equal(T.relu(np.array([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_conv2d_matches_loop(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(x, w, b, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 4, 3))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(3):
                    patch = xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    ref[n, o, i, j] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_max_pool_ceil_mode_keeps_single_pixel():
    x = np.arange(1.0, 2.0).reshape(1, 1, 1, 1)
    assert T.max_pool2d(x, 2, stride=2, ceil_mode=True).shape == (1, 1, 1, 1)
    y = np.arange(9.0).reshape(1, 1, 3, 3)
    out = T.max_pool2d(y, 2, stride=2, ceil_mode=True).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 5], [7, 8]])


def test_avg_pool(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    out = T.avg_pool2d(x, 2).data
    ref = x.reshape(1, 2, 2, 2, 2, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(out, ref, atol=1e-14)


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match=r"\(2, 3\)"):
        T.add(np.ones((2, 3)), np.ones((4, 5)))


def test_normalize_zero_vector_errors():
    with pytest.raises(NumericError):
        T.normalize(np.zeros(4))


def test_softmax_stable_for_large_inputs():
    out = T.softmax(np.array([1000.0, 1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5])


# ---------------------------------------------------------------- tape


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x * x)
    (g,) = tape.backward(loss, [x])
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_self_cosine_gradient_is_zero(rng):
    v = param(rng, 6)
    with Tape() as tape:
        loss = T.cosine_similarity(v, v)
    (g,) = tape.backward(loss, [v])
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_non_scalar_backward_errors(rng):
    x = param(rng, 3)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_unused_param_gets_zero_grad(rng):
    x, unused = param(rng, 3), param(rng, 2)
    with Tape() as tape:
        loss = T.tsum(x)
    _, g = tape.backward(loss, [x, unused])
    assert np.array_equal(g, np.zeros(2))


def test_no_tape_records_nothing(rng):
    x = param(rng, 3)
    y = T.tsum(x * x)
    assert y.shape == ()


def test_reused_input_accumulates(rng):
    x = param(rng, 4)
    with Tape() as tape:
        loss = T.tsum(x * x * x)
    (g,) = tape.backward(loss, [x])
    np.testing.assert_allclose(g, 3 * x.data ** 2, rtol=1e-14)


# ---------------------------------------------------------------- finite differences

ELEMENTWISE = {
    "exp": T.exp,
    "log": lambda a: T.log(T.tabs(a) + 1.0),
    "sqrt": lambda a: T.sqrt(a * a + 1.0),
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "relu": T.relu,
    "power": lambda a: T.power(a, 3.0),
    "div": lambda a: a / (a * a + 2.0),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradients(name, rng):
    x = param(rng, 5)
    w = rng.standard_normal(5)
    fn = ELEMENTWISE[name]
    assert check_gradients(lambda: T.tsum(fn(x) * w), [x])[0] < TOL


def test_softmax_and_log_softmax_gradients(rng):
    x = param(rng, 3, 5)
    w = rng.standard_normal((3, 5))
    assert check_gradients(lambda: T.tsum(T.softmax(x, axis=-1) * w), [x])[0] < TOL
    assert check_gradients(lambda: T.tsum(T.log_softmax(x, axis=0) * w), [x])[0] < TOL


def test_reduction_gradients(rng):
    x = param(rng, 3, 4, 5)
    w = rng.standard_normal((3, 5))
    assert check_gradients(lambda: T.tsum(T.mean(x, axis=1) * w), [x])[0] < TOL
    assert check_gradients(lambda: T.tsum(T.tmax(x, axis=1) * w[:, None, :]), [x])[0] < TOL
    assert check_gradients(lambda: T.tsum(T.l2_norm(x, axis=-1)), [x])[0] < TOL


def test_normalize_and_cosine_gradients(rng):
    a, b = param(rng, 4, 6), param(rng, 4, 6)
    w = rng.standard_normal((4, 6))
    assert max(check_gradients(lambda: T.tsum(T.normalize(a) * w), [a])) < TOL
    assert max(check_gradients(lambda: T.tsum(T.cosine_similarity(a, b)), [a, b])) < TOL


def test_structural_gradients(rng):
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    w = rng.standard_normal((6, 4))

    def fn():
        cat = T.concat([a, b[::-1]], axis=0)
        st_ = T.stack([a, b], axis=1)
        return (T.tsum(cat * w) + T.tsum(T.transpose(st_, (2, 0, 1)) ** 2)
                + T.tsum(T.reshape(a, (12,))[::3]))

    assert max(check_gradients(fn, [a, b])) < TOL


def test_matmul_broadcast_gradients(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    assert max(check_gradients(lambda: T.tsum(T.tanh(T.matmul(a, b))), [a, b])) < TOL


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(stride, padding, rng):
    x, w, b = param(rng, 2, 3, 5, 5), param(rng, 4, 3, 3, 3), param(rng, 4)
    assert max(check_gradients(
        lambda: T.tsum(T.tanh(T.conv2d(x, w, b, stride=stride, padding=padding))),
        [x, w, b])) < TOL


@pytest.mark.parametrize("kernel,stride,padding,ceil", [(2, 2, 0, True), (3, 1, 1, False),
                                                        (2, 2, 0, False)])
def test_pool_gradients(kernel, stride, padding, ceil, rng):
    x = param(rng, 2, 2, 5, 5)
    w = rng.standard_normal(T.max_pool2d(x, kernel, stride, padding, ceil).shape)
    assert check_gradients(
        lambda: T.tsum(T.max_pool2d(x, kernel, stride, padding, ceil) * w), [x])[0] < TOL
    if not ceil:
        w2 = rng.standard_normal(T.avg_pool2d(x, kernel, stride, padding).shape)
        assert check_gradients(
            lambda: T.tsum(T.avg_pool2d(x, kernel, stride, padding) * w2), [x])[0] < TOL


def test_gradcheck_detects_wrong_gradient():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.5])) > 0.1
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_numeric_grad_restores_parameter(rng):
    x = param(rng, 4)
    before = x.data.copy()
    numeric_grad(lambda: T.tsum(x * x), x)
    assert np.array_equal(x.data, before)


# ---------------------------------------------------------------- properties


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(x).data
    assert np.all(p >= 0) and math.isclose(p.sum(), 1.0, rel_tol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-10, 10)),
       st.floats(0.1, 10), st.floats(0.1, 10))
def test_cosine_scale_invariant(x, s1, s2):
    if np.any(np.linalg.norm(x, axis=1) < 1e-3):
        return
    c = T.cosine_similarity(x[0], x[1]).item()
    c2 = T.cosine_similarity(s1 * x[0], s2 * x[1]).item()
    assert abs(c - c2) < 1e-12 and -1 - 1e-12 <= c <= 1 + 1e-12


# ---------------------------------------------------------------- optimizer


def adam_oracle(theta, g, lr, b1=0.9, b2=0.999, eps=1e-6):
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat = m / (1 - b1)
    vhat = v / (1 - b2)
    return theta - lr * mhat / (math.sqrt(vhat) + eps)


def test_adam_first_step_matches_oracle():
    p = Tensor([0.5], requires_grad=True)
    state = T.AdamState.init([p], lr=0.001)
    T.adam_step([p], [np.array([1.0])], state)
    assert p.data[0] == pytest.approx(adam_oracle(0.5, 1.0, 0.001), abs=1e-15)
    # bias correction makes the first step about -lr regardless of gradient scale
    assert p.data[0] - 0.5 == pytest.approx(-0.001, rel=1e-5)


def test_adam_zero_gradient_leaves_parameter():
    p = Tensor([0.3, -0.2], requires_grad=True)
    state = T.AdamState.init([p])
    T.adam_step([p], [np.zeros(2)], state)
    assert np.array_equal(p.data, [0.3, -0.2]) and state.t == 1


def test_adam_is_deterministic(rng):
    g = rng.standard_normal(4)
    results = []
    for _ in range(2):
        p = Tensor(np.ones(4), requires_grad=True)
        state = T.AdamState.init([p])
        for _ in range(3):
            T.adam_step([p], [g], state)
        results.append(p.data)
    assert np.array_equal(*results)


def test_adam_shape_mismatch():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.adam_step([p], [np.ones(2)], T.AdamState.init([p]))


@pytest.mark.parametrize("base,epoch,expected", [(0.01, 0, 0.01), (0.01, 5, 0.009),
                                                 (0.001, 12, 0.00081), (0.01, 4, 0.01)])
def test_lr_schedule(base, epoch, expected):
    assert T.lr_schedule(base, epoch) == pytest.approx(expected, rel=1e-12)


def test_lr_schedule_negative_epoch():
    with pytest.raises(ValueError):
        T.lr_schedule(0.01, -1)


def test_tensor_rejects_empty_dimension():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))
