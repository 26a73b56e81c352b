import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metavgan.neural import (
    MlpSpec,
    NumericError,
    OptimizerState,
    ShapeError,
    UsageError,
    adam_step,
    dropout_mask,
    finite_diff_grad,
    flatten,
    gaussian_sample,
    init_params,
    make_dropout_masks,
    make_rng,
    max_relative_error,
    mlp_backward,
    mlp_forward,
    sgd_step,
    unflatten,
)


def hand_forward(layers, acts, x, masks=None):
    # independent re-implementation used as an oracle
    h = x
    for i, ((W, b), act) in enumerate(zip(layers, acts)):
        out = np.empty((h.shape[0], W.shape[1]))
        for r in range(h.shape[0]):
            for j in range(W.shape[1]):
                s = b[j]
                for k in range(W.shape[0]):
                    s += h[r, k] * W[k, j]
                out[r, j] = max(s, 0.0) if act == "relu" else s
        if masks is not None and i < len(layers) - 1:
            out = out * masks[i]
        h = out
    return h


def test_identity_layer():
    spec = MlpSpec((2, 2), ("linear",))
    params = flatten([(np.eye(2), np.zeros(2))])
    out, _ = mlp_forward(spec, params, np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(out, [[1.0, 2.0]])


def test_relu_clamps():
    # final layer must be linear, so put the relu in a hidden layer and read it back through identity
    spec = MlpSpec((1, 1, 1), ("relu", "linear"))
    params = flatten([(np.array([[2.0]]), np.array([1.0])), (np.array([[1.0]]), np.array([0.0]))])
    out, _ = mlp_forward(spec, params, np.array([[-3.0]]))
    assert out[0, 0] == 0.0


def test_forward_matches_hand_rolled():
    rng = make_rng(3)
    spec = MlpSpec((5, 7, 6, 3))
    params = init_params(spec, rng)
    params += 0.1 * rng.standard_normal(params.size)
    x = rng.standard_normal((4, 5))
    out, _ = mlp_forward(spec, params, x)
    expected = hand_forward(unflatten(spec, params), spec.activations, x)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_forward_with_dropout_matches_hand_rolled():
    rng = make_rng(4)
    spec = MlpSpec((3, 5, 4, 2), dropout_rate=0.3)
    params = init_params(spec, rng)
    x = rng.standard_normal((6, 3))
    masks = make_dropout_masks(spec, rng, 6)
    out, _ = mlp_forward(spec, params, x, masks)
    expected = hand_forward(unflatten(spec, params), spec.activations, x, masks)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_forward_shape_error():
    spec = MlpSpec((3, 2))
    with pytest.raises(ShapeError):
        mlp_forward(spec, np.zeros(spec.n_params()), np.zeros((1, 4)))
    with pytest.raises(ShapeError):
        mlp_forward(spec, np.zeros(spec.n_params() + 1), np.zeros((1, 3)))


def test_linear_backward():
    spec = MlpSpec((3, 1))
    x = np.array([[1.0, -2.0, 0.5]])
    params = np.arange(4, dtype=float)
    _, cache = mlp_forward(spec, params, x)
    grad, g_in = mlp_backward(cache, np.ones((1, 1)))
    (gW, gb), = unflatten(spec, grad)
    np.testing.assert_array_equal(gW[:, 0], x[0])
    np.testing.assert_array_equal(gb, [1.0])
    np.testing.assert_array_equal(g_in[0], unflatten(spec, params)[0][0][:, 0])


def test_relu_dead_unit_blocks_gradient():
    spec = MlpSpec((1, 1, 1))
    params = flatten([(np.array([[1.0]]), np.array([-5.0])), (np.array([[3.0]]), np.array([0.0]))])
    _, cache = mlp_forward(spec, params, np.array([[1.0]]))
    _, g_in = mlp_backward(cache, np.ones((1, 1)))
    assert g_in[0, 0] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = make_rng(seed)
    spec = MlpSpec((4, 6, 5, 3))
    # random biases keep pre-activations off the relu kink
    params = init_params(spec, rng) + 0.1 * rng.standard_normal(spec.n_params())
    x = rng.standard_normal((5, 4))
    target = rng.standard_normal((5, 3))

    def loss(p):
        out, _ = mlp_forward(spec, p, x)
        return 0.5 * np.sum((out - target) ** 2)

    out, cache = mlp_forward(spec, params, x)
    grad, _ = mlp_backward(cache, out - target)
    numeric = finite_diff_grad(loss, params, 1e-5)
    assert max_relative_error(grad, numeric) < 1e-6


def test_backward_rejects_mismatched_upstream():
    spec = MlpSpec((2, 3))
    _, cache = mlp_forward(spec, np.zeros(spec.n_params()), np.zeros((4, 2)))
    with pytest.raises(UsageError):
        mlp_backward(cache, np.zeros((5, 3)))
    with pytest.raises(UsageError):
        mlp_backward(object(), np.zeros((4, 3)))


def test_finite_diff_simple_functions():
    g = finite_diff_grad(lambda t: 0.5 * np.sum(t * t), np.array([1.0, 2.0]), 1e-5)
    np.testing.assert_allclose(g, [1.0, 2.0], atol=1e-8)
    g = finite_diff_grad(lambda t: t[0] * t[1], np.array([3.0, 5.0]), 1e-5)
    np.testing.assert_allclose(g, [5.0, 3.0], atol=1e-8)


def test_finite_diff_rejects_bad_inputs():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda t: 0.0, np.zeros(1), 0.0)
    with pytest.raises(NumericError):
        finite_diff_grad(lambda t: np.inf, np.zeros(1), 1e-5)


def test_sgd_step():
    assert sgd_step(np.array([1.0]), np.array([1.0]), 0.1, "descend")[0] == pytest.approx(0.9)
    assert sgd_step(np.array([1.0]), np.array([1.0]), 0.1, "ascend")[0] == pytest.approx(1.1)
    p = np.array([1.0, -2.0])
    np.testing.assert_array_equal(sgd_step(p, np.zeros(2), 0.1), p)
    with pytest.raises(ShapeError):
        sgd_step(p, np.zeros(3), 0.1)


def test_adam_first_step():
    st = OptimizerState.adam(1, lr=0.001)
    p, st = adam_step(st, np.array([0.0]), np.array([1.0]))
    assert p[0] == pytest.approx(-0.001, rel=1e-6)
    assert st.step_count == 1


def test_adam_zero_gradient_keeps_params():
    st = OptimizerState.adam(3)
    p = np.array([1.0, 2.0, 3.0])
    for _ in range(10):
        p2, st = adam_step(st, p, np.zeros(3))
        np.testing.assert_array_equal(p2, p)


def test_adam_three_step_trace():
    grads = [np.array([0.5, -1.0]), np.array([-0.2, 3.0]), np.array([1.5, 0.0])]
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    # hand-computed trace
    theta = np.array([1.0, -1.0])
    m = np.zeros(2)
    v = np.zeros(2)
    expected = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        expected.append(theta.copy())
    st = OptimizerState.adam(2, lr, b1, b2, eps)
    p = np.array([1.0, -1.0])
    for g, want in zip(grads, expected):
        p, st = adam_step(st, p, g)
        np.testing.assert_allclose(p, want, rtol=0, atol=1e-12)
    assert st.step_count == 3


def test_gaussian_sample_determinism_and_moments():
    a = gaussian_sample(make_rng(1), 3, 4)
    b = gaussian_sample(make_rng(1), 3, 4)
    c = gaussian_sample(make_rng(2), 3, 4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    big = gaussian_sample(make_rng(0), 1000, 1000)
    assert -0.01 < big.mean() < 0.01
    assert 0.99 < big.var() < 1.01


def test_dropout_mask():
    np.testing.assert_array_equal(dropout_mask(make_rng(0), (3, 4), 0.0), np.ones((3, 4)))
    m = dropout_mask(make_rng(0), (1000, 1000), 0.3)
    assert set(np.unique(m)) <= {0.0, 1.0 / 0.7}
    assert 0.295 < np.mean(m == 0) < 0.305
    const = 2.5 * np.ones((1000, 1000))
    assert abs((m * const).mean() - 2.5) < 0.025
    with pytest.raises(ValueError):
        dropout_mask(make_rng(0), (2,), 1.0)
    with pytest.raises(ValueError):
        dropout_mask(make_rng(0), (2,), -0.1)


@settings(max_examples=50, deadline=None)
@given(widths=st.lists(st.integers(1, 6), min_size=2, max_size=5), seed=st.integers(0, 2**32 - 1))
def test_flatten_unflatten_roundtrip(widths, seed):
    spec = MlpSpec(tuple(widths))
    params = make_rng(seed).standard_normal(spec.n_params())
    layers = unflatten(spec, params)
    np.testing.assert_array_equal(flatten(layers), params)
    assert sum(W.size + b.size for W, b in layers) == spec.n_params()


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,))
    with pytest.raises(ValueError):
        MlpSpec((3, 2), ("relu",))
    with pytest.raises(ValueError):
        MlpSpec((3, 2), dropout_rate=1.0)
