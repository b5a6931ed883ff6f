import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from policy_transfer.math_core import (
    AffineTransform,
    ConfigurationError,
    GaussianHead,
    MlpParams,
    affine_apply,
    gaussian_log_prob,
    log_softmax,
    mlp_backward,
    mlp_forward,
    mlp_input_grad,
    mvn_log_prob,
    softmax,
)
from policy_transfer.optim import finite_diff_grad

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def small_net(seed=0, sizes=(3, 4, 2), activation="tanh"):
    return MlpParams.init(sizes, np.random.default_rng(seed), activation, out_scale=1.0)


# ------------------------------------------------------------------ forward


def test_forward_matches_explicit_loops():
    p = small_net()
    x = np.array([0.3, -1.2, 0.5])
    h = np.tanh(p.weights[0] @ x + p.biases[0])
    expected = p.weights[1] @ h + p.biases[1]
    out, hidden = mlp_forward(p, x)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(hidden[-1], h)
    np.testing.assert_array_equal(hidden[0], x)


def test_forward_batch_equals_rowwise():
    p = small_net(sizes=(5, 8, 8, 2))
    x = np.random.default_rng(1).normal(size=(7, 5))
    batch = mlp_forward(p, x)[0]
    rows = np.stack([mlp_forward(p, xi)[0] for xi in x])
    np.testing.assert_allclose(batch, rows, atol=1e-14)


def test_forward_rejects_wrong_width():
    with pytest.raises(ConfigurationError):
        mlp_forward(small_net(), np.zeros(4))


def test_identity_activation_is_linear():
    p = small_net(activation="identity")
    x = np.array([1.0, 2.0, -1.0])
    expected = p.weights[1] @ (p.weights[0] @ x + p.biases[0]) + p.biases[1]
    np.testing.assert_allclose(mlp_forward(p, x)[0], expected, atol=1e-14)


def test_params_are_read_only_and_validated():
    p = small_net()
    with pytest.raises(ValueError):
        p.weights[0][0, 0] = 1.0
    with pytest.raises(ConfigurationError):
        MlpParams((np.zeros((4, 3)), np.zeros((2, 5))), (np.zeros(4), np.zeros(2)))
    with pytest.raises(ConfigurationError):
        MlpParams((np.full((2, 2), np.nan),), (np.zeros(2),))


def test_flat_roundtrip_and_dict_roundtrip():
    p = small_net(sizes=(5, 6, 3))
    q = p.with_flat(p.flat())
    assert q.digest() == p.digest()
    r = MlpParams.from_dict(p.to_dict())
    assert r.digest() == p.digest() and r.activation == p.activation


# ------------------------------------------------------------------ backward


@pytest.mark.parametrize("activation", ["tanh", "identity", "relu"])
def test_backward_matches_finite_differences(activation):
    p = small_net(3, sizes=(4, 6, 5, 3), activation=activation)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 4))
    target = rng.normal(size=(6, 3))

    def loss(flat):
        out = mlp_forward(p.with_flat(flat), x)[0]
        return 0.5 * np.sum((out - target) ** 2)

    out = mlp_forward(p, x)[0]
    analytic = mlp_backward(p, x, out - target).flat()
    numeric = finite_diff_grad(loss, p.flat(), 1e-6)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-6)
    assert np.max(rel) <= 1e-4


def test_input_grad_matches_finite_differences():
    p = small_net(2, sizes=(3, 5, 2))
    x = np.array([0.2, -0.4, 0.9])
    g = np.array([1.0, -2.0])
    num = finite_diff_grad(lambda v: float(g @ mlp_forward(p, v)[0]), x, 1e-6)
    np.testing.assert_allclose(mlp_input_grad(p, x, g), num, rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------- Gaussians


def test_gaussian_log_prob_at_mode():
    head = GaussianHead(np.zeros(2), np.zeros(2))
    assert gaussian_log_prob(head, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)


def test_gaussian_log_prob_scalar_formula():
    mu, ls, a = np.array([0.5, -1.0]), np.array([-0.3, 0.7]), np.array([1.0, 2.0])
    expected = sum(
        -0.5 * ((ai - mi) / math.exp(si)) ** 2 - si - 0.5 * math.log(2 * math.pi) for ai, mi, si in zip(a, mu, ls)
    )
    assert gaussian_log_prob(GaussianHead(mu, ls), a) == pytest.approx(expected, abs=1e-12)


def test_log_std_is_clipped():
    head = GaussianHead(np.zeros(2), np.array([-50.0, 50.0]))
    np.testing.assert_allclose(head.log_std, [-10.0, 2.0])


def test_mvn_matches_diagonal_and_flags_singular():
    mu = np.array([[0.1, 0.2], [1.0, -1.0]])
    std = np.array([0.5, 2.0])
    x = np.array([[0.0, 0.0], [1.5, 0.5]])
    diag = gaussian_log_prob(GaussianHead(mu, np.log(std)), x)
    np.testing.assert_allclose(mvn_log_prob(mu, np.diag(std ** 2), x), diag, atol=1e-12)
    assert np.all(np.isneginf(mvn_log_prob(mu, np.zeros((2, 2)), x)))


def test_mvn_correlated_against_closed_form():
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    r = np.array([0.7, -0.4])
    det = 2.0 * 1.0 - 0.36
    inv = np.array([[1.0, -0.6], [-0.6, 2.0]]) / det
    expected = -0.5 * (r @ inv @ r) - 0.5 * math.log(det) - math.log(2 * math.pi)
    assert mvn_log_prob(np.zeros(2), cov, r) == pytest.approx(expected, abs=1e-12)


# ------------------------------------------------------------------ softmax


@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_softmax_is_a_distribution(z):
    p = softmax(z)
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-12
    np.testing.assert_allclose(np.exp(log_softmax(z)), p, atol=1e-12)


@given(arrays(np.float64, st.integers(1, 6), elements=finite), st.floats(-1e3, 1e3))
def test_softmax_shift_invariant(z, c):
    np.testing.assert_allclose(softmax(z + c), softmax(z), atol=1e-9)


def test_softmax_extreme_and_empty():
    p = softmax(np.array([1000.0, 0.0, -1000.0]))
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)
    with pytest.raises(ConfigurationError):
        softmax(np.array([]))


# -------------------------------------------------------------------- affine


def test_affine_identity_and_apply():
    t = AffineTransform.identity(3)
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(affine_apply(t, x), x)
    t2 = AffineTransform(np.array([[2.0, 0.0], [1.0, 1.0]]), np.array([1.0, -1.0]))
    np.testing.assert_allclose(affine_apply(t2, np.array([1.0, 2.0])), [3.0, 2.0])


@given(arrays(np.float64, (2, 2), elements=st.floats(-3, 3)), arrays(np.float64, 2, elements=st.floats(-3, 3)),
       arrays(np.float64, (2, 2), elements=st.floats(-3, 3)), arrays(np.float64, 2, elements=st.floats(-3, 3)),
       arrays(np.float64, 2, elements=st.floats(-3, 3)))
def test_affine_composition(a1, b1, a2, b2, x):
    t1, t2 = AffineTransform(a1, b1), AffineTransform(a2, b2)
    np.testing.assert_allclose(affine_apply(t1.compose(t2), x), affine_apply(t1, affine_apply(t2, x)), atol=1e-9)


def test_affine_flat_and_dict_roundtrip():
    t = AffineTransform(np.arange(6.0).reshape(2, 3), np.array([1.0, 2.0]))
    u = AffineTransform.from_flat(t.flat(), 2, 3)
    np.testing.assert_array_equal(u.A, t.A)
    v = AffineTransform.from_dict(t.to_dict())
    np.testing.assert_array_equal(v.b, t.b)
    with pytest.raises(ConfigurationError):
        AffineTransform(np.zeros((2, 3)), np.zeros(3))
