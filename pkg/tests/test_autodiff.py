import numpy as np
import pytest

import dibo.autodiff as ad
from oracles import adam_scalar_recursion, fd_grad, fd_jacobian, rel_err


def test_grad_sum_of_squares():
    g = ad.grad(lambda x: ad.asum(x * x), np.array([1.0, 2.0]))
    assert np.allclose(g, [2.0, 4.0])


def test_grad_of_constant_is_zero():
    g = ad.grad(lambda x: np.float64(3.0), np.array([1.0, -2.0, 0.5]))
    assert np.array_equal(g, np.zeros(3))


def test_nested_grad_second_derivative_of_cube():
    def inner(x):
        return ad.grad(lambda z: ad.asum(z * z * z), x)

    g = ad.grad(lambda x: ad.asum(inner(x)), np.array([2.0]))
    assert np.allclose(g, [12.0])


def test_vjp_linear_map_row():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.vjp(lambda x: ad.matmul(ad.reshape(x, (1, 2)), A.T), np.array([1.0, 1.0]),
                 np.array([[1.0, 0.0]]))
    assert np.allclose(out, [1.0, 2.0])


def test_vjp_identity_returns_cotangent():
    v = np.array([0.3, -1.2, 7.0])
    out = ad.vjp(lambda x: x, np.ones(3), v)
    assert np.allclose(out, v)


def test_vjp_square():
    out = ad.vjp(lambda x: x * x, np.array([3.0]), np.array([1.0]))
    assert np.allclose(out, [6.0])


def test_vjp_shape_mismatch_errors():
    with pytest.raises(ad.AutodiffError):
        ad.vjp(lambda x: x, np.ones(3), np.ones(4))


def _random_composition(rng, d):
    W1 = rng.normal(size=(d, d)) / np.sqrt(d)
    b1 = rng.normal(size=(d,)) * 0.1
    W2 = rng.normal(size=(d, d)) / np.sqrt(d)

    def f(x):
        h = ad.gelu(ad.add(ad.matmul(ad.reshape(x, (1, d)), W1), b1))
        z = ad.erf(ad.matmul(h, W2))
        return ad.asum(ad.exp(ad.mul(-0.5, ad.square(z)))) + ad.asum(x * x)

    return f


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
@pytest.mark.parametrize("d", [2, 5, 8])
def test_grad_matches_finite_differences(seed, d):
    rng = np.random.default_rng(seed)
    f = _random_composition(rng, d)
    x = rng.normal(size=(d,))
    g = ad.grad(f, x)
    g_fd = fd_grad(lambda z: float(ad.raw_value(f(z))), x, h=1e-5)
    assert rel_err(g, g_fd) < 1e-5


@pytest.mark.parametrize("seed", [0, 1])
def test_vjp_rows_reconstruct_jacobian(seed):
    rng = np.random.default_rng(seed)
    d = 4
    W = rng.normal(size=(d, d))

    def f(x):
        return ad.gelu(ad.matmul(ad.reshape(x, (1, d)), W))

    x = rng.normal(size=(d,))
    rows = []
    for i in range(d):
        e = np.zeros((1, d))
        e[0, i] = 1.0
        rows.append(ad.vjp(f, x, e))
    jac = np.stack(rows)
    jac_fd = fd_jacobian(lambda z: np.asarray(ad.raw_value(f(z))).ravel(), x, h=1e-5)
    assert rel_err(jac, jac_fd) < 1e-5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_nested_grad_of_vjp_matches_fd(seed):
    rng = np.random.default_rng(seed)
    d = 3
    W = rng.normal(size=(d, d))
    v = rng.normal(size=(1, d))
    u = rng.normal(size=(d,))

    def field(x):
        return ad.gelu(ad.matmul(ad.reshape(x, (1, d)), W))

    def h(x):
        pullback = ad.vjp(field, x, v)
        return ad.asum(ad.mul(pullback, u))

    x = rng.normal(size=(d,))
    g = ad.grad(h, x)
    g_fd = fd_grad(lambda z: float(ad.raw_value(h(z))), x, h=1e-5)
    assert rel_err(g, g_fd) < 1e-4


def test_third_level_nesting_rejected():
    def innermost(x):
        return ad.grad(lambda z: ad.asum(z * z), x)

    def middle(x):
        return ad.asum(ad.grad(lambda z: ad.asum(innermost(z)), x))

    with pytest.raises(ad.AutodiffError, match="nesting"):
        ad.grad(middle, np.ones(2))


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(7)
    f = _random_composition(rng, 6)
    x = rng.normal(size=(6,))
    g1 = ad.grad(f, x)
    g2 = ad.grad(f, x)
    assert g1.tobytes() == g2.tobytes()


def test_nonfinite_intermediate_names_primitive():
    def f(x):
        return ad.asum(ad.log(x))  # log of a negative entry

    with pytest.raises(ad.NonFiniteError, match="log"):
        ad.grad(f, np.array([-1.0, 2.0]))


def test_unregistered_numpy_ufunc_rejected_at_construction():
    with pytest.raises(TypeError):
        ad.grad(lambda x: np.exp(x), np.ones(2))


def test_broadcast_add_bias_gradient():
    X = np.arange(6.0).reshape(3, 2)

    def f(b):
        return ad.asum(ad.add(X, b))

    g = ad.grad(f, np.zeros(2))
    assert np.allclose(g, [3.0, 3.0])


def test_concat_gradient_slices():
    c = np.ones((2, 3))

    def f(x):
        joint = ad.concat(x, c, axis=1)
        return ad.asum(ad.mul(joint, joint))

    x = np.arange(4.0).reshape(2, 2)
    g = ad.grad(f, x)
    assert np.allclose(g, 2 * x)


def test_grad_with_parameter_list():
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([0.5, -0.5])

    def f(params):
        w, bias = params
        y = ad.add(ad.matmul(np.ones((1, 2)), w), bias)
        return ad.asum(ad.square(y))

    gw, gb = ad.grad(f, [W, b])
    assert gw.shape == (2, 2) and gb.shape == (2,)
    g_fd = fd_grad(
        lambda bb: float(ad.raw_value(f([W, bb]))), b, h=1e-6)
    assert rel_err(gb, g_fd) < 1e-6


# --- Adam ---


def test_adam_first_step_magnitude_is_lr():
    params = [np.array([1.0])]
    state = ad.adam_init(params, lr=0.1)
    new_params, new_state = ad.adam_step(params, [np.array([4.0])], state)
    assert new_state.step == 1
    assert abs(new_params[0][0] - 1.0 + 0.1) < 1e-8


def test_adam_zero_gradient_keeps_params():
    params = [np.array([1.0, -2.0])]
    state = ad.adam_init(params, lr=0.1)
    new_params, _ = ad.adam_step(params, [np.zeros(2)], state)
    assert np.array_equal(new_params[0], params[0])


def test_adam_two_steps_match_hand_recursion():
    lr, g = 0.05, 3.0
    oracle = adam_scalar_recursion([g, g], lr=lr, p0=1.0)
    params = [np.array([1.0])]
    state = ad.adam_init(params, lr=lr)
    for expected in oracle:
        params, state = ad.adam_step(params, [np.array([g])], state)
        assert abs(params[0][0] - expected) < 1e-12
    deltas = np.diff([1.0] + oracle)
    assert np.all(np.abs(np.abs(deltas) - lr) < 1e-6)


def test_adam_nan_gradient_names_block():
    params = [np.ones(2), np.ones(3)]
    state = ad.adam_init(params, lr=0.1)
    bad = [np.ones(2), np.array([1.0, np.nan, 2.0])]
    with pytest.raises(ad.NonFiniteError, match="w2"):
        ad.adam_step(params, bad, state, names=["w1", "w2"])


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        ad.adam_init([np.ones(1)], lr=0.0)
