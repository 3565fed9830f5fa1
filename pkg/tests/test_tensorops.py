import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auxembed import tensorops as T


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_gelu_at_zero():
    assert T.gelu_exact(np.array([0.0]))[0] == 0.0


def test_gelu_derivative_at_zero():
    spec = T.LayerSpec("gelu")
    tape = T.GradTape()
    T.layer_forward(spec, {}, np.zeros((1, 1)), tape)
    _, gin = tape.backward(np.ones((1, 1)))
    assert gin[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_l2_normalize_3_4_5():
    y = T.layer_forward(T.LayerSpec("l2_normalize"), {}, np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(y, [[0.6, 0.8]], atol=1e-15)


def test_l2_normalize_jacobian_projects_orthogonally():
    # At x = [1, 0] the Jacobian is [[0, 0], [0, 1]].
    jac = np.empty((2, 2))
    for j in range(2):
        tape = T.GradTape()
        T.layer_forward(T.LayerSpec("l2_normalize"), {}, np.array([[1.0, 0.0]]), tape)
        g = np.zeros((1, 2))
        g[0, j] = 1.0
        _, gin = tape.backward(g)
        jac[j] = gin[0]
    np.testing.assert_allclose(jac, [[0.0, 0.0], [0.0, 1.0]], atol=1e-15)


def test_l2_normalize_zero_vector_rejected():
    with pytest.raises(ValueError, match="zero"):
        T.layer_forward(T.LayerSpec("l2_normalize"), {}, np.array([[0.0, 0.0]]))


def test_conv_sliding_window_sum():
    spec = T.LayerSpec("conv1d", in_dim=1, out_dim=1, kernel_size=3)
    params = {"weight": np.ones((1, 1, 3)), "bias": np.zeros(1)}
    x = np.arange(1.0, 6.0).reshape(1, 1, 5)
    y = T.layer_forward(spec, params, x)
    np.testing.assert_array_equal(y, [[[6.0, 9.0, 12.0]]])


def test_conv_identity_kernel_reproduces_input():
    rng = _rng(3)
    x = rng.standard_normal((2, 4, 11))
    w = np.zeros((4, 4, 3))
    for c in range(4):
        w[c, c, 1] = 1.0  # single 1 at the centre
    spec = T.LayerSpec("conv1d", in_dim=4, out_dim=4, kernel_size=3)
    y = T.layer_forward(spec, {"weight": w, "bias": np.zeros(4)}, x)
    np.testing.assert_array_equal(y, x[:, :, 1:-1])


def test_conv_shape_mismatch_reports_dims():
    spec = T.LayerSpec("conv1d", in_dim=3, out_dim=2, kernel_size=2)
    params = T.init_params(spec, _rng())
    with pytest.raises(T.ShapeMismatch, match="3"):
        T.layer_forward(spec, params, np.zeros((1, 5, 8)))


def test_linear_backward_matches_finite_differences():
    chain = [T.LayerSpec("linear", in_dim=7, out_dim=4)]
    assert T.grad_check(chain, seed=11) < 1e-6


def test_linear_input_gradient_matches_finite_differences():
    rng = _rng(5)
    spec = T.LayerSpec("linear", in_dim=6, out_dim=3)
    params = T.init_params(spec, rng)
    x = rng.standard_normal((2, 6))
    u = rng.standard_normal((2, 3))
    tape = T.GradTape()
    T.layer_forward(spec, params, x, tape)
    _, gin = tape.backward(u)
    h = 1e-5
    for idx in np.ndindex(x.shape):
        keep = x[idx]
        x[idx] = keep + h
        hi = np.sum(u * T.layer_forward(spec, params, x))
        x[idx] = keep - h
        lo = np.sum(u * T.layer_forward(spec, params, x))
        x[idx] = keep
        fd = (hi - lo) / (2 * h)
        assert abs(gin[idx] - fd) / (abs(gin[idx]) + abs(fd) + 1e-12) < 1e-6


def test_grad_check_identity_chain_is_exactly_zero():
    assert T.grad_check([T.LayerSpec("gelu")], seed=0) == 0.0


def test_grad_check_single_linear_seed0():
    assert T.grad_check([T.LayerSpec("linear", in_dim=5, out_dim=5)], seed=0) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_all_layer_kinds_grad_check(seed):
    h = 6
    chain = [
        T.LayerSpec("downsample_conv", in_dim=3, out_dim=h, kernel_size=4, stride=2),
        T.LayerSpec("conv1d", in_dim=h, out_dim=h, kernel_size=2),
        T.LayerSpec("gelu"),
        T.LayerSpec("conv1d", in_dim=h, out_dim=h, kernel_size=3),
        T.LayerSpec("gelu"),
        T.LayerSpec("skip_add"),
        T.LayerSpec("conv1d", in_dim=h, out_dim=4, kernel_size=3),
        T.LayerSpec("l2_normalize"),
    ]
    assert T.grad_check(chain, seed=seed) < 1e-4


def test_skip_add_returns_elementwise_sum():
    spec = T.LayerSpec("skip_add")
    a = np.ones((1, 2, 3))
    b = 2 * np.ones((1, 2, 3))
    np.testing.assert_array_equal(T.layer_forward(spec, {}, a, skip_input=b), 3 * np.ones((1, 2, 3)))


def test_skip_add_centre_crops_longer_input():
    a = np.zeros((1, 1, 3))
    b = np.arange(5.0).reshape(1, 1, 5)
    y = T.layer_forward(T.LayerSpec("skip_add"), {}, a, skip_input=b)
    np.testing.assert_array_equal(y, [[[1.0, 2.0, 3.0]]])


def test_tape_reuse_rejected():
    tape = T.GradTape()
    spec = T.LayerSpec("linear", in_dim=3, out_dim=2)
    params = T.init_params(spec, _rng())
    y = T.layer_forward(spec, params, np.ones((2, 3)), tape)
    tape.backward(np.ones_like(y))
    with pytest.raises(T.TapeReuseError):
        tape.backward(np.ones_like(y))


def test_forward_backward_deterministic():
    chain = [
        T.LayerSpec("conv1d", in_dim=2, out_dim=4, kernel_size=2),
        T.LayerSpec("gelu"),
        T.LayerSpec("conv1d", in_dim=4, out_dim=3, kernel_size=3),
        T.LayerSpec("l2_normalize"),
    ]

    def run(seed):
        rng = np.random.default_rng(seed)
        params = T.init_chain_params(chain, rng)
        x = rng.standard_normal((3, 2, 9))
        tape = T.GradTape()
        y = T.run_chain(chain, params, x, tape)
        grads, gin = tape.backward(np.ones_like(y))
        return y, grads, gin

    y1, g1, i1 = run(123)
    y2, g2, i2 = run(123)
    assert np.array_equal(y1, y2) and np.array_equal(i1, i2)
    for a, b in zip(g1, g2):
        if a is None:
            assert b is None
            continue
        for k in a:
            assert np.array_equal(a[k], b[k])


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_l2_normalize_unit_norm_property(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 5)) * 10.0 ** rng.integers(-3, 4)
    y = T.layer_forward(T.LayerSpec("l2_normalize"), {}, x)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_orderless_sum_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((3, 37)) * 10.0 ** rng.integers(-2, 3)
    p = rng.permutation(37)
    s, sp = T.orderless_sum(t), T.orderless_sum(t[:, p])
    assert np.array_equal(s, sp)
    np.testing.assert_allclose(s, t.sum(axis=1), rtol=0, atol=1e-8 * np.abs(t).max())
