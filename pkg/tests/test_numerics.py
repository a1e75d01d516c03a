import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latephase.errors import DimensionError, NumericalError
from latephase.numerics import (REL_ERROR_DELTA, RngStream, check_gradient, finite_diff_grad,
                                gaussian_sample, kron, load_matrix_csv, relative_error,
                                save_matrix_csv, solve_linear, sqrt_factor)

from conftest import random_spd


def test_gaussian_sample_zero_factor_returns_mean(rng):
    mean = np.array([1.5, -2.0, 0.25])
    out = gaussian_sample(rng, mean, np.zeros((3, 3)))
    assert np.array_equal(out, mean)


def test_gaussian_sample_mean_within_clt_bound():
    gen = RngStream(7, 3)
    draws = gen.normal((10**6, 3))
    # identical stream through gaussian_sample for a few draws
    g2 = RngStream(7, 3)
    first = gaussian_sample(g2, np.zeros(3), np.eye(3))
    assert np.array_equal(first, draws[0])
    assert np.all(np.abs(draws.mean(axis=0)) < 5 / np.sqrt(10**6))


def test_gaussian_sample_standard_noise_variance():
    n = 5
    sigma = np.diag(np.arange(1, n + 1, dtype=float))
    factor = sqrt_factor(sigma)
    gen = RngStream(11, 0)
    draws = np.array([gaussian_sample(gen, np.zeros(n), factor) for _ in range(40000)])
    var = draws.var(axis=0)
    assert np.all(np.abs(var / np.arange(1, n + 1) - 1) < 0.05)


def test_gaussian_sample_dimension_mismatch(rng):
    with pytest.raises(DimensionError):
        gaussian_sample(rng, np.zeros(3), np.eye(2))


def test_rng_stream_reproducible_and_independent():
    a = RngStream(5, (1, 2)).normal(10)
    b = RngStream(5, (1, 2)).normal(10)
    c = RngStream(5, (1, 3)).normal(10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rng_children_order_independent():
    parent = RngStream(9, 4)
    x1 = parent.child(0).normal(4)
    y1 = parent.child(1).normal(4)
    parent2 = RngStream(9, 4)
    y2 = parent2.child(1).normal(4)
    x2 = parent2.child(0).normal(4)
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
    r = np.corrcoef(parent.child(0).normal(20000), parent.child(1).normal(20000))[0, 1]
    assert abs(r) < 0.03


def test_rng_state_roundtrip():
    s = RngStream(3, 1)
    s.normal(17)
    saved = s.get_state()
    expected = s.normal(5)
    restored = RngStream.from_state(saved)
    assert np.array_equal(restored.normal(5), expected)


def test_kron_identity_block_diagonal():
    B = np.array([[1.0, 2.0], [3.0, 4.0]])
    expected = np.zeros((4, 4))
    expected[:2, :2] = B
    expected[2:, 2:] = B
    assert np.array_equal(kron(np.eye(2), B), expected)


def test_kron_scalars():
    assert kron([[3.0]], [[-2.5]]).tolist() == [[-7.5]]


def test_kron_elementwise_definition():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = kron(a, b)
    for i in range(2):
        for j in range(2):
            for k in range(2):
                for l in range(2):
                    assert out[i * 2 + k, j * 2 + l] == a[i, j] * b[k, l]
    # frozen value from the elementwise definition
    assert out.tolist() == [[0, 1, 0, 2], [1, 0, 2, 0], [0, 3, 0, 4], [3, 0, 4, 0]]


def test_kron_size_guard():
    with pytest.raises(NumericalError):
        kron(np.zeros((2**8, 2**8)), np.zeros((2**8, 2**8)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(-5, 5))
def test_kron_bilinearity(seed, alpha):
    gen = np.random.default_rng(seed)
    a, b = gen.standard_normal((2, 3)), gen.standard_normal((3, 2))
    np.testing.assert_allclose(kron(alpha * a, b), alpha * kron(a, b), rtol=1e-14, atol=1e-14)


def test_solve_linear_identity_and_diagonal():
    b = np.array([1.0, -2.0, 3.5])
    assert np.array_equal(solve_linear(np.eye(3), b), b)
    assert np.array_equal(solve_linear(np.diag([2.0, 4.0]), np.array([2.0, 4.0])), [1.0, 1.0])


def test_solve_linear_residual_random_spd():
    gen = np.random.default_rng(0)
    for _ in range(20):
        a = random_spd(gen, 5, 1.0, 100.0)
        b = gen.standard_normal(5)
        x = solve_linear(a, b)
        assert np.max(np.abs(a @ x - b)) <= 1e-10 * max(1.0, np.max(np.abs(b)))


def test_solve_linear_rejects_singular_with_condition():
    with pytest.raises(NumericalError) as info:
        solve_linear(np.array([[1.0, 2.0], [2.0, 4.0]]), np.ones(2))
    assert hasattr(info.value, "condition")


def test_solve_linear_shape_errors():
    with pytest.raises(DimensionError):
        solve_linear(np.ones((2, 3)), np.ones(2))
    with pytest.raises(DimensionError):
        solve_linear(np.eye(2), np.ones(3))


def test_finite_diff_examples():
    g = finite_diff_grad(lambda x: 0.5 * float(x @ x), np.array([3.0]))
    assert abs(g[0] - 3.0) < 1e-8
    assert np.array_equal(finite_diff_grad(lambda x: 4.2, np.ones(3)), np.zeros(3))
    H = np.diag([1.0, 0.5])
    g = finite_diff_grad(lambda x: 0.5 * float(x @ H @ x), np.ones(2))
    np.testing.assert_allclose(g, [1.0, 0.5], atol=1e-9)


def test_finite_diff_error_is_second_order():
    f = lambda x: float(x[0] ** 3 + 2 * x[0] ** 4)
    x = np.array([0.7])
    exact = 3 * 0.49 + 8 * 0.343
    e1 = abs(finite_diff_grad(f, x, 1e-2)[0] - exact)
    e2 = abs(finite_diff_grad(f, x, 5e-3)[0] - exact)
    assert 3.5 < e1 / e2 < 4.5


def test_finite_diff_nonfinite_and_bad_step():
    with pytest.raises(NumericalError):
        finite_diff_grad(lambda x: np.inf, np.ones(1))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 0.0, np.ones(1), h=0)


def test_relative_error_symmetric_with_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 3.0) == relative_error(3.0, 1.0) == pytest.approx(0.5)
    assert REL_ERROR_DELTA == 1e-8
    assert relative_error(1e-10, 2e-10) < 1e-2


def test_check_gradient_report():
    H = np.array([[2.0, 0.3], [0.3, 1.0]])
    x = np.array([0.4, -1.2])
    report = check_gradient(lambda v: 0.5 * v @ H @ v, H @ x, x, 1e-4)
    assert report.passed(1e-8)
    bad = check_gradient(lambda v: 0.5 * v @ H @ v, H @ x + [0, 1], x, 1e-4)
    assert bad.argmax == 1 and not bad.passed(1e-2)


def test_matrix_csv_roundtrip(tmp_path):
    a = np.random.default_rng(1).standard_normal((4, 3)) * 1e-7
    save_matrix_csv(a, tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_text()
    assert text.count("\n") == 4 and "e" in text
    assert np.array_equal(load_matrix_csv(tmp_path / "m.csv"), a)


def test_sqrt_factor_general_psd():
    gen = np.random.default_rng(2)
    a = gen.standard_normal((4, 4))
    cov = a @ a.T
    L = sqrt_factor(cov)
    np.testing.assert_allclose(L @ L.T, cov, atol=1e-12)
    with pytest.raises(NumericalError):
        sqrt_factor(-np.eye(2) - 0.1)
