import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from geomgap.geograph import build_graph, default_epsilon
from geomgap.manifold import circle, sample_points, flat_torus, sphere
from geomgap.spectral import (
    SparseHeat,
    certify_filter,
    eigen_perturbation_check,
    eigendecompose,
    freq_response,
    freq_response_deriv,
    heat_apply,
    matexp_oracle,
    propagator,
    spectral_distance,
    spectral_filter,
    tap_sum_filter,
    weyl_check,
)

L2 = np.array([[1.0, -1.0], [-1.0, 1.0]])


def _random_graph(seed, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(10, 100))
    g = build_graph(rng.uniform(size=(n, 2)), 0.35, 2)
    return g.laplacian / max(abs(g.laplacian).max(), 1.0)


# -- eigendecompose ---------------------------------------------------------


def test_two_by_two():
    np.testing.assert_allclose(eigendecompose(L2).eigenvalues, [0.0, 2.0], atol=1e-14)


def test_zero_matrix():
    assert np.all(eigendecompose(np.zeros((4, 4))).eigenvalues == 0)


def test_path_graph():
    L = np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]], float)
    np.testing.assert_allclose(eigendecompose(sp.csr_matrix(L)).eigenvalues, [0, 1, 3], atol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_basis_invariants(seed):
    L = _random_graph(seed, 150)
    b = eigendecompose(L)
    V, lam = b.eigenvectors, b.eigenvalues
    dense = L.toarray()
    assert np.all(np.diff(lam) >= 0)
    assert np.abs(V.T @ V - np.eye(b.n)).max() <= 1e-10
    assert np.linalg.norm(V @ np.diag(lam) @ V.T - dense) <= 1e-8 * np.linalg.norm(dense)
    idx = np.argmax(np.abs(V), axis=0)
    assert np.all(V[idx, np.arange(b.m)] > 0)


def test_first_eigenvalue_near_zero_when_connected():
    g = build_graph(sample_points(circle(), 500, 0), 0.1, 1)
    assert g.connected
    lam = eigendecompose(g.laplacian).eigenvalues
    assert abs(lam[0]) <= 1e-8 * np.linalg.norm(g.laplacian.toarray(), 2)


def test_dense_cap():
    with pytest.raises(ValueError, match="truncated"):
        eigendecompose(sp.identity(50, format="csr"), "full", dense_cap=10)


def test_truncated_matches_full():
    g = build_graph(sample_points(sphere(), 800, 1), 0.3, 2)
    full = eigendecompose(g.laplacian).eigenvalues[:15]
    part = eigendecompose(g.laplacian, 15)
    assert part.m == 15 and not part.full
    np.testing.assert_allclose(part.eigenvalues, full, rtol=1e-8, atol=1e-9)


# -- heat semigroup ---------------------------------------------------------


def test_heat_two_by_two():
    out = heat_apply(eigendecompose(L2), 1, np.array([1.0, 0.0]))
    e = math.exp(-2)
    np.testing.assert_allclose(out, [(1 + e) / 2, (1 - e) / 2], rtol=1e-14)


def test_heat_zero_steps_and_constants():
    b = eigendecompose(_random_graph(7, 60))
    x = np.random.default_rng(0).normal(size=60)
    np.testing.assert_array_equal(heat_apply(b, 0, x), x)
    g = build_graph(sample_points(circle(), 200, 0), 0.2, 1)
    bc = eigendecompose(g.laplacian)
    for k in range(1, 5):
        np.testing.assert_allclose(heat_apply(bc, k, np.ones(200)), 1.0, atol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_heat_matches_matexp(seed):
    L = _random_graph(100 + seed)
    b = eigendecompose(L)
    x = np.random.default_rng(seed).normal(size=b.n)
    for k in (1, 2, 3):
        got = heat_apply(b, k, x)
        want = matexp_oracle(L, x, k, tol=1e-12)
        assert np.linalg.norm(got - want) <= 1e-8 * np.linalg.norm(want)


def test_matexp_trivial_and_diagonal():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(matexp_oracle(np.eye(3), x, 0), x)
    d = np.array([0.0, 0.5, 7.0])
    np.testing.assert_allclose(matexp_oracle(np.diag(d), x, 2.0, tol=1e-13), np.exp(-2.0 * d) * x, rtol=1e-10)
    with pytest.raises(ValueError):
        matexp_oracle(np.eye(3), x, 1, tol=0)


def test_semigroup_and_energy():
    L = _random_graph(3, 80)
    b = eigendecompose(L)
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.normal(size=80)
        np.testing.assert_allclose(heat_apply(b, 2, x), heat_apply(b, 1, heat_apply(b, 1, x)), atol=1e-9)
        for k in range(6):
            assert np.linalg.norm(heat_apply(b, k, x)) <= np.linalg.norm(x) * (1 + 1e-12)


def test_spectral_path_equals_tap_sum():
    b = eigendecompose(_random_graph(11, 90))
    rng = np.random.default_rng(2)
    taps = rng.normal(size=5)
    x = rng.normal(size=(90, 3))
    np.testing.assert_allclose(spectral_filter(b, taps, x), tap_sum_filter(b, taps, x), atol=1e-10)


def test_sparse_heat_matches_dense():
    g = build_graph(sample_points(flat_torus(), 600, 4), 1.2, 2)
    b = eigendecompose(g.laplacian)
    sh = SparseHeat(g.laplacian)
    x = np.random.default_rng(3).normal(size=(600, 2))
    stack = sh.stack(x, 5)
    for k in range(5):
        want = heat_apply(b, k, x)
        assert np.abs(stack[k] - want).max() <= 1e-9 * max(1.0, np.abs(want).max())
    np.testing.assert_allclose(sh.apply(3, x), stack[3], atol=1e-12)


def test_propagator_switch():
    small = build_graph(sample_points(circle(), 100, 0), 0.2, 1).laplacian
    assert not isinstance(propagator(small), SparseHeat)
    assert isinstance(propagator(small, dense_max=50), SparseHeat)


# -- responses and certificates ---------------------------------------------


def test_freq_response_examples():
    lam = np.array([0.0, 0.3, 5.0])
    np.testing.assert_array_equal(freq_response([1.0, 0, 0], lam), 1.0)
    np.testing.assert_array_equal(freq_response_deriv([1.0, 0, 0], lam), 0.0)
    assert freq_response([0, 1], 0.0) == 1.0
    assert freq_response([0, 1], math.log(2)) == pytest.approx(0.5, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(taps=st.lists(st.floats(-3, 3), min_size=1, max_size=8), lam=st.floats(0.01, 10))
def test_derivative_matches_central_difference(taps, lam):
    h = 1e-5
    fd = (freq_response(taps, lam + h) - freq_response(taps, lam - h)) / (2 * h)
    assert freq_response_deriv(taps, lam) == pytest.approx(fd, abs=1e-8)


def test_certificates():
    assert certify_filter([1.0, 0, 0, 0], 1).c_l == 0.0
    cert = certify_filter([0.0, 1.0], 1, (1e-3, 50.0, 20000))
    assert cert.c_l == pytest.approx(4 * math.exp(-2), rel=1e-6)
    assert cert.c_l == pytest.approx(0.5413, abs=1e-4)
    taps = [0.3, -1.0, 0.5, 0.25]
    a, b = certify_filter(taps, 2), certify_filter(2 * np.array(taps), 2)
    assert b.c_h == pytest.approx(2 * a.c_h) and b.c_l == pytest.approx(2 * a.c_l)
    assert a.c_h >= 0 and a.c_l >= 0
    with pytest.raises(ValueError):
        certify_filter(taps, 1, (0.0, 1.0, 10))


# -- diagnostics ------------------------------------------------------------


def test_weyl_planted():
    for d in (1, 2, 3):
        slope, r2 = weyl_check(np.arange(1, 51) ** (2 / d), d, (1, 50))
        assert slope == pytest.approx(2 / d, abs=1e-12) and r2 == pytest.approx(1.0)
    slope, _ = weyl_check(np.full(20, 3.0), 1, (2, 20))
    assert slope == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        weyl_check(np.arange(10.0), 1, (1, 9))


@pytest.mark.xfail(strict=True, reason="indicator kernel saturates for k*eps > 1 at the default epsilon; "
                   "even the infinite-sample epsilon-graph spectrum fits a slope near 1.47 on this range")
def test_weyl_circle_graph():
    n = 2000
    g = build_graph(sample_points(circle(), n, 5), default_epsilon(n, 1), 1)
    slope, _ = weyl_check(eigendecompose(g.laplacian, 41), 1, (5, 40))
    assert abs(slope - 2.0) <= 0.15 * 2.0


def test_weyl_circle_matches_kernel_limit():
    # mode k of the epsilon-graph on the unit circle tends to 2a - 2 sin(ka)/k, a the arc of chord eps
    n = 2000
    eps = default_epsilon(n, 1)
    a = 2 * math.asin(eps / 2)
    k = np.arange(1, 42) // 2
    limit = np.where(k > 0, 2 * a - 2 * np.sin(k * a) / np.maximum(k, 1), 0.0)
    want, _ = weyl_check(limit, 1, (5, 40))
    slopes = [weyl_check(eigendecompose(build_graph(sample_points(circle(), n, s), eps, 1).laplacian, 41), 1,
                         (5, 40))[0] for s in range(3)]
    assert abs(np.mean(slopes) - want) <= 0.2 * want


def test_weyl_sphere_graph():
    n = 2000
    g = build_graph(sample_points(sphere(), n, 0), default_epsilon(n, 2), 2)
    slope, r2 = weyl_check(eigendecompose(g.laplacian, 61), 2, (10, 60))
    assert abs(slope - 1.0) <= 0.15 and r2 > 0.9


def test_perturbation_ratios():
    lam = np.array([0.0, 0.5, 0.5, 2.0, 2.0])
    np.testing.assert_array_equal(eigen_perturbation_check(lam, lam, 0.1, 5), 0.0)
    r = eigen_perturbation_check(lam, lam * 1.1, 0.1, 5)
    assert np.all(r <= 1.0)
    with pytest.raises(ValueError):
        eigen_perturbation_check(lam, lam, 0.0, 3)
    with pytest.raises(ValueError):
        eigen_perturbation_check(lam, lam, 0.1, 6)


def test_spectral_distance_examples():
    lam = np.linspace(0, 5, 20)
    assert spectral_distance(lam, lam, 20) == 0.0
    assert spectral_distance(lam, lam + 0.25, 20) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        spectral_distance(lam, lam, 21)


def test_spectral_distance_circle_vs_sphere_is_stable():
    n, vals = 1000, []
    for seed in range(3):
        a = build_graph(sample_points(circle(), n, seed), default_epsilon(n, 1), 1)
        b = build_graph(sample_points(sphere(), n, seed), default_epsilon(n, 2), 2)
        vals.append(spectral_distance(eigendecompose(a.laplacian, 10), eigendecompose(b.laplacian, 10), 10))
    vals = np.array(vals)
    assert np.all(vals > 0)
    assert (vals.max() - vals.min()) / vals.mean() <= 0.2


def test_circle_eigenvalue_pattern():
    want = np.array([1.0, 4.0, 4.0, 9.0])
    errs = []
    for n in (500, 1000, 2000):
        g = build_graph(sample_points(circle(), n, 0), default_epsilon(n, 1), 1)
        lam = eigendecompose(g.laplacian, 7).eigenvalues
        ratios = lam[2:6] / lam[1]
        errs.append(float(np.max(np.abs(ratios - want) / want)))
    assert errs[-1] <= 0.1
    assert errs[0] >= errs[1] >= errs[2], errs
