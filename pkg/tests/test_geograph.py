import math
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from geomgap.geograph import (
    PointCloud,
    PointCloudParseError,
    build_graph,
    build_graph_bruteforce,
    default_epsilon,
    edge_weight,
    gaussian_jitter,
    limit_scale,
    load_point_cloud,
    perturb_edges,
    perturb_features,
    subsample,
    unit_ball_volume,
    write_point_cloud,
)
from geomgap.manifold import circle, sample_points, sphere

FIXTURES = Path(__file__).parent / "fixtures"


def _dense(m):
    return m.toarray() if sp.issparse(m) else np.asarray(m)


# -- weights ----------------------------------------------------------------


def test_unit_ball_volumes():
    assert unit_ball_volume(1) == pytest.approx(2.0)
    assert unit_ball_volume(2) == pytest.approx(math.pi)
    assert unit_ball_volume(3) == pytest.approx(4 * math.pi / 3)


def test_weight_for_close_pair_in_two_dimensions():
    pts = np.zeros((100, 3))
    pts[:, 0] = np.arange(100) * 10.0  # far apart
    pts[1] = pts[0] + [0.05, 0.0, 0.0]
    g = build_graph(pts, 0.1, 2)
    assert g.weights[0, 1] == pytest.approx(math.pi / (4 * 100 * 0.1**4), rel=1e-12)
    assert g.weights[0, 1] == pytest.approx(78.5398163397, rel=1e-10)
    assert g.weights[0, 1] == edge_weight(100, 0.1, 2)


def test_pair_beyond_epsilon_has_no_edge():
    g = build_graph(np.array([[0.0, 0.0], [0.2, 0.0]]), 0.1, 1)
    assert g.weights.nnz == 0
    assert g.has_isolated and not g.connected


def test_boundary_distance_is_included():
    pts = np.array([[0.0, 0.0], [0.25, 0.0], [0.0, 0.5]])
    g = build_graph(pts, 0.25, 1)
    assert g.weights[0, 1] > 0 and g.weights[0, 2] == 0


def test_duplicate_points_do_not_self_loop():
    g = build_graph(np.array([[0.0, 0.0], [0.0, 0.0], [0.1, 0.0]]), 0.5, 1)
    assert np.all(g.weights.diagonal() == 0)
    assert g.weights[0, 1] == 0  # distance 0 is excluded


@pytest.mark.parametrize("m,eps", [(circle(), 0.3), (sphere(), 0.4)])
def test_laplacian_identities(m, eps):
    g = build_graph(sample_points(m, 300, 1), eps, m.dim)
    W, L = g.weights, g.laplacian
    assert (W != W.T).nnz == 0
    assert np.all(W.diagonal() == 0)
    np.testing.assert_allclose(L @ np.ones(g.n), 0.0, atol=1e-12 * abs(L).max())
    np.testing.assert_allclose(_dense(L), np.diag(_dense(W).sum(axis=1)) - _dense(W), rtol=0, atol=1e-14)


def test_laplacian_psd_on_random_graphs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 200))
        pts = rng.uniform(size=(n, int(rng.integers(1, 4))))
        g = build_graph(pts, float(rng.uniform(0.05, 0.6)), int(rng.integers(1, 4)))
        L = _dense(g.laplacian)
        assert np.linalg.eigvalsh(L).min() >= -1e-8 * max(np.linalg.norm(L, 2), 1e-300)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 80), M=st.integers(1, 4), eps=st.floats(0.01, 1.5), d=st.integers(1, 3),
       seed=st.integers(0, 1000))
def test_kdtree_matches_bruteforce(n, M, eps, d, seed):
    pts = np.random.default_rng(seed).uniform(size=(n, M))
    a = build_graph(pts, eps, d)
    b = build_graph_bruteforce(pts, eps, d)
    assert (a.weights != b.weights).nnz == 0
    assert a.n_components == b.n_components and a.n_isolated == b.n_isolated


def test_grid_points_exactly_at_epsilon():
    pts = np.array([[i * 0.125, j * 0.125] for i in range(6) for j in range(6)])
    a = build_graph(pts, 0.125, 2)
    b = build_graph_bruteforce(pts, 0.125, 2)
    assert (a.weights != b.weights).nnz == 0
    assert a.n_edges == 2 * 6 * 5


def test_construction_is_deterministic():
    pts = sample_points(sphere(), 400, 2)
    a, b = build_graph(pts, 0.3, 2), build_graph(pts, 0.3, 2)
    for x, y in [(a.weights, b.weights), (a.laplacian, b.laplacian)]:
        assert np.array_equal(x.indptr, y.indptr)
        assert np.array_equal(x.indices, y.indices)
        assert np.array_equal(x.data, y.data)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        build_graph(np.zeros((3, 2)), 0.0, 1)
    with pytest.raises(ValueError):
        build_graph(np.zeros((3, 2)), 0.1, 0)
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan]]))


def test_limit_scale_circle():
    assert limit_scale(1) == pytest.approx((2 / 3) ** 2)


# -- epsilon rule -----------------------------------------------------------


def test_default_epsilon_ratio():
    r = default_epsilon(100, 2, 0.1, 1.0) / default_epsilon(1600, 2, 0.1, 1.0)
    assert r == pytest.approx(16 ** (1 / 6), rel=1e-14)
    assert r == pytest.approx(1.587401, rel=1e-6)


def test_default_epsilon_monotone_in_delta():
    vals = [default_epsilon(500, 1, delta) for delta in (0.5, 0.1, 0.01, 0.001)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_default_epsilon_scale_override():
    base = default_epsilon(1000, 2)
    assert default_epsilon(1000, 2, scale=0.001) == pytest.approx(0.001 * base, rel=1e-15)


@pytest.mark.parametrize("kw", [dict(delta=0.0), dict(delta=1.0), dict(c=0.0)])
def test_default_epsilon_validation(kw):
    with pytest.raises(ValueError):
        default_epsilon(100, 1, **kw)
    with pytest.raises(ValueError):
        default_epsilon(1, 1)


# -- perturbations ----------------------------------------------------------


def test_feature_perturbation_counts():
    x = np.random.default_rng(0).normal(size=(30, 128)) + 5.0
    np.testing.assert_array_equal(perturb_features(x, 0.0, 1), x)
    np.testing.assert_array_equal(perturb_features(x, 1.0, 1), 0.0)
    half = perturb_features(x, 0.5, 1)
    zeroed = np.all(half == 0, axis=0)
    assert zeroed.sum() == 64
    np.testing.assert_array_equal(half[:, ~zeroed], x[:, ~zeroed])
    np.testing.assert_array_equal(perturb_features(x, 0.5, 1), half)


def test_edge_perturbation():
    g = build_graph(sample_points(circle(), 200, 3), 0.2, 1)
    E = g.n_edges
    same = perturb_edges(g, 0.0, 0)
    assert (same.laplacian != g.laplacian).nnz == 0
    assert perturb_edges(g, 1.0, 0).laplacian.nnz == 0
    for frac in (0.1, 0.37, 0.5):
        h = perturb_edges(g, frac, 4)
        assert h.n_edges == E - math.floor(frac * E)
        assert (h.weights != h.weights.T).nnz == 0
        np.testing.assert_allclose(h.laplacian @ np.ones(h.n), 0.0, atol=1e-9)
        # surviving edges keep their weight
        assert set(np.unique(h.weights.data)) <= set(np.unique(g.weights.data))


def test_perturbation_fraction_validated():
    with pytest.raises(ValueError):
        perturb_features(np.ones((2, 2)), 1.5, 0)


def test_jitter_zero_is_identity():
    pts = sample_points(sphere(), 50, 0)
    np.testing.assert_array_equal(gaussian_jitter(pts, 0.0, 1).points, pts)


def test_jitter_moments():
    gamma = 0.05
    n = 100000
    base = np.zeros((n, 3))
    shift = gaussian_jitter(base, gamma, 9).points
    var = 2 * gamma
    se_mean = math.sqrt(var / n)
    # variance of the sample variance of a normal is 2 var^2 / (n - 1)
    se_var = math.sqrt(2 * var**2 / (n - 1))
    assert np.all(np.abs(shift.mean(axis=0) - gamma) < 3 * se_mean)
    assert np.all(np.abs(shift.var(axis=0, ddof=1) - var) < 3 * se_var)


# -- files ------------------------------------------------------------------


def test_cube_fixture():
    cloud = load_point_cloud(FIXTURES / "cube.off")
    assert cloud.n == 8
    want = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], float)
    np.testing.assert_array_equal(cloud.points, want)


def test_minimal_off_round_trip(tmp_path):
    src = FIXTURES / "triangle.off"
    cloud = load_point_cloud(src)
    out = tmp_path / "t.off"
    write_point_cloud(cloud, out)
    again = load_point_cloud(out)
    assert np.array_equal(again.points, cloud.points)
    assert out.read_text() == "OFF\n3 0 0\n0.0 0.0 0.0\n1.0 0.0 0.0\n0.0 1.0 0.0\n"


def test_csv_with_header():
    cloud = load_point_cloud(FIXTURES / "points.csv")
    np.testing.assert_array_equal(cloud.points, [[0.1, -2.5, 3.0], [1e-3, 4.25, -0.0], [7.0, 8.125, 9.5]])


@pytest.mark.parametrize("name", ["cube_cloud.off", "sphere_cloud.off", "points.csv", "cube.off"])
def test_fixture_round_trip_bit_exact(tmp_path, name):
    cloud = load_point_cloud(FIXTURES / name)
    for fmt, ext in [("off", ".off"), ("csv", ".csv")]:
        out = tmp_path / f"copy{ext}"
        write_point_cloud(cloud, out, fmt)
        again = load_point_cloud(out)
        assert again.points.tobytes() == cloud.points.tobytes()


def test_writer_output_is_a_fixed_point(tmp_path):
    text = (FIXTURES / "sphere_cloud.off").read_text()
    out = tmp_path / "s.off"
    write_point_cloud(load_point_cloud(FIXTURES / "sphere_cloud.off"), out)
    assert out.read_text() == text


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(*[st.floats(allow_nan=False, allow_infinity=False, width=64)] * 3),
                min_size=1, max_size=20))
def test_round_trip_arbitrary_floats(tmp_path_factory, rows):
    pts = np.array(rows, dtype=float)
    d = tmp_path_factory.mktemp("rt")
    for name in ("a.off", "a.csv"):
        write_point_cloud(pts, d / name)
        assert load_point_cloud(d / name).points.tobytes() == pts.tobytes()


@pytest.mark.parametrize("name,line", [
    ("bad_vertex.off", 4),
    ("bad_header.off", 1),
    ("truncated.off", 5),
    ("bad_counts.off", 2),
    ("bad_row.csv", 3),
    ("bad_value.csv", 2),
])
def test_malformed_fixtures_report_line(name, line):
    with pytest.raises(PointCloudParseError) as info:
        load_point_cloud(FIXTURES / name)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)
    assert name in str(info.value)


def test_subsample_full_is_permutation():
    cloud = load_point_cloud(FIXTURES / "cube_cloud.off")
    sub = subsample(cloud, cloud.n, 3)
    key = lambda a: a[np.lexsort(a.T[::-1])]  # noqa: E731
    np.testing.assert_array_equal(key(sub.points), key(cloud.points))


def test_subsample_limits():
    cloud = load_point_cloud(FIXTURES / "cube.off")
    assert subsample(cloud, 5, 0).n == 5
    with pytest.raises(ValueError):
        subsample(cloud, 9, 0)
