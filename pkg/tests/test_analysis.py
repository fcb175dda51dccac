import math

import numpy as np
import pytest
from scipy.integrate import quad

from voxfield.analysis import (
    QUASI_WORST_CASE,
    QUASI_WORST_CASE_ROUNDED,
    THETA_MAX,
    THETA_MIN,
    ErrorStats,
    esdf_error,
    expected_projective_residual,
    expected_quasi_residual,
    median_time,
    monte_carlo_merged_error,
    occupancy_lookup_count,
    projective_residual,
    quasi_euclidean_residual,
    surface_error,
    timing_harness,
    trajectory_lookup_counts,
    write_csv,
)
from voxfield.voxel_store import EsdfVoxel, Layer, LayerKind, TsdfVoxel


def test_projective_residual_examples():
    assert projective_residual(math.pi / 2, 1.0) == pytest.approx(0.0)
    assert projective_residual(math.pi / 6, 1.0) == pytest.approx(-0.5)


def test_expected_projective_matches_quadrature():
    num = quad(lambda t: projective_residual(t, 1.0), THETA_MIN, THETA_MAX)[0] / (THETA_MAX - THETA_MIN)
    assert expected_projective_residual(1.0) == pytest.approx(num, rel=1e-6)
    assert expected_projective_residual(1.0) == pytest.approx(-0.30135, abs=5e-5)
    assert expected_projective_residual(2.0) == pytest.approx(2 * expected_projective_residual(1.0))


def test_quasi_residual():
    assert quasi_euclidean_residual(0.0, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert quasi_euclidean_residual(math.pi / 4, 1.0) == pytest.approx(0.0, abs=1e-15)
    phis = np.linspace(0, math.pi / 4, 10001)
    worst = -quasi_euclidean_residual(phis, 1.0).min()
    assert worst == pytest.approx(QUASI_WORST_CASE, abs=1e-8)
    assert QUASI_WORST_CASE == pytest.approx(0.0824, abs=1e-4)
    assert abs(QUASI_WORST_CASE - QUASI_WORST_CASE_ROUNDED) < 0.005
    num = quad(lambda p: quasi_euclidean_residual(p, 1.0), 0, math.pi / 4)[0] / (math.pi / 4)
    assert expected_quasi_residual(1.0) == pytest.approx(num, rel=1e-6)


def test_quasi_residual_matches_grid_path():
    # 26-connected path to (a, b) with a >= b: b diagonal steps then a - b straight steps
    for a, b in [(10, 3), (7, 7), (100, 41)]:
        phi = math.atan2(b, a)
        path = b * math.sqrt(2) + (a - b)
        line = math.hypot(a, b)
        # the closed form is the relative error of the path for the in-plane case
        assert (line - path) / line == pytest.approx(quasi_euclidean_residual(phi, 1.0), abs=1e-12)


def test_monte_carlo_deterministic_and_shrinking():
    a = monte_carlo_merged_error(3, 20000, seed=5)
    assert a == monte_carlo_merged_error(3, 20000, seed=5)
    p95 = [monte_carlo_merged_error(n, 20000, seed=1)[0.95] for n in (1, 3, 10, 100)]
    assert p95 == sorted(p95, reverse=True)
    with pytest.raises(ValueError):
        monte_carlo_merged_error(0)
    with pytest.raises(ValueError):
        monte_carlo_merged_error(1, weighting="cubic")


def test_monte_carlo_scale_invariant():
    a = monte_carlo_merged_error(5, 5000, truncation=1.0, seed=2)
    b = monte_carlo_merged_error(5, 5000, truncation=0.3, seed=2)
    for q in a:
        assert a[q] == pytest.approx(b[q], rel=1e-9)


def test_lookup_examples():
    occ, worst, best = trajectory_lookup_counts(0.5, 0.1, 10.0, 2.0)
    assert worst == 20 and best == 5
    assert occ == math.ceil(9 / 8 * math.pi * 0.125 / 0.001) * 20
    assert occupancy_lookup_count(0.5, 0.1) == math.ceil(4 / 3 * math.pi * 0.125 / 0.001)
    assert trajectory_lookup_counts(0.5, 0.1, 10.0, 2.0, literal=True)[0] == math.ceil(9 / 8 * math.pi * 0.125 / 0.1) * 20
    with pytest.raises(ValueError):
        trajectory_lookup_counts(0, 0.1, 1, 1)


def test_lookup_grid_ordering():
    for r in np.arange(0.1, 1.01, 0.1):
        for v in np.arange(0.05, 0.501, 0.05):
            occ, worst, best = trajectory_lookup_counts(r, v, 10.0, 2.0)
            assert best <= worst <= occ


def test_error_stats():
    s = ErrorStats.from_errors(np.array([0.1, -0.1, 0.2]), n_unknown=1)
    assert s.rms == pytest.approx(math.sqrt(0.06 / 3))
    assert s.mean == pytest.approx(0.2 / 3)
    assert s.max == pytest.approx(0.2)
    assert s.count == 3 and s.unknown_fraction == 0.25
    assert ErrorStats.from_errors([], 0).unknown_fraction == 1.0


def test_esdf_error_examples():
    a = Layer(0.1, 8, LayerKind.ESDF)
    b = Layer(0.1, 8, LayerKind.ESDF)
    a.set_voxel((0, 0, 0), EsdfVoxel(1.0, True))
    b.set_voxel((0, 0, 0), EsdfVoxel(0.8, True))
    a.set_voxel((1, 0, 0), EsdfVoxel(0.5, True))
    b.set_voxel((1, 0, 0), EsdfVoxel(0.6, True))
    a.set_voxel((2, 0, 0), EsdfVoxel(0.5, True))  # unknown in b
    s = esdf_error(a, b)
    assert s.count == 2
    assert s.rms == pytest.approx(math.sqrt((0.04 + 0.01) / 2))
    assert s.unknown_fraction == pytest.approx(1 / 3)
    near = esdf_error(a, b, mask=lambda gt: np.abs(gt) < 0.7)
    assert near.count == 1 and near.mean == pytest.approx(-0.1)
    with pytest.raises(ValueError):
        esdf_error(a, Layer(0.1, 8))


def test_surface_error_clamps():
    layer = Layer(0.1, 8)
    for g in np.ndindex(4, 4, 4):
        layer.set_voxel(g, TsdfVoxel(0.9, 1.0))
    s = surface_error(layer, [[0.2, 0.2, 0.2], [5, 5, 5]], truncation=0.4)
    assert s.count == 1 and s.max == pytest.approx(0.4) and s.unknown_fraction == 0.5


def test_timing_and_csv(tmp_path):
    assert median_time(lambda: None, repeats=3) >= 0
    rows = timing_harness({"a": lambda: [0.1, 0.3, 0.2], "b": lambda: []})
    assert rows[0]["median_s"] == pytest.approx(0.2) and rows[0]["steps"] == 3
    assert math.isnan(rows[1]["median_s"])
    write_csv(rows, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "variant,steps,median_s,total_s" and len(lines) == 3
