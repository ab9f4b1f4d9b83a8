import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acsweep.manifold_scenarios import (
    GeometryError, area_decay_bound, dist_to_M, distance_laplacian_check, export_field, level_set_area,
    make_scenario, scenario_from_config, signed_dist_to_graph,
)


def test_sphere_grid_geometry(s2_unit):
    g = s2_unit.grid
    assert g.total_volume == pytest.approx(4 * math.pi, rel=1e-13)
    assert np.all(g.vol > 0)
    # the density vanishes at the poles like sin(theta)
    assert g.vol[0, 0] == pytest.approx(math.sin(g.ax1.nodes[0]), rel=1e-12)
    i = 100
    r = math.sin(g.ax1.nodes[i])
    assert np.allclose(g.metric(i, 0), np.diag([1.0, r * r]), atol=1e-15)


def test_sphere3_and_torus_volumes():
    s3 = make_scenario("sphere3", 2.0, 200, 40)
    assert s3.grid.total_volume == pytest.approx(2 * math.pi**2 * 2.0**3, rel=1e-12)
    t = make_scenario("torus", 1.5, 64, 32)
    assert t.grid.total_volume == pytest.approx((2 * math.pi * 1.5) ** 2, rel=1e-12)
    assert not t.ricci_positive and s3.ricci_positive


def test_laplacian_of_constant_vanishes(s2_unit):
    g = s2_unit.grid
    assert np.max(np.abs(g.laplacian(g.constant(3.7)))) < 1e-9


def test_laplacian_eigenfunction_second_order():
    errs = []
    for n1 in (100, 200, 400):
        g = make_scenario("sphere2", 1.0, n1, 8).grid
        u = np.cos(g.x1) * np.ones(g.shape)
        errs.append(float(np.max(np.abs(g.laplacian(u) + 2 * u))))
    assert errs[-1] < 1e-4
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_laplacian_is_symmetric(seed):
    g = make_scenario("sphere2", 2.0, 24, 12).grid
    r = np.random.default_rng(seed)
    u, v = r.normal(size=g.shape), r.normal(size=g.shape)
    a = np.sum(v * g.divergence_of_gradient(u))
    b = np.sum(u * g.divergence_of_gradient(v))
    assert a == pytest.approx(b, rel=1e-10, abs=1e-10)
    # and the quadratic form is minus the Dirichlet integral
    assert np.sum(u * g.divergence_of_gradient(u)) == pytest.approx(-g.dirichlet(u), rel=1e-10)


def test_distance_on_unit_sphere(s2_unit):
    g = s2_unit.grid
    df = dist_to_M(s2_unit)
    assert np.allclose(df.values, np.abs(g.x1 - math.pi / 2), atol=1e-14)
    assert df.lipschitz_ok
    # cut locus: the poles
    assert np.allclose(df.cut_gap, math.pi / 2 - df.values, atol=1e-14)


def test_distance_on_torus():
    sc = make_scenario("torus", 1.0, 200, 8)
    g = sc.grid
    th = np.mod(g.x1, 2 * math.pi)
    df = dist_to_M(sc)
    assert np.allclose(df.values, np.minimum(th, 2 * math.pi - th), atol=1e-12)
    assert df.lipschitz_ok


def test_distance_laplacian_nonpositive(s2_unit):
    worst, mask = distance_laplacian_check(s2_unit)
    assert worst <= 1e-3 and mask.sum() > 0
    # closed form on the unit sphere: Lap d = -tan d
    g = s2_unit.grid
    d = dist_to_M(s2_unit).values
    lap = g.laplacian(d)
    assert np.max(np.abs(lap[mask] + np.tan(d[mask]))) < 1e-3
    s3 = make_scenario("sphere3", 1.0, 628, 16)
    assert distance_laplacian_check(s3)[0] <= 1e-3


@pytest.mark.parametrize("t", [0.2, 0.5, 1.0])
def test_level_set_length(s2_unit, t):
    d = dist_to_M(s2_unit).values
    la = level_set_area(s2_unit, d, t)
    assert la.area == pytest.approx(4 * math.pi * math.cos(t), rel=0.01)


def test_level_set_limits_and_monotone(s2_unit):
    d = dist_to_M(s2_unit).values
    ts = [0.01, 0.2, 0.5, 1.0, 1.3]
    areas = [level_set_area(s2_unit, d, t).area for t in ts]
    assert np.all(np.diff(areas) < 0)
    assert areas[0] == pytest.approx(2 * s2_unit.surface.area, rel=0.01)


def test_area_decay_bound_holds():
    sc = make_scenario("sphere3", 1.0, 200, 8)
    for s0 in (0.1, 0.4):
        for t in (0.1, 0.3, 0.6):
            ratio = float(sc.area_element(s0 + t) / sc.area_element(s0))
            assert ratio <= area_decay_bound(sc, s0, t) + 1e-12


def test_projection_jacobian(s2_unit):
    sc = s2_unit
    assert float(sc.projection_jacobian(0.0)) == 1.0
    s = np.linspace(0.0, sc.surface.c_k, 200)[1:]
    J = sc.projection_jacobian(s)
    assert np.allclose(J, 1 / np.cos(s), rtol=1e-14)
    C = sc.surface.jacobian_constant
    assert np.all(np.abs(J - 1) <= 2 * C * s + 1e-12)
    assert np.all(np.abs(1 / J - 1) <= 2 * C * s + 1e-12)
    t = make_scenario("torus", 1.0, 16, 8)
    assert np.all(t.projection_jacobian(s) == 1.0)


def test_signed_distance_flat_graph(s2_unit):
    s = s2_unit.normal_coordinate()
    sd = signed_dist_to_graph(s2_unit, 0.2, 0.0, lambda a: np.zeros_like(a))
    assert np.allclose(sd, np.abs(s) - 0.2, atol=1e-14)


def test_signed_distance_bump_graph():
    sc = make_scenario("sphere2", 1.0, 314, 128)
    g = sc.grid

    def phi(a):
        return np.clip(1 - a, 0, None) ** 2

    c, t = 0.2, 0.1
    sd = signed_dist_to_graph(sc, c, t, phi)
    s = np.abs(sc.normal_coordinate())
    height = c + t * phi(sc.tangential_distance())
    # the graph lies above {s = c}
    assert np.all(sd <= s - c + 1e-12)
    # below the graph the distance is at most the vertical gap
    below = s < height
    assert np.all(sd[below] < 0) and np.all(sd[~below] >= 0)
    assert np.all(np.abs(sd) <= np.abs(s - height) + 1e-12)
    # nodes next to the graph see a distance below half a cell
    near = np.abs(s - height) < 0.5 * g.h
    assert np.all(np.abs(sd[near]) < 0.5 * g.h)


def test_graph_outside_tube_rejected(s2_unit):
    with pytest.raises(GeometryError):
        signed_dist_to_graph(s2_unit, 0.2, 5.0, lambda a: np.ones_like(a))


def test_folded_grid_matches_full():
    full = make_scenario("sphere2", 3.0, 120, 32)
    half = make_scenario("sphere2", 3.0, 120, 32, folded=True)
    assert half.grid.shape == (60, 16)
    assert half.grid.total_volume == pytest.approx(full.grid.total_volume, rel=1e-14)
    # an even field in s and in phi
    u = np.cos(2 * full.grid.x1) * np.cos(full.grid.x2)
    uh = half.restrict(u)
    assert np.allclose(half.expand(uh), u, atol=1e-14)
    assert half.grid.dirichlet(uh) == pytest.approx(full.grid.dirichlet(u), rel=1e-12)
    assert np.allclose(half.grid.laplacian(uh), half.restrict(full.grid.laplacian(u)), atol=1e-10)
    assert half.unfolded.grid.shape == full.grid.shape
    s3 = make_scenario("sphere3", 3.0, 120, 16, folded=True)
    assert s3.grid.total_volume == pytest.approx(2 * math.pi**2 * 27, rel=1e-12)
    with pytest.raises(GeometryError):
        make_scenario("torus", 1.0, 16, 8, folded=True)


def test_config_and_export(tmp_path):
    sc = scenario_from_config({"name": "sphere2", "radius": 2.0, "n1": 40, "n2": 8})
    assert sc.grid.shape == (40, 8) and sc.radius == 2.0
    u = np.arange(320, dtype=float).reshape(40, 8)
    p = export_field(sc, u, tmp_path / "u.bin")
    back = np.fromfile(p, dtype=np.float64).reshape(40, 8)
    assert np.array_equal(back, u)
    head = json.loads((tmp_path / "u.bin.json").read_text())
    assert head["shape"] == [40, 8] and head["dims"][0]["boundary"] == "pole"
    export_field(sc, u, tmp_path / "u.csv", fmt="csv")
    assert np.array_equal(np.loadtxt(tmp_path / "u.csv", delimiter=","), u)
