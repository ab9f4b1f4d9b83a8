import math

import numpy as np
import pytest

from acsweep.manifold_scenarios import make_scenario
from acsweep.sweepout import (
    SweepoutBuilder,
    SweepoutError,
    export_trace_bundle,
    fitted_constant,
    ordering_check,
    segment_close_hole,
    segment_hole_deform,
    segment_to_minus_one,
)


@pytest.fixture(scope="module")
def fields(s2_builder):
    b = s2_builder
    t0 = b.plan.t0
    return {
        "G0": b.G0(),
        "f": b.f(),
        "g_mid": b.g_t(0.5 * t0),
        "g_t0": b.g_t(t0),
        "g_close_mid": b.g_close(0.5),
        "g_top": b.g_top(),
    }


def test_G0_profile_values(s2_builder):
    b = s2_builder
    d = np.array([0.0, b.width, 2 * b.width + 1e-9, 2 * b.width + 0.5])
    g = b.scenario.grid
    # evaluate G0 through its profile at chosen distances
    from acsweep.wells_profiles import fold

    v = fold(b.profile, 0.0).value(d)
    assert v[0] == 1.0
    assert abs(v[1]) < 1e-12
    assert v[2] == -1.0 and v[3] == -1.0
    assert g.shape == b.G0().shape


def test_G0_energy_close_to_double_area(s2_builder, s2_plan):
    e = s2_builder.energy(s2_builder.G0())
    assert e <= 2 * s2_plan.surface_area


def test_tube_constraint_rejected(s2_plan):
    sc = make_scenario("sphere2", 3.0, 120, 8)
    with pytest.raises(SweepoutError):
        SweepoutBuilder(sc, 0.3, s2_plan)


def test_fields_lie_in_unit_interval(fields):
    for name, u in fields.items():
        assert u.min() >= -1.0 and u.max() <= 1.0, name


def test_f_is_minus_one_over_hole(s2_builder, fields):
    b = s2_builder
    a = np.broadcast_to(b.scenario.tangential_distance(), b.scenario.grid.shape)
    assert np.all(fields["f"][a <= b.plan.hole_radius] == -1.0)
    assert np.all(fields["g_mid"][a <= b.plan.hole_radius] == -1.0)
    assert np.all(fields["g_t0"][a <= b.plan.hole_radius] == -1.0)


def test_f_equals_G0_away_from_doubled_hole(s2_builder, fields):
    b = s2_builder
    a = np.broadcast_to(b.scenario.tangential_distance(), b.scenario.grid.shape)
    far = a >= b.plan.d_radius
    assert np.allclose(fields["f"][far], fields["G0"][far], atol=1e-14)


def test_closed_hole_is_plus_one_on_M(s2_builder, fields):
    b = s2_builder
    s = b.scenario.normal_coordinate()
    # nodes nearest to M sit half a cell off it
    on_m = np.broadcast_to(np.abs(s) <= 0.51 * b.scenario.grid.h, b.scenario.grid.shape)
    assert on_m.any()
    assert np.all(fields["g_top"][on_m] >= 1.0 - 1e-4)


def test_chaining(s2_builder, fields):
    b = s2_builder
    assert np.array_equal(b.f_r(0.0), fields["f"])
    assert np.array_equal(b.g_t(0.0), fields["f"])
    assert np.array_equal(b.g_close(0.0), fields["g_t0"])
    assert np.all(b.f_r(2 * b.width) == -1.0)


def test_ordering_examples(fields):
    G0, top = fields["G0"], fields["g_top"]
    assert ordering_check(G0, top)
    assert ordering_check(G0, G0)
    assert not ordering_check(top, G0)
    with pytest.raises(ValueError):
        ordering_check(G0, G0[:, :1])


def test_hole_cutoff_penalty(s2_builder):
    chk = s2_builder.check_hole_cutoff()
    assert chk["ok"]
    # tangential gradient of f over the transition annulus: eps |grad_q f|^2 <= C eps |log eps|^2 / R^2
    b = s2_builder
    grad = b.scenario.grid.grad_norm(b.f())
    bound = b.eps * (3 * abs(math.log(b.eps))) ** 2 / b.plan.hole_radius**2
    assert float((b.eps * grad**2).max()) <= 50 * bound / b.eps


@pytest.mark.parametrize("ctor", [segment_to_minus_one, segment_hole_deform, segment_close_hole])
def test_segment_bounds_small(s2_builder, ctor):
    tr = ctor(s2_builder, 8)
    c = tr.certificate
    slack = c.get("slack", c.get("slack_uniform"))
    assert slack <= 0.0
    assert len(tr.energy) == 9


def test_to_minus_one_ends_at_zero_energy(s2_builder):
    tr = segment_to_minus_one(s2_builder, 8)
    assert tr.energy[-1] == 0.0
    assert tr.certificate["final_energy"] == 0.0


def test_continuity_refines_on_linear_segment(s2_builder):
    tr = segment_to_minus_one(s2_builder, 64)
    assert 1.6 <= tr.refinement_ratio <= 2.4


def test_folded_builder_matches_full(s2_builder, s2_folded_builder):
    fb = s2_folded_builder
    full = s2_builder
    t = 0.5 * full.plan.t0
    assert np.allclose(fb.scenario.expand(fb.g_t(t)), full.g_t(t), atol=1e-12)
    assert fb.energy(fb.g_top()) == pytest.approx(full.energy(full.g_top()), rel=1e-10)


def test_fitted_constant():
    assert fitted_constant([-3.0, -1.0]) == 0.0
    assert fitted_constant([0.5, 2.0, -1.0]) == 2.0
    assert fitted_constant([]) == 0.0


def test_trace_bundle_export(s2_builder, tmp_path):
    tr = segment_to_minus_one(s2_builder, 4)
    export_trace_bundle([tr], tmp_path, {"eps": 0.04})
    assert (tmp_path / "toMinusOne.csv").read_text().startswith("parameter,energy,w12_step")
    assert "toMinusOne" in (tmp_path / "segments.json").read_text()
