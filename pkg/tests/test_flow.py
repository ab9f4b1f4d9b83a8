import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acsweep.ac_energy import first_variation
from acsweep.flow import (
    RHS_ROUNDOFF,
    BarrierError,
    FlowOptions,
    ForcedFlow,
    ImplicitSolver,
    build_barrier,
    comparison_monitor,
    mollify,
    relax_to_plus_one,
    replay,
    run_pair,
    run_to_stationary,
)
from acsweep.manifold_scenarios import cells_for_eps, make_scenario
from acsweep.sweepout import SweepoutBuilder
from acsweep.wells_profiles import STANDARD_WELL, forced_constant, mu_eps

EPS = 0.06


@pytest.fixture(scope="module")
def axi():
    n1 = cells_for_eps(3.0, EPS)
    return make_scenario("sphere2", 3.0, n1 + n1 % 2, 1)


@pytest.fixture(scope="module")
def barrier(axi):
    b = SweepoutBuilder(axi, EPS, None)
    return b, build_barrier(b, g_top=np.ones(axi.grid.shape))


@pytest.fixture(scope="module")
def pair(axi, barrier):
    b, bar = barrier
    low = ForcedFlow(axi.grid, EPS, b.mu)
    up = ForcedFlow(axi.grid, EPS, b.mu)
    h0 = np.minimum(1.0, bar.m + 0.3)
    return run_pair(low, up, bar.m, h0, log_every=0), h0, up


@pytest.mark.parametrize("name,n1,n2", [("sphere2", 120, 32), ("sphere2", 120, 1), ("sphere3", 60, 30)])
def test_solver_residual(name, n1, n2, rng):
    g = make_scenario(name, 3.0, n1, n2).grid
    s = ImplicitSolver(g, 0.05)
    r = rng.standard_normal(g.shape)
    for c in (0.3, 40.0):
        x = s.solve(r, c)
        res = c * x - 0.05 * g.laplacian(x) - r
        assert float(np.abs(res).max()) <= 1e-10 * float(np.abs(r).max()) * max(1.0, c)


def test_solver_rejects_periodic_x1():
    from acsweep.flow import FlowError

    with pytest.raises(FlowError):
        ImplicitSolver(make_scenario("torus", 3.0, 40, 24).grid, 0.05)


def test_forced_constant_is_stationary(axi):
    mu = mu_eps(EPS)
    k = forced_constant(STANDARD_WELL, EPS, mu)
    assert STANDARD_WELL.w1(np.array(k)) == pytest.approx(EPS * mu, rel=1e-12)
    flow = ForcedFlow(axi.grid, EPS, mu)
    res = run_to_stationary(flow, axi.grid.constant(k))
    assert res.dts == []
    assert res.constant and abs(res.limit_value - k) < 1e-12


def test_zero_start_increases(axi):
    mu = mu_eps(EPS)
    flow = ForcedFlow(axi.grid, EPS, mu)
    st0 = flow.state(axi.grid.constant(0.0))
    assert st0.monitors["minRHS"] == pytest.approx(mu)
    st1, ok = flow.step(st0, 0.01)
    assert ok and np.all(st1.u > 0)


def test_barrier_invariants(barrier):
    b, bar = barrier
    assert bar.slack >= b.mu / 5
    assert bar.below_top
    assert bar.rho0 == pytest.approx(EPS**2)
    fv = first_variation(bar.grid, bar.m, EPS, b.mu)
    assert float(fv.min()) == bar.slack
    # closeness to G0 - rho0 at the accepted radius
    g0 = b.G0(bar.grid)
    lip = float(bar.grid.grad_norm(g0).max())
    assert float(np.abs(bar.m - g0).max()) <= bar.rho0 + lip * bar.delta + bar.delta**2


def test_barrier_fails_below_minus_one(axi):
    b = SweepoutBuilder(axi, EPS, None)
    with pytest.raises(BarrierError):
        build_barrier(b, g_top=np.full(axi.grid.shape, -1.0), halvings=2)


def test_pair_run_properties(pair, axi):
    res, h0, up = pair
    k = forced_constant(STANDARD_WELL, EPS, mu_eps(EPS))
    low, high = res.lower, res.upper
    assert res.ordered and res.first_violation is None
    assert low.constant and abs(low.limit_value - k) <= 1e-6
    assert high.constant and abs(high.limit_value - k) <= 1e-6
    for r in (low, high):
        f = r.series("forcedEnergy")
        assert np.all(np.diff(f) <= 1e-11 * np.maximum(1.0, np.abs(f[:-1])))
        assert r.series("umin").min() >= -2 and r.series("umax").max() <= 2
    assert np.all(low.series("minRHS") > -RHS_ROUNDOFF)
    assert np.all(np.diff(low.series("umin")) >= -1e-14)


def test_replay_reproduces_trajectory(pair):
    res, h0, up = pair
    n = len(res.upper.dts)
    out = dict(replay(up, h0, res.upper.dts, {0, n // 3, n}))
    assert np.array_equal(out[0], h0)
    assert np.allclose(out[n], res.upper.limit, atol=1e-12)


def test_relax_from_forced_constant(axi):
    k = forced_constant(STANDARD_WELL, EPS, mu_eps(EPS))
    r = relax_to_plus_one(axi.grid, EPS, k)
    vals = r.series("umax")
    assert abs(r.limit_value - 1.0) <= 1e-6
    assert np.all(np.diff(vals) <= 0)


def test_sampled_and_csv(pair, tmp_path):
    res = pair[0].upper
    s = res.sampled()
    t = [r.time for r in s]
    assert t[0] == 0 and t[-1] == res.records[-1].time
    assert np.all(np.diff(t) > 0)
    res.write_csv(tmp_path / "h.csv")
    head = (tmp_path / "h.csv").read_text().splitlines()[0]
    assert head == "time,forcedEnergy,acEnergy,minRHS,max_abs_u_minus_limit"


def test_stationarity_timeout(axi):
    flow = ForcedFlow(axi.grid, EPS, mu_eps(EPS))
    from acsweep.flow import FlowError

    with pytest.raises(FlowError):
        run_to_stationary(flow, axi.grid.constant(-0.5), FlowOptions(t_max=0.05))


def test_comparison_monitor_examples(rng):
    x = rng.uniform(-1, 1, (6, 5))
    assert not comparison_monitor([x], [x])
    assert comparison_monitor([x, x - 0.1], [x + 0.1, x])
    assert not comparison_monitor([x, x], [x + 0.1, x])
    assert comparison_monitor([x], [x], atol=1e-12)
    with pytest.raises(ValueError):
        comparison_monitor([x], [x, x])
    with pytest.raises(ValueError):
        comparison_monitor([x], [x[:, :2]])


@settings(max_examples=15, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1), st.floats(min_value=1e-3, max_value=0.3))
def test_ordering_preserved_for_random_ordered_pairs(seed, gap):
    # path fields live in [-1, 1]; there the shift W''(1) keeps the update monotone
    r = np.random.default_rng(seed)
    g = make_scenario("sphere2", 3.0, 60, 16).grid
    eps = 0.2
    flow = ForcedFlow(g, eps, mu_eps(eps))
    modes = r.standard_normal((4, 3))
    a = sum(modes[i, 0] * np.cos((i + 1) * g.x1) * np.cos(int(modes[i, 1] > 0) * g.x2) for i in range(4))
    a = np.clip(0.5 * a, -1.0, 1.0 - 2 * gap)
    b = a + gap * (1 + r.uniform(0, 1, g.shape))
    sa, sb = flow.state(a), flow.state(b)
    traj_a, traj_b = [a], [b]
    for _ in range(25):
        sa, _ = flow.step(sa, 0.01)
        sb, _ = flow.step(sb, 0.01)
        traj_a.append(sa.u)
        traj_b.append(sb.u)
    assert comparison_monitor(traj_a, traj_b)


def test_mollify_on_folded_chart_matches_full():
    full = make_scenario("sphere2", 3.0, 120, 64)
    fold = make_scenario("sphere2", 3.0, 120, 64, folded=True)
    u = np.cos(full.grid.x1) ** 2 * np.cos(full.grid.x2) ** 2 + 0 * full.grid.x2
    uf = fold.restrict(u)
    a = mollify(full, u, 0.4)
    b = fold.expand(mollify(fold, uf, 0.4))
    assert np.allclose(a, b, atol=1e-12)
