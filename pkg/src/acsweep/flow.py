"""Forced Allen-Cahn gradient flow, the barrier below it and the last two segments.

The flow is eps du/dt = eps Lap u - W'(u)/eps + mu. Time stepping is
linearly implicit with a stabilising shift S = W''(1):

    (eps/dt + S/eps) (u+ - u) - eps Lap (u+ - u) = F(u),

F being the first variation. The linear solve is diagonalised along x2
(FFT or a generalised eigenbasis) and tridiagonal along x1.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from scipy.linalg import eigh, lapack

from .ac_energy import ac_energy, first_variation, w12_distance
from .manifold_scenarios import ChartGrid, Scenario
from .mollify import MollifierError, MollifierKernel
from .sweepout import SegmentTrace, SweepoutBuilder, _slack, trace_family
from .wells_profiles import STANDARD_WELL, DoubleWell, forced_constant

log = logging.getLogger(__name__)

# Once a trajectory has converged to the constant, F(u) and h - m are zero up
# to cancellation in the flux sums; these floors separate that from a sign change.
RHS_ROUNDOFF = 1e-10
ORDER_ROUNDOFF = 1e-12


class FlowError(RuntimeError):
    pass


class BarrierError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# linear solver


class ImplicitSolver:
    """Solves (c - eps Lap) x = r on a chart grid for any shift c > 0."""

    def __init__(self, grid: ChartGrid, eps: float):
        self.grid = grid
        self.eps = eps
        n1, n2 = grid.shape
        ax2 = grid.ax2
        uniform = (n2 > 1 and ax2.boundary == "periodic" and np.allclose(grid.w2, grid.w2[0])
                   and np.allclose(grid.c2, grid.c2_wrap))
        if uniform:
            self.mode = "fft"
            k = np.arange(n2 // 2 + 1)
            self.lam = -(grid.c2_wrap / grid.w2[0]) * (2 - 2 * np.cos(2 * math.pi * k / n2))
        else:
            self.mode = "eig"
            L2 = _second_difference(grid.c2, grid.c2_wrap, n2)
            self.lam, self.phi = eigh(L2, np.diag(grid.w2))
            self.to_modes = np.diag(grid.w2) @ self.phi
        if grid.ax1.boundary == "periodic":
            raise FlowError("periodic x1 axes are not supported by the tridiagonal solve")
        self._factors: dict[float, tuple] = {}

    def _factor(self, c: float):
        if c in self._factors:
            return self._factors[c]
        g, eps = self.grid, self.eps
        n1 = g.shape[0]
        K = len(self.lam)
        coup = np.zeros(n1)
        coup[:-1] += g.c1
        coup[1:] += g.c1
        diag = (c * g.w1[None, :] - eps * (g.w1 * g.inv_r2)[None, :] * self.lam[:, None]
                + eps * coup[None, :])
        off = np.tile(np.append(-eps * g.c1, 0.0), K)[:-1]  # no coupling across modes
        dl, d, du, du2, ipiv, info = lapack.dgttrf(off.copy(), diag.ravel(), off.copy())
        if info != 0:
            raise FlowError(f"tridiagonal factorisation failed (info={info})")
        if len(self._factors) > 8:
            self._factors.clear()
        self._factors[c] = (dl, d, du, du2, ipiv)
        return self._factors[c]

    def solve(self, r: np.ndarray, c: float) -> np.ndarray:
        g = self.grid
        n1, n2 = g.shape
        fac = self._factor(c)
        w = g.w1[:, None]
        if self.mode == "fft":
            rh = np.fft.rfft(r, axis=1) * w
            b = np.stack([rh.real.T.ravel(), rh.imag.T.ravel()], axis=1)
            x, info = lapack.dgttrs(*fac, b)
            K = rh.shape[1]
            xh = (x[:, 0] + 1j * x[:, 1]).reshape(K, n1).T
            return np.fft.irfft(xh, n=n2, axis=1)
        rh = (r @ self.to_modes) * w
        x, info = lapack.dgttrs(*fac, rh.T.reshape(-1, 1))
        return x.reshape(-1, n1).T @ self.phi.T


def _second_difference(coef: np.ndarray, wrap: float, n: int) -> np.ndarray:
    L = np.zeros((n, n))
    for j, c in enumerate(coef):
        L[j, j] -= c
        L[j + 1, j + 1] -= c
        L[j, j + 1] += c
        L[j + 1, j] += c
    if wrap and n > 1:
        L[0, 0] -= wrap
        L[-1, -1] -= wrap
        L[0, -1] += wrap
        L[-1, 0] += wrap
    return L


# ---------------------------------------------------------------------------
# flow


@dataclass
class FlowOptions:
    dt0: float | None = None  # default eps h
    dt_max: float | None = None  # default eps / 4
    grow_after: int = 20
    tol: float = 1e-8  # on ||du/dt||_L2 / vol^(1/2)
    const_tol: float = 1e-6
    t_max: float = 400.0
    max_steps: int = 200_000
    dt_min: float = 1e-14
    energy_rtol: float = 1e-11


@dataclass
class FlowState:
    u: np.ndarray
    time: float
    rhs: np.ndarray
    monitors: dict = field(default_factory=dict)


class ForcedFlow:
    def __init__(self, grid: ChartGrid, eps: float, mu: float, well: DoubleWell = STANDARD_WELL,
                 barrier: np.ndarray | None = None, solver: ImplicitSolver | None = None):
        self.grid, self.eps, self.mu, self.well = grid, float(eps), float(mu), well
        self.barrier = barrier
        self.solver = solver or ImplicitSolver(grid, eps)
        self.shift = float(well.w2(np.array(1.0)))

    def state(self, u: np.ndarray, time: float = 0.0) -> FlowState:
        rhs = first_variation(self.grid, u, self.eps, self.mu, self.well)
        e = ac_energy(self.grid, u, self.eps, self.well).total
        mon = {
            "acEnergy": e,
            "forcedEnergy": e - self.mu / (2 * self.well.sigma) * self.grid.integrate(u),
            "minRHS": float(rhs.min()),
            "maxRHS": float(rhs.max()),
            "umin": float(u.min()),
            "umax": float(u.max()),
            "speedL2": math.sqrt(self.grid.integrate((rhs / self.eps) ** 2)),
        }
        if self.barrier is not None:
            mon["distToBarrier"] = float((u - self.barrier).min())
        return FlowState(u, float(time), rhs, mon)

    def rhs(self, u: np.ndarray) -> np.ndarray:
        return first_variation(self.grid, u, self.eps, self.mu, self.well)

    def propose(self, st: FlowState, dt: float) -> np.ndarray:
        c = self.eps / dt + self.shift / self.eps
        return st.u + self.solver.solve(st.rhs, c)

    def step(self, st: FlowState, dt: float, rtol: float = 1e-11) -> tuple[FlowState, bool]:
        new = self.state(self.propose(st, dt), st.time + dt)
        f0, f1 = st.monitors["forcedEnergy"], new.monitors["forcedEnergy"]
        ok = f1 <= f0 + rtol * max(1.0, abs(f0))
        if not (-2.0 <= new.monitors["umin"] and new.monitors["umax"] <= 2.0):
            raise FlowError(f"a priori bound -2 <= u <= 2 violated at t = {new.time:.6g}")
        return new, ok


@dataclass
class StepRecord:
    time: float
    dt: float
    monitors: dict


@dataclass
class FlowResult:
    limit: np.ndarray
    records: list[StepRecord]
    stationary: bool
    constant: bool
    limit_value: float
    rejected: int
    dts: list[float]
    arc: np.ndarray | None = None

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])

    def series(self, key: str) -> np.ndarray:
        return np.array([r.monitors[key] for r in self.records])

    def sampled(self, ratio: float = 2 ** 0.25) -> list[StepRecord]:
        """Records at geometrically spaced times, plus first and last."""
        out, nxt = [self.records[0]], None
        for r in self.records[1:]:
            if r.time <= 0:
                continue
            if nxt is None or r.time >= nxt:
                out.append(r)
                nxt = r.time * ratio
        if out[-1] is not self.records[-1]:
            out.append(self.records[-1])
        return out

    def write_csv(self, path: str | Path, limit: float | None = None) -> None:
        ref = self.limit_value if limit is None else limit
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "forcedEnergy", "acEnergy", "minRHS", "max_abs_u_minus_limit"])
            for r in self.sampled():
                m = r.monitors
                dev = max(abs(m["umax"] - ref), abs(m["umin"] - ref))
                w.writerow([repr(r.time), repr(m["forcedEnergy"]), repr(m["acEnergy"]), repr(m["minRHS"]), repr(dev)])


class _Stepper:
    """dt policy shared by single and lockstep runs."""

    def __init__(self, flows: list[ForcedFlow], opts: FlowOptions):
        f = flows[0]
        self.dt = opts.dt0 or f.eps * f.grid.h
        self.dt_max = opts.dt_max or f.eps / 4
        self.opts = opts
        self.streak = 0
        self.rejected = 0

    def advance(self, flows, states):
        while True:
            trial = [fl.step(st, self.dt, self.opts.energy_rtol) for fl, st in zip(flows, states)]
            if all(ok for _, ok in trial):
                dt = self.dt
                self.streak += 1
                if self.streak >= self.opts.grow_after:
                    self.dt = min(2 * self.dt, self.dt_max)
                    self.streak = 0
                return [s for s, _ in trial], dt
            self.rejected += 1
            self.streak = 0
            self.dt *= 0.5
            if self.dt < self.opts.dt_min:
                bad = [st.monitors for (st, ok) in trial if not ok]
                raise FlowError(f"dt underflow: forced energy does not decrease; monitors {bad}")


def _stationary(st: FlowState, grid: ChartGrid, tol: float) -> bool:
    return st.monitors["speedL2"] < tol * math.sqrt(grid.total_volume)


def _finish(flow: ForcedFlow, st: FlowState, records, stationary, rejected, dts, opts, arc=None) -> FlowResult:
    u = st.u
    const = float(u.max() - u.min()) < opts.const_tol
    return FlowResult(u, records, stationary, const, float(flow.grid.integrate(u) / flow.grid.total_volume),
                      rejected, dts, None if arc is None else np.array(arc))


def run_to_stationary(flow: ForcedFlow, u0: np.ndarray, opts: FlowOptions | None = None,
                      on_step: Callable[[FlowState], None] | None = None) -> FlowResult:
    opts = opts or FlowOptions()
    st = flow.state(np.array(u0, dtype=float))
    records = [StepRecord(0.0, 0.0, st.monitors)]
    dts: list[float] = []
    stepper = _Stepper([flow], opts)
    while not _stationary(st, flow.grid, opts.tol):
        if st.time > opts.t_max or len(dts) >= opts.max_steps:
            raise FlowError(f"no stationarity by t = {st.time:.4g} (speed {st.monitors['speedL2']:.3g})")
        (st,), dt = stepper.advance([flow], [st])
        dts.append(dt)
        records.append(StepRecord(st.time, dt, st.monitors))
        if on_step is not None:
            on_step(st)
    return _finish(flow, st, records, True, stepper.rejected, dts, opts)


@dataclass
class PairResult:
    lower: FlowResult
    upper: FlowResult
    ordered: bool
    first_violation: float | None


def run_pair(lower: ForcedFlow, upper: ForcedFlow, m0: np.ndarray, h0: np.ndarray,
             opts: FlowOptions | None = None, log_every: int = 200) -> PairResult:
    """Step the barrier flow and the upper flow with a common dt, comparing after every step.

    ``lower`` may live on the x2-reduced grid; it is broadcast for the comparison.
    The upper flow's W^{1,2} arc length is recorded step by step.
    """
    opts = opts or FlowOptions()
    sm, sh = lower.state(np.array(m0, float)), upper.state(np.array(h0, float))
    rec_m = [StepRecord(0.0, 0.0, sm.monitors)]
    rec_h = [StepRecord(0.0, 0.0, sh.monitors)]
    arc = [0.0]
    dts: list[float] = []
    stepper = _Stepper([upper, lower], opts)
    first_bad = None

    def compare(a, b, t):
        nonlocal first_bad
        if first_bad is None and not np.all(lower.grid.broadcast(a, upper.grid) < b + ORDER_ROUNDOFF):
            first_bad = t

    compare(sm.u, sh.u, 0.0)
    done_m = done_h = False
    while not (done_m and done_h):
        if sh.time > opts.t_max or len(dts) >= opts.max_steps:
            raise FlowError(f"pair run not stationary by t = {sh.time:.4g}")
        prev_h = sh.u
        (sh, sm), dt = stepper.advance([upper, lower], [sh, sm])
        dts.append(dt)
        arc.append(arc[-1] + w12_distance(upper.grid, sh.u, prev_h))
        rec_m.append(StepRecord(sm.time, dt, sm.monitors))
        rec_h.append(StepRecord(sh.time, dt, sh.monitors))
        compare(sm.u, sh.u, sh.time)
        done_m = _stationary(sm, lower.grid, opts.tol)
        done_h = _stationary(sh, upper.grid, opts.tol)
        if log_every and len(dts) % log_every == 0:
            log.info("t=%.4g dt=%.3g F_h=%.6g minRHS_m=%.3g span_h=%.3g", sh.time, dt,
                     sh.monitors["forcedEnergy"], sm.monitors["minRHS"], sh.monitors["umax"] - sh.monitors["umin"])
    return PairResult(_finish(lower, sm, rec_m, True, stepper.rejected, dts, opts),
                      _finish(upper, sh, rec_h, True, stepper.rejected, dts, opts, arc),
                      first_bad is None, first_bad)


def replay(flow: ForcedFlow, u0: np.ndarray, dts: list[float], keep: set[int]) -> Iterator[tuple[int, np.ndarray]]:
    """Re-run accepted steps with a recorded dt sequence, yielding fields at chosen step indices."""
    u = np.array(u0, float)
    if 0 in keep:
        yield 0, u
    last = max(keep)
    shift = flow.shift / flow.eps
    for i, dt in enumerate(dts[:last], start=1):
        u = u + flow.solver.solve(flow.rhs(u), flow.eps / dt + shift)
        if i in keep:
            yield i, u


def comparison_monitor(a: list[np.ndarray], b: list[np.ndarray], atol: float = 0.0) -> bool:
    """Strict ordering a < b at every sample; ``atol`` admits a - b < atol instead."""
    if len(a) != len(b):
        raise ValueError("trajectories are sampled at different times")
    for x, y in zip(a, b):
        if x.shape != y.shape:
            raise ValueError("trajectories live on different grids")
        if not np.all(x - y < atol) if atol else not np.all(x < y):
            return False
    return True


def relax_to_plus_one(grid: ChartGrid, eps: float, start: float, well: DoubleWell = STANDARD_WELL,
                      opts: FlowOptions | None = None) -> FlowResult:
    """Unforced flow from the constant ``start`` (the forced equilibrium)."""
    flow = ForcedFlow(grid, eps, 0.0, well)
    return run_to_stationary(flow, grid.constant(start), opts)


# ---------------------------------------------------------------------------
# barrier and bridge


@dataclass
class Barrier:
    m: np.ndarray
    grid: ChartGrid
    rho0: float
    delta: float
    slack: float
    below_top: bool
    attempts: list[dict]

    def on(self, grid: ChartGrid) -> np.ndarray:
        return self.grid.broadcast(self.m, grid)

    def to_dict(self) -> dict:
        return {"rho0": self.rho0, "delta": self.delta, "slack": self.slack,
                "below_top": self.below_top, "attempts": self.attempts}


def barrier_scenario(builder: SweepoutBuilder) -> Scenario:
    """Barrier fields depend on the distance to M only; on the spheres they live on the x2-reduced grid."""
    return builder.reduced if builder.scenario.name in ("sphere2", "sphere3") else builder.scenario


def mollify(scenario: Scenario, u: np.ndarray, delta: float, **kw) -> np.ndarray:
    """Normalized mollification; folded charts are unfolded for the kernel sums."""
    full = scenario.unfolded
    k = MollifierKernel(full, full.grid, delta, mode="normalized", **kw)
    return scenario.restrict(k.convolve_field(scenario.expand(u)))


def build_barrier(builder: SweepoutBuilder, g_top: np.ndarray | None = None, rho0: float | None = None,
                  delta_start: float | None = None, halvings: int = 14) -> Barrier:
    eps, mu = builder.eps, builder.mu
    rho0 = eps**2 if rho0 is None else rho0
    sc = barrier_scenario(builder)
    g = sc.grid
    top = builder.g_top() if g_top is None else g_top
    base = builder.G0(g) - rho0
    delta = eps if delta_start is None else delta_start
    attempts = []
    for _ in range(halvings + 1):
        try:
            m = mollify(sc, base, delta, subcell=2)
        except MollifierError:
            delta *= 0.5
            continue
        slack = float(first_variation(g, m, eps, mu, builder.well).min())
        below = bool(np.all(g.broadcast(m, builder.scenario.grid) < top))
        attempts.append({"delta": delta, "slack": slack, "below_top": below})
        if slack >= mu / 5 and below:
            return Barrier(m, g, rho0, delta, slack, below, attempts)
        delta *= 0.5
    last = attempts[-1] if attempts else {}
    which = "slack >= mu/5" if last and last["slack"] < mu / 5 else "m < g_top"
    raise BarrierError(f"no delta certifies the barrier; violated: {which}; attempts {attempts}")


def bridge_field(builder: SweepoutBuilder, g_top: np.ndarray, delta: float) -> np.ndarray:
    if delta == 0:
        return g_top
    return mollify(builder.scenario, g_top, delta, subcell=2)


def choose_bridge_delta(builder: SweepoutBuilder, barrier: Barrier, g_top: np.ndarray,
                        delta_start: float | None = None, halvings: int = 14) -> tuple[float, list[dict]]:
    """Largest delta (from a halving ladder) with g_top * eta > m and E <= E(g_top) + tau/4."""
    e_top = builder.energy(g_top)
    cap = e_top + builder._plan.tau / 4
    m = barrier.on(builder.scenario.grid)
    delta = builder.eps if delta_start is None else delta_start
    tried = []
    for _ in range(halvings + 1):
        h0 = bridge_field(builder, g_top, delta)
        e = builder.energy(h0)
        above = bool(np.all(h0 > m))
        tried.append({"delta": delta, "energy": e, "above_barrier": above})
        if above and e <= cap:
            return delta, tried
        delta *= 0.5
    raise BarrierError(f"no bridge radius satisfies both conditions: {tried}")


def segment_mollify_bridge(builder: SweepoutBuilder, barrier: Barrier, g_top: np.ndarray, delta_bar: float,
                           samples: int = 128) -> SegmentTrace:
    grid = builder.scenario.grid
    m = barrier.on(grid)
    ds = np.linspace(0.0, delta_bar, samples + 1)
    ordered = []

    def watch(i, d, u):
        ordered.append(bool(np.all(u > m)))

    tr = trace_family("mollifyBridge", grid, ds, lambda d: bridge_field(builder, g_top, d), builder.energy, watch)
    e_top = builder.energy(g_top)
    base = e_top + builder._plan.tau / 4
    tr.certificate = {"bound": "E(g_top) + tau/4", "base": base, "slack": _slack(tr.energy, base, builder.eps),
                      "above_barrier_all": all(ordered), "delta_bar": delta_bar}
    return tr


# ---------------------------------------------------------------------------
# last segment


@dataclass
class FlowSegment:
    trace: SegmentTrace
    pair: PairResult
    relax: FlowResult
    k_mu: float
    checks: dict


def _arc_targets(arc: np.ndarray, n: int) -> list[int]:
    targets = np.linspace(0.0, arc[-1], n + 1)
    idx = np.searchsorted(arc, targets)
    idx = np.clip(idx, 0, len(arc) - 1)
    # nearest of the two neighbours
    lo = np.clip(idx - 1, 0, len(arc) - 1)
    pick = np.where(np.abs(arc[lo] - targets) < np.abs(arc[idx] - targets), lo, idx)
    pick[0], pick[-1] = 0, len(arc) - 1
    return [int(p) for p in pick]


def segment_flow_to_plus_one(builder: SweepoutBuilder, barrier: Barrier, h0: np.ndarray, samples: int = 128,
                             opts: FlowOptions | None = None) -> FlowSegment:
    """Flow h0 to the forced constant, then relax to +1; sampled uniformly in W^{1,2} arc length."""
    eps, mu, well = builder.eps, builder.mu, builder.well
    opts = opts or FlowOptions()
    full = builder.scenario.grid
    k_mu = forced_constant(well, eps, mu)
    up = ForcedFlow(full, eps, mu, well, barrier=barrier.on(full))
    low = ForcedFlow(barrier.grid, eps, mu, well, solver=None)
    pair = run_pair(low, up, barrier.m, h0, opts)
    relax = relax_to_plus_one(full.reduced() if not full.is_reduced else full, eps, pair.upper.limit_value, well, opts)

    # combined path: flow steps, then the constant relaxation values
    vol = math.sqrt(full.total_volume)
    relax_vals = np.array([r.monitors["umax"] for r in relax.records])
    arc_flow = pair.upper.arc
    arc_relax = arc_flow[-1] + np.abs(relax_vals - relax_vals[0]) * vol
    arc = np.concatenate([arc_flow, arc_relax[1:]])
    picks = _arc_targets(arc, samples)
    nflow = len(arc_flow)
    keep = {p for p in picks if p < nflow}
    fields = dict(replay(up, h0, pair.upper.dts, keep))

    def field_at(p):
        p = int(p)
        if p < nflow:
            return fields[p]
        return full.constant(relax_vals[p - nflow + 1])

    tr = trace_family("flowToPlusOne", full, np.array(picks, dtype=float), field_at, builder.energy)
    tr.extra = {"arc_length": float(arc[-1])}
    plan = builder._plan
    base = 2 * plan.surface_area - 0.75 * plan.tau
    e_h = pair.upper.series("acEnergy")
    f_h = pair.upper.series("forcedEnergy")
    f_m = pair.lower.series("forcedEnergy")
    checks = {
        "k_mu": k_mu,
        "m_limit": pair.lower.limit_value,
        "h_limit": pair.upper.limit_value,
        "m_limit_constant": pair.lower.constant,
        "m_limit_error": abs(pair.lower.limit_value - k_mu),
        "h_limit_constant": pair.upper.constant,
        "h_limit_error": abs(pair.upper.limit_value - k_mu),
        "forced_energy_monotone_m": bool(np.all(np.diff(f_m) <= opts.energy_rtol * np.maximum(1, np.abs(f_m[:-1])))),
        "forced_energy_monotone_h": bool(np.all(np.diff(f_h) <= opts.energy_rtol * np.maximum(1, np.abs(f_h[:-1])))),
        "mean_convex_m": bool(np.all(pair.lower.series("minRHS") > -RHS_ROUNDOFF)),
        "min_rhs_m": float(pair.lower.series("minRHS").min()),
        "mean_convex_m_strict": bool(np.all(pair.lower.series("minRHS") > 0)),
        "m_nondecreasing": bool(np.all(np.diff(pair.lower.series("umin")) >= -1e-14)),
        "ordered_m_below_h": pair.ordered,
        "energy_control": bool(np.all(e_h <= e_h[0] + 2 * mu / (2 * well.sigma) * full.total_volume)),
        "relax_limit": relax.limit_value,
        "relax_monotone": bool(np.all(np.diff(relax_vals) <= 0)),
        "steps": len(pair.upper.dts),
        "rejected": pair.upper.rejected,
        "final_time": float(pair.upper.records[-1].time),
    }
    tr.certificate = {"bound": "2|M| - 3 tau/4", "base": base, "slack": _slack(tr.energy, base, eps),
                      "ends_at_plus_one": bool(abs(relax.limit_value - 1.0) < opts.const_tol)}
    return FlowSegment(tr, pair, relax, k_mu, checks)
