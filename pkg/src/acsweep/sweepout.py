"""Fields and explicit path segments from -1 up to the deformed, hole-free graph.

Every field is a truncated transition evaluated on a distance-like
argument, so each is exactly +-1 away from a band of width O(eps |log eps|).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from .ac_energy import ac_energy, w12_distance
from .instability import DeformationPlan, hole_cutoff
from .manifold_scenarios import ChartGrid, GeometryError, NormalGraph, Scenario
from .wells_profiles import (
    STANDARD_WELL, DoubleWell, ProfileError, energy1d, fold, lattice_heteroclinic, mu_eps, truncate,
)

log = logging.getLogger(__name__)

SEGMENTS = ("toMinusOne", "holeDeform", "closeHole", "mollifyBridge", "flowToPlusOne")


class SweepoutError(RuntimeError):
    pass


class SweepoutBuilder:
    """Constructs G0, f_r, g_t and g_{t0+r} for one scenario, eps and plan."""

    def __init__(self, scenario: Scenario, eps: float, plan: DeformationPlan | None,
                 well: DoubleWell = STANDARD_WELL, lattice: bool = True):
        self.scenario = scenario
        self.eps = float(eps)
        self.plan = plan
        self.well = well
        grid = scenario.grid
        k = grid.h / eps if lattice else 0.0
        if k > 0:
            try:
                lattice_heteroclinic(round(k, 14))
            except ProfileError as exc:
                log.info("h/eps = %.3g: %s; using the continuum transition", k, exc)
                k = 0.0
        self.profile = truncate(well, eps, lattice=k)
        self.lam = self.profile.lam
        self.width = self.profile.half_width  # 2 eps Lambda
        if 2 * self.width >= scenario.surface.omega / 2:
            raise SweepoutError(f"4 eps Lambda = {2 * self.width:.4g} violates the tube constraint "
                                f"(< omega/2 = {scenario.surface.omega / 2:.4g})")
        self._dist_cache: dict[float, np.ndarray] = {}

    @property
    def mu(self) -> float:
        return mu_eps(self.eps)

    def hbar(self, y) -> np.ndarray:
        """Truncated transition H^eps evaluated at y (increasing in y)."""
        return self.profile.value(y)

    # geometry on the full grid and on the x2-reduced grid

    @cached_property
    def reduced(self) -> Scenario:
        return self.scenario.reduced()

    def distance(self, grid: ChartGrid | None = None) -> np.ndarray:
        return np.abs(self.scenario.normal_coordinate(grid or self.scenario.grid))

    @cached_property
    def chi_field(self) -> np.ndarray:
        chi, slope = hole_cutoff(self._plan.hole_radius)
        a = self.scenario.tangential_distance()
        return np.broadcast_to(chi(a), self.scenario.grid.shape)

    @property
    def _plan(self) -> DeformationPlan:
        if self.plan is None:
            raise SweepoutError("this field needs a deformation plan")
        return self.plan

    def check_hole_cutoff(self) -> dict:
        R = self._plan.hole_radius
        chi, slope = hole_cutoff(R)
        a = np.linspace(0.0, 4 * R, 40001)
        v = chi(a)
        res = {
            "one_on_hole": bool(np.all(v[a <= R] == 1.0)),
            "max_slope_times_R": float(np.abs(slope(a)).max() * R),
            "support_end": float(a[np.nonzero(v > 0)[0][-1]]),
        }
        res["ok"] = res["one_on_hole"] and res["max_slope_times_R"] <= 2.0 and res["support_end"] < 2 * R
        return res

    # fields

    def G0(self, grid: ChartGrid | None = None) -> np.ndarray:
        return fold(self.profile, 0.0).value(self.distance(grid))

    def f_r(self, r: float) -> np.ndarray:
        if not 0 <= r <= 2 * self.width + 1e-15:
            raise SweepoutError("r must lie in [0, 4 eps Lambda]")
        return self.hbar(self.width - self.distance() - 2 * self.width * self.chi_field - r)

    def f(self) -> np.ndarray:
        chk = self.check_hole_cutoff()
        if not chk["ok"]:
            raise SweepoutError(f"hole cutoff violates its constraints: {chk}")
        return self.f_r(0.0)

    def graph(self, t: float) -> NormalGraph:
        return NormalGraph(self.scenario, self.width, t, self._plan.phi)

    def graph_distance(self, t: float) -> np.ndarray:
        """Signed distance to the graph s = 2 eps Lambda + t phi; exact closed form at t = 0."""
        t = float(t)
        if t in self._dist_cache:
            return self._dist_cache[t]
        # beyond these bands the truncated profile is saturated whatever chi is
        h2 = 2 * self.scenario.grid.h
        try:
            d = self.graph(t).signed_distance(band=self.width + h2, band_below=3 * self.width + h2)
        except GeometryError as exc:
            raise SweepoutError(str(exc)) from exc
        if t in (0.0, self._plan.t0):
            self._dist_cache[t] = d
        return d

    def g_t(self, t: float) -> np.ndarray:
        if not 0 <= t <= self._plan.t0 + 1e-15:
            raise SweepoutError("t must lie in [0, t0]")
        return self.hbar(-self.graph_distance(t) - 2 * self.width * self.chi_field)

    def g_close(self, r: float) -> np.ndarray:
        """g_{t0 + r}: the hole closes as r goes from 0 to 1."""
        if not 0 <= r <= 1:
            raise SweepoutError("r must lie in [0, 1]")
        return self.hbar(-self.graph_distance(self._plan.t0) - 2 * self.width * (1 - r) * self.chi_field)

    def g_top(self) -> np.ndarray:
        return self.g_close(1.0)

    def energy(self, u: np.ndarray) -> float:
        grid = self.scenario.grid if u.shape == self.scenario.grid.shape else self.reduced.grid
        return ac_energy(grid, u, self.eps, self.well).total

    def psi_tail_energy(self, r: float) -> float:
        """Normalised 1D energy of Psi_0 restricted to [r, 4 eps Lambda]."""
        p = fold(truncate(self.well, self.eps), 0.0)
        return energy1d(p, (r, 2 * self.width)).normalized


def ordering_check(a: np.ndarray, b: np.ndarray, strict: bool = False) -> bool:
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a < b)) if strict else bool(np.all(a <= b))


# ---------------------------------------------------------------------------
# segments


@dataclass
class SegmentTrace:
    """Energy and W^{1,2} continuity along a sampled segment.

    ``continuity`` holds distances between consecutive samples;
    ``coarse_continuity`` those between every other sample, i.e. the same
    segment at half the sampling density.
    """

    name: str
    params: np.ndarray
    energy: np.ndarray
    continuity: np.ndarray
    coarse_continuity: np.ndarray
    first: np.ndarray
    last: np.ndarray
    certificate: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def max_energy(self) -> float:
        return float(self.energy.max())

    @property
    def refinement_ratio(self) -> float:
        fine = float(self.continuity.max()) if len(self.continuity) else 0.0
        coarse = float(self.coarse_continuity.max()) if len(self.coarse_continuity) else 0.0
        return coarse / fine if fine > 0 else math.nan

    def reversed(self) -> "SegmentTrace":
        return SegmentTrace(self.name, self.params[::-1].copy(), self.energy[::-1].copy(),
                            self.continuity[::-1].copy(), self.coarse_continuity[::-1].copy(),
                            self.last, self.first, self.certificate, self.extra)

    def summary(self) -> dict:
        return {
            "name": self.name, "samples": len(self.params), "max_energy": self.max_energy,
            "max_step_w12": float(self.continuity.max()) if len(self.continuity) else 0.0,
            "max_step_w12_half_density": float(self.coarse_continuity.max()) if len(self.coarse_continuity) else 0.0,
            "refinement_ratio": self.refinement_ratio,
            "certificate": self.certificate,
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "energy", "w12_step"])
            for i, (p, e) in enumerate(zip(self.params, self.energy)):
                w.writerow([repr(float(p)), repr(float(e)), repr(float(self.continuity[i - 1])) if i else ""])


def trace_family(name: str, grid: ChartGrid, params: np.ndarray, field_at: Callable[[float], np.ndarray],
                 energy: Callable[[np.ndarray], float], on_field: Callable | None = None) -> SegmentTrace:
    """Walk a parameter family, keeping at most three fields in memory."""
    params = np.asarray(params, dtype=float)
    energies, steps, coarse = [], [], []
    prev = anchor = first = None
    for i, p in enumerate(params):
        u = field_at(p)
        energies.append(energy(u))
        if on_field is not None:
            on_field(i, p, u)
        if prev is not None:
            steps.append(w12_distance(grid, u, prev))
        if i % 2 == 0:
            if anchor is not None:
                coarse.append(w12_distance(grid, u, anchor))
            anchor = u
        if first is None:
            first = u
        prev = u
    return SegmentTrace(name, params, np.array(energies), np.array(steps), np.array(coarse), first, prev)


def _slack(energy: np.ndarray, bound, eps: float) -> float:
    """Largest excess over the bound in units of eps |log eps| (negative if strictly below)."""
    return float(np.max((energy - bound) / (eps * abs(math.log(eps)))))


def segment_to_minus_one(b: SweepoutBuilder, samples: int = 128) -> SegmentTrace:
    plan = b._plan
    rs = np.linspace(0.0, 2 * b.width, samples + 1)
    grid = b.scenario.grid
    tr = trace_family("toMinusOne", grid, rs, b.f_r, b.energy)
    if not np.array_equal(tr.first, b.f()):
        raise SweepoutError("toMinusOne does not start at f")
    if not np.all(tr.last == -1.0):
        raise SweepoutError("toMinusOne does not end at -1")
    base = 2 * (plan.surface_area - plan.hole_area)
    tail = np.array([b.psi_tail_energy(r) for r in rs])
    tr.certificate = {
        "bound": "2(|M| - |B|) (+ tail-weighted form)",
        "base": base,
        "slack_uniform": _slack(tr.energy, base, b.eps),
        "slack_tail": _slack(tr.energy, base * tail, b.eps),
        "final_energy": float(tr.energy[-1]),
    }
    return tr


def segment_hole_deform(b: SweepoutBuilder, samples: int = 128) -> SegmentTrace:
    plan = b._plan
    ts = np.linspace(0.0, plan.t0, samples + 1)
    tr = trace_family("holeDeform", b.scenario.grid, ts, b.g_t, b.energy)
    if not np.array_equal(tr.first, b.f()):
        raise SweepoutError("g_0 differs from f")
    base = 2 * (plan.surface_area - 0.75 * plan.hole_area)
    tr.certificate = {"bound": "2(|M| - 3|B|/4)", "base": base, "slack": _slack(tr.energy, base, b.eps)}
    return tr


def segment_close_hole(b: SweepoutBuilder, samples: int = 128) -> SegmentTrace:
    plan = b._plan
    rs = np.linspace(0.0, 1.0, samples + 1)
    tr = trace_family("closeHole", b.scenario.grid, rs, b.g_close, b.energy)
    if not np.array_equal(tr.first, b.g_t(plan.t0)):
        raise SweepoutError("closeHole does not start at g_t0")
    base = 2 * plan.surface_area - plan.tau
    tr.certificate = {"bound": "2|M| - tau", "base": base, "slack": _slack(tr.energy, base, b.eps)}
    return tr


def fitted_constant(slacks: list[float]) -> float:
    """Single constant C covering every slack (clipped at zero)."""
    return max(0.0, *slacks) if slacks else 0.0


def export_trace_bundle(traces: list[SegmentTrace], out: str | Path, meta: dict | None = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for tr in traces:
        tr.write_csv(out / f"{tr.name}.csv")
    (out / "segments.json").write_text(json.dumps({"meta": meta or {}, "segments": [t.summary() for t in traces]},
                                                  indent=1, default=float))
