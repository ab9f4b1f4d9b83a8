"""Unstable normal deformations of M and calibration of the deformation plan.

All deformation data are radial about the hole centre b: functions of the
geodesic distance a along M. On the desk scenarios the compact core is the
whole double cover, so there is no boundary collar (a synthetic collar can
still be requested for testing).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .manifold_scenarios import Scenario
from .wells_profiles import smooth_step

log = logging.getLogger(__name__)

HOLE_SHARPNESS = 0.6
HOLE_WIDTH = 0.9  # transition of chi over [R, (1 + HOLE_WIDTH) R]


class CalibrationError(RuntimeError):
    pass


@dataclass(eq=False)
class RadialProfile:
    """Function of the distance a from b, tabulated on a fine uniform grid."""

    a: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.slopes = np.gradient(self.values, self.a)

    def __call__(self, a) -> np.ndarray:
        return np.interp(a, self.a, self.values)

    def deriv(self, a) -> np.ndarray:
        return np.interp(a, self.a, self.slopes)

    @property
    def max(self) -> float:
        return float(self.values.max())

    def support_start(self, tol: float = 0.0) -> float:
        nz = np.nonzero(self.values > tol)[0]
        return float(self.a[nz[0]]) if len(nz) else math.inf


def radial_grid(scenario: Scenario, n: int = 20001) -> np.ndarray:
    return np.linspace(0.0, scenario.tangential_extent(), n)


def _measure(scenario: Scenario, a: np.ndarray) -> np.ndarray:
    return scenario.tangential_measure(a)


def second_variation_area(scenario: Scenario, phi) -> float:
    """int |grad phi|^2 - (|A|^2 + Ric(nu, nu)) int phi^2 over M."""
    a = radial_grid(scenario)
    if isinstance(phi, RadialProfile):
        v, dv = phi(a), phi.deriv(a)
    else:
        v = np.broadcast_to(np.asarray(phi(a), dtype=float), a.shape)
        dv = np.gradient(v, a)
    mu = _measure(scenario, a)
    pot = scenario.surface.second_ff_sq + scenario.surface.ric_normal
    return float(integrate.simpson(dv**2 * mu, x=a) - pot * integrate.simpson(v**2 * mu, x=a))


@dataclass
class CapacityCutoff:
    profile: RadialProfile
    r1: float
    r2: float
    energy: float


def capacity_cutoff(scenario: Scenario, r1: float, r2: float) -> CapacityCutoff:
    """log(r2/a)/log(r2/r1) clipped to [0, 1], with its Dirichlet energy on M."""
    if not 0 < r1 < r2:
        raise ValueError(f"need 0 < r1 < r2, got r1={r1}, r2={r2}")
    if r2 > scenario.tangential_extent():
        raise ValueError("outer radius exceeds the extent of M")
    L = math.log(r2 / r1)
    a = radial_grid(scenario)
    with np.errstate(divide="ignore"):
        v = np.clip(np.log(r2 / np.maximum(a, 1e-300)) / L, 0.0, 1.0)
    energy, _ = integrate.quad(lambda x: (1.0 / (x * L)) ** 2 * float(_measure(scenario, np.array([x]))[0]),
                               r1, r2, limit=200)
    return CapacityCutoff(RadialProfile(a, v), r1, r2, energy)


def mollify_radial(profile: RadialProfile, width: float) -> RadialProfile:
    """1D mollification with a compact bump of half-width ``width``.

    The tabulated function is reflected evenly at both ends of the a-range,
    which matches the symmetry of radial functions at b and at its antipode.
    """
    a, v = profile.a, profile.values
    da = a[1] - a[0]
    k = int(math.ceil(width / da))
    x = np.arange(-k, k + 1) * da / width
    inside = np.abs(x) < 1
    ker = np.zeros_like(x)
    ker[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    ker /= ker.sum()
    padded = np.concatenate([v[k:0:-1], v, v[-2:-k - 2:-1]])
    out = np.convolve(padded, ker, mode="valid")
    return RadialProfile(a, out)


def hole_cutoff(R: float):
    """chi(a): 1 on the hole of radius R, 0 beyond (1 + HOLE_WIDTH) R, |chi'| <= 2/R."""
    w = HOLE_WIDTH * R

    def chi(a):
        return smooth_step((np.asarray(a, dtype=float) - R) / w, HOLE_SHARPNESS)[0]

    def chi_slope(a):
        return smooth_step((np.asarray(a, dtype=float) - R) / w, HOLE_SHARPNESS)[1] / w

    return chi, chi_slope


def build_phi_tilde(scenario: Scenario, hole_radius: float, r1: float, r2: float,
                    smoothing: float, collar: tuple[float, float] | None = None) -> RadialProfile:
    """1 - (log cutoff around b) [- collar cutoff], then mollified.

    ``collar`` = (start, end) removes a band near a synthetic core boundary.
    """
    if r1 - smoothing <= 2 * hole_radius:
        raise CalibrationError("phi tilde would reach into the doubled hole D")
    cap = capacity_cutoff(scenario, r1, r2)
    raw = 1.0 - cap.profile.values
    if collar is not None:
        lo, hi = collar
        raw = raw * smooth_step((cap.profile.a - lo) / (hi - lo))[0]
    return mollify_radial(RadialProfile(cap.profile.a, raw), smoothing)


def immersed_area(scenario: Scenario, c: float, t: float, phi: RadialProfile,
                  hole_radius: float | None = None) -> float:
    """Area of the two-sheeted normal graph s = +-(c + t phi), optionally over M minus the hole."""
    a = radial_grid(scenario)
    h = c + t * phi(a)
    if h.max() >= scenario.surface.c_k:
        raise CalibrationError(f"graph height {h.max():.4g} exits the tube")
    slope = t * phi.deriv(a)
    rho, n = scenario.radius, scenario.surface.n
    if scenario.name == "torus":
        cs = np.ones_like(h)
    else:
        cs = np.cos(h / rho)
    dens = np.sqrt(slope**2 + cs**2) * cs ** (n - 1) * _measure(scenario, a)
    if hole_radius is not None:
        keep = a >= hole_radius
        # restart the quadrature exactly at the hole boundary
        a_h = np.concatenate([[hole_radius], a[keep]])
        d_h = np.concatenate([np.interp([hole_radius], a, dens), dens[keep]])
        return 2.0 * float(integrate.simpson(d_h, x=a_h))
    return 2.0 * float(integrate.simpson(dens, x=a))


@dataclass
class DeformationPlan:
    scenario: str
    phi: RadialProfile
    hole_radius: float
    r1: float
    r2: float
    smoothing: float
    t0: float
    c0: float
    tau: float
    hole_area: float
    surface_area: float
    second_variation: float
    t_grid: list = field(default_factory=list)
    c_grid: list = field(default_factory=list)
    area_t: list = field(default_factory=list)  # full area at c = 0 along t_grid
    holed_max: list = field(default_factory=list)  # max over swept t of the holed area, per c

    @property
    def d_radius(self) -> float:
        return 2.0 * self.hole_radius

    @property
    def chi(self):
        return hole_cutoff(self.hole_radius)[0]

    def feasibility(self, eps: float) -> dict:
        """Tube constraints for a given eps: the operational one and the /20 margin."""
        lam = 3.0 * abs(math.log(eps))
        width = 2 * eps * lam
        return {
            "eps": eps,
            "transition_half_width": width,
            "fits_offset": width <= self.c0,
            "margin_twentieth": width < self.c0 / 20.0,
        }

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario, "hole_radius": self.hole_radius, "d_radius": self.d_radius,
            "r1": self.r1, "r2": self.r2, "smoothing": self.smoothing,
            "t0": self.t0, "c0": self.c0, "tau": self.tau, "hole_area": self.hole_area,
            "surface_area": self.surface_area, "second_variation": self.second_variation,
            "phi_max": self.phi.max, "phi_support_start": self.phi.support_start(1e-14),
            "t_grid": self.t_grid, "c_grid": self.c_grid, "area_t": self.area_t,
            "holed_max": self.holed_max,
        }


DEFAULT_PLANS = {
    # hole radius, r1, r2, smoothing, as multiples of nothing: absolute lengths
    ("sphere2", 3.0): dict(hole_radius=1.0, r1=2.4, r2=6.0, smoothing=0.25),
    ("sphere3", 6.0): dict(hole_radius=2.5, r1=6.0, r2=14.0, smoothing=0.6),
}


def default_plan_params(scenario: Scenario) -> dict:
    key = (scenario.name, scenario.radius)
    if key in DEFAULT_PLANS:
        return dict(DEFAULT_PLANS[key])
    ext = scenario.tangential_extent()
    R = ext / 10
    return dict(hole_radius=R, r1=2.4 * R, r2=0.64 * ext, smoothing=0.25 * R)


def calibrate(scenario: Scenario, hole_radius: float | None = None, r1: float | None = None,
              r2: float | None = None, smoothing: float | None = None, phi: RadialProfile | None = None,
              n_t: int = 16, n_c: int = 16, bisect: int = 20) -> DeformationPlan:
    p = default_plan_params(scenario)
    R = hole_radius if hole_radius is not None else p["hole_radius"]
    r1 = r1 if r1 is not None else p["r1"]
    r2 = r2 if r2 is not None else p["r2"]
    w = smoothing if smoothing is not None else p["smoothing"]
    if phi is None:
        phi = build_phi_tilde(scenario, R, r1, r2, w)
    if phi.support_start(1e-14) <= 2 * R:
        raise CalibrationError("support of phi tilde meets the doubled hole")
    q = second_variation_area(scenario, phi)
    if not q < 0:
        raise CalibrationError(f"phi tilde is not a destabilising direction (Q = {q:.4g})")
    if phi.max <= 0:
        raise CalibrationError("phi tilde vanishes identically")

    area_m = scenario.surface.area
    hole = scenario.hole_area(R)
    full = 2.0 * area_m
    c_cap = scenario.surface.c_k / 4
    t_max = (scenario.surface.c_k / 2 - c_cap) / phi.max

    def area(c, t, holed=False):
        return immersed_area(scenario, c, t, phi, R if holed else None)

    # deformation time: last t of strict decrease at c = 0
    ts = np.linspace(0.0, t_max, n_t)
    at = np.array([area(0.0, t) for t in ts])
    dec = np.diff(at) < 0
    k = n_t - 1 if dec.all() else int(np.argmin(dec))
    t0 = float(ts[k])
    if k < n_t - 1:
        lo, hi = ts[k], ts[k + 1]
        for _ in range(bisect):
            mid = 0.5 * (lo + hi)
            if area(0.0, mid) < area(0.0, lo):
                lo = mid
            else:
                hi = mid
        t0 = float(lo)
    if t0 <= 0:
        raise CalibrationError("area is not decreasing in t at all")
    t_sweep = np.linspace(0.0, t0, n_t)

    # offset bound: claim (i) on the holed immersion for every swept t
    bound_i = full - 1.5 * hole

    def holed_max(c):
        return max(area(c, t, True) for t in t_sweep)

    cs = np.linspace(0.0, c_cap, n_c)
    hm = np.array([holed_max(c) for c in cs])
    ok = hm <= bound_i
    if not ok[0]:
        raise CalibrationError("claim (i) fails already at c = 0")
    j = n_c - 1 if ok.all() else int(np.argmin(ok)) - 1
    c0 = float(cs[j])
    if j < n_c - 1:
        lo, hi = cs[j], cs[j + 1]
        for _ in range(bisect):
            mid = 0.5 * (lo + hi)
            if holed_max(mid) <= bound_i:
                lo = mid
            else:
                hi = mid
        c0 = float(lo)

    # area gap: claim (ii) at t0 for every c <= c0
    c_sweep = np.linspace(0.0, c0, n_c)
    tau = full - max(area(c, t0) for c in c_sweep)
    if not tau > 0:
        raise CalibrationError(f"no positive area gap (tau = {tau:.4g})")
    return DeformationPlan(
        scenario=scenario.name, phi=phi, hole_radius=R, r1=r1, r2=r2, smoothing=w,
        t0=t0, c0=c0, tau=float(tau), hole_area=hole, surface_area=area_m, second_variation=q,
        t_grid=ts.tolist(), c_grid=cs.tolist(), area_t=at.tolist(), holed_max=hm.tolist(),
    )
