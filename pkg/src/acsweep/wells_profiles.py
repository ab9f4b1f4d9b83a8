"""One-dimensional ingredients: the double well, heteroclinic transitions and
their truncated, shifted and folded versions at scale eps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Callable

import numpy as np
from scipy import integrate, interpolate, optimize

SQRT2 = math.sqrt(2.0)


class ProfileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# smooth cutoffs


def smooth_step(t, sharpness: float = 1.0):
    """C-infinity step equal to 1 for t <= 0 and 0 for t >= 1.

    Built from exp(-a/s), the germ of the standard mollifier. Returns
    (value, first derivative, second derivative).
    """
    t = np.asarray(t, dtype=float)
    a = sharpness
    inner = (t > 0.0) & (t < 1.0)
    tc = np.where(inner, t, 0.5)
    z = a / (1.0 - tc) - a / tc
    z = np.clip(z, -700.0, 700.0)
    s = 1.0 / (1.0 + np.exp(z))
    dz = a / (1.0 - tc) ** 2 + a / tc**2
    d2z = 2.0 * a / (1.0 - tc) ** 3 - 2.0 * a / tc**3
    ds = -s * (1.0 - s) * dz
    d2s = -(ds * (1.0 - 2.0 * s) * dz + s * (1.0 - s) * d2z)
    val = np.where(inner, s, np.where(t <= 0.0, 1.0, 0.0))
    return val, np.where(inner, ds, 0.0), np.where(inner, d2s, 0.0)


def bump(x):
    """Even cutoff: 1 on [-1, 1], support [-2, 2]. Returns (chi, chi', chi'')."""
    x = np.asarray(x, dtype=float)
    sgn = np.where(x < 0.0, -1.0, 1.0)
    v, d1, d2 = smooth_step(np.abs(x) - 1.0)
    return v, sgn * d1, d2


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class DoubleWell:
    """Even double well with minima at +-1, extended quadratically for |x| >= 2.

    The core callables describe W on [-2, 2]; outside that interval the
    second-order Taylor polynomial at |x| = 2 is used, so W is C^2 and grows
    exactly quadratically.
    """

    core: Callable = field(repr=False)
    core_d1: Callable = field(repr=False)
    core_d2: Callable = field(repr=False)
    name: str = "custom"

    @classmethod
    def standard(cls) -> "DoubleWell":
        return cls(
            core=lambda x: 0.25 * (1.0 - x * x) * (1.0 - x * x),
            core_d1=lambda x: x * (x * x - 1.0),
            core_d2=lambda x: 3.0 * x * x - 1.0,
            name="standard",
        )

    @property
    def is_standard(self) -> bool:
        return self.name == "standard"

    def _split(self, x):
        x = np.asarray(x, dtype=float)
        y = np.abs(x) - 2.0
        outer = y > 0.0
        return x, np.where(outer, y, 0.0), outer, np.where(x < 0.0, -1.0, 1.0)

    @staticmethod
    def _inside(x) -> bool:
        return bool(np.ndim(x)) and float(np.max(np.abs(x))) <= 2.0

    def w(self, x):
        if self._inside(x):
            return self.core(np.asarray(x, dtype=float))
        x, y, outer, _ = self._split(x)
        w2, d1, d2 = self.core(2.0), self.core_d1(2.0), self.core_d2(2.0)
        xin = np.clip(x, -2.0, 2.0)
        return np.where(outer, w2 + d1 * y + 0.5 * d2 * y * y, self.core(xin))

    def w1(self, x):
        if self._inside(x):
            return self.core_d1(np.asarray(x, dtype=float))
        x, y, outer, sgn = self._split(x)
        d1, d2 = self.core_d1(2.0), self.core_d2(2.0)
        xin = np.clip(x, -2.0, 2.0)
        return np.where(outer, sgn * (d1 + d2 * y), self.core_d1(xin))

    def w2(self, x):
        x, _, outer, _ = self._split(x)
        xin = np.clip(x, -2.0, 2.0)
        return np.where(outer, self.core_d2(2.0), self.core_d2(xin))

    @cached_property
    def sigma(self) -> float:
        val, _ = integrate.quad(lambda t: math.sqrt(max(float(self.w(t)), 0.0) / 2.0), -1.0, 1.0,
                                epsabs=1e-14, epsrel=1e-13)
        return val


STANDARD_WELL = DoubleWell.standard()


def mu_eps(eps: float) -> float:
    """Default forcing strength eps*|log eps|."""
    return eps * abs(math.log(eps))


def forced_constant(dw: DoubleWell, eps: float, mu: float) -> float:
    """Root near +1 of W'(k) = eps*mu, the constant stationary state of the forced flow."""
    target = eps * mu
    if target == 0.0:
        return 1.0
    return optimize.brentq(lambda k: float(dw.w1(k)) - target, 1.0, 2.0, xtol=1e-15, rtol=1e-15)


# ---------------------------------------------------------------------------
# unit-scale heteroclinics


class Heteroclinic:
    """Increasing solution of H'' = W'(H) with H(0) = 0 on the unit scale."""

    def evaluate(self, r):
        """Return (H, H', H'') at r."""
        raise NotImplementedError

    def __call__(self, r):
        return self.evaluate(r)[0]


class TanhHeteroclinic(Heteroclinic):
    def evaluate(self, r):
        h = np.tanh(np.asarray(r, dtype=float) / SQRT2)
        return h, (1.0 - h * h) / SQRT2, h**3 - h


class QuadratureHeteroclinic(Heteroclinic):
    """Heteroclinic of a general well from the first integral H' = sqrt(2 W(H)).

    The inverse function r(u) = int_0^u du / sqrt(2 W) is tabulated by adaptive
    quadrature and inverted by monotone interpolation; beyond the table the
    linearised exponential tails are used.
    """

    def __init__(self, dw: DoubleWell, u_max: float = 1.0 - 1e-9, n: int = 4001):
        self.dw = dw
        uu = np.sin(np.linspace(0.0, 0.5 * np.pi, n)) * u_max
        rr = np.zeros_like(uu)
        f = lambda u: 1.0 / math.sqrt(2.0 * float(dw.w(u)))
        for i in range(1, n):
            rr[i] = rr[i - 1] + integrate.quad(f, uu[i - 1], uu[i], epsabs=1e-13)[0]
        self._r_max = rr[-1]
        self._u_of_r = interpolate.PchipInterpolator(rr, uu)
        self._rate = math.sqrt(float(dw.w2(1.0)))
        self._gap = 1.0 - u_max

    def evaluate(self, r):
        r = np.asarray(r, dtype=float)
        a = np.abs(r)
        tail = a > self._r_max
        u = np.where(tail, 1.0 - self._gap * np.exp(-self._rate * (a - self._r_max)),
                     self._u_of_r(np.minimum(a, self._r_max)))
        h = np.sign(r) * u
        d1 = np.sqrt(2.0 * np.maximum(self.dw.w(h), 0.0))
        return h, d1, self.dw.w1(h)


LATTICE_TOL = 1e-5  # lattice-equation residual; far below mu/5 once divided by eps


class LatticeHeteroclinic(Heteroclinic):
    """Standard-well transition adapted to a lattice with spacing ``k`` (unit scale).

    Solves (H(r+k) - 2H(r) + H(r-k)) / k^2 = W'(H(r)) for all r, so that the
    3-point Laplacian of the sampled profile carries no O(k^2) truncation
    error. Written as tanh(r/sqrt2) + v with v an odd sine series; the second
    difference is diagonal on sines, so Newton on collocation points is cheap.
    As k -> 0 it reduces to tanh(r/sqrt2). On any lattice an exact solution
    fails to exist (the transition is pinned), but the obstruction is
    exponentially small in 1/k: about 1e-6 at k = 0.5 for the standard well. Construction
    fails once the residual exceeds ``LATTICE_TOL`` or the profile stops being
    monotone.
    """

    def __init__(self, k: float, half_length: float = 40.0, modes: int = 800):
        self.k = k
        L, J = half_length, modes
        j = np.arange(1, J + 1)
        freq = j * np.pi / L
        rc = np.arange(1, J + 1) * L / (J + 1)
        basis = np.sin(np.outer(rc, freq))
        symbol = 2.0 * (np.cos(freq * k) - 1.0) / k**2
        T = np.tanh(rc / SQRT2)
        dT = (np.tanh((rc + k) / SQRT2) - 2.0 * T + np.tanh((rc - k) / SQRT2)) / k**2
        b = np.zeros(J)
        best = (math.inf, b)
        # the Jacobian is nearly singular along the lattice-translation direction, so
        # Newton wanders once at round-off; stop there and keep the best iterate
        for _ in range(30):
            h = T + basis @ b
            res = dT + basis @ (symbol * b) - (h**3 - h)
            r = float(np.max(np.abs(res)))
            if r < best[0]:
                best = (r, b.copy())
            if r < 1e-12:
                break
            jac = basis * symbol[None, :] - (3.0 * h * h - 1.0)[:, None] * basis
            b = b + np.linalg.solve(jac, -res)
        b = best[1]
        # collocation can converge to aliased solutions; judge the residual between the points
        mid = rc - 0.5 * L / (J + 1)
        hm = np.tanh(mid / SQRT2) + np.sin(np.outer(mid, freq)) @ b
        hp = np.tanh((mid + k) / SQRT2) + np.sin(np.outer(mid + k, freq)) @ b
        hn = np.tanh((mid - k) / SQRT2) + np.sin(np.outer(mid - k, freq)) @ b
        self.residual = max(best[0], float(np.max(np.abs((hp - 2 * hm + hn) / k**2 - (hm**3 - hm)))))
        grid = np.linspace(0.0, L, 16 * J + 1)
        vg = np.sin(np.outer(grid, freq)) @ b
        hg = np.tanh(grid / SQRT2) + vg
        if self.residual > LATTICE_TOL or np.diff(hg).min() < -1e-9 or hg.max() > 1.0 + 1e-9:
            raise ProfileError(f"no monotone lattice transition at k = {k:g} (residual {self.residual:.3g})")
        self._spline = interpolate.CubicSpline(np.concatenate([-grid[:0:-1], grid]),
                                               np.concatenate([-vg[:0:-1], vg]))
        self._L = L

    def evaluate(self, r):
        r = np.asarray(r, dtype=float)
        inside = np.abs(r) < self._L
        rc = np.clip(r, -self._L, self._L)
        t, t1, t2 = TanhHeteroclinic().evaluate(r)
        v = np.where(inside, self._spline(rc), 0.0)
        v1 = np.where(inside, self._spline(rc, 1), 0.0)
        v2 = np.where(inside, self._spline(rc, 2), 0.0)
        return t + v, t1 + v1, t2 + v2


@lru_cache(maxsize=16)
def lattice_heteroclinic(k: float) -> LatticeHeteroclinic:
    return LatticeHeteroclinic(round(k, 14))


def heteroclinic(dw: DoubleWell, r, lattice: float = 0.0):
    """Monotone transition from -1 to +1 with H(0) = 0 evaluated at r."""
    return base_heteroclinic(dw, lattice)(r)


def base_heteroclinic(dw: DoubleWell, lattice: float = 0.0) -> Heteroclinic:
    if lattice > 0.0:
        if not dw.is_standard:
            raise ProfileError("lattice-adapted transitions are implemented for the standard well only")
        return lattice_heteroclinic(lattice)
    if dw.is_standard:
        return TanhHeteroclinic()
    return _quadrature_heteroclinic(dw)


@lru_cache(maxsize=8)
def _quadrature_heteroclinic(dw: DoubleWell) -> QuadratureHeteroclinic:
    return QuadratureHeteroclinic(dw)


# ---------------------------------------------------------------------------
# truncated profiles at scale eps


@dataclass(frozen=True)
class Profile1D:
    """Truncated transition at scale eps, optionally shifted or folded.

    ``orientation`` is "increasing" for r -> Hbar((r - shift)/eps) and
    "folded" for the even double transition Psi_t(r) = Hbar^eps(2 eps Lambda - |r| - t).
    ``lattice`` is the grid spacing divided by eps when the profile is meant
    to be sampled on a lattice (0 for the continuum transition).
    """

    eps: float
    well: DoubleWell = STANDARD_WELL
    shift: float = 0.0
    orientation: str = "increasing"
    t: float = 0.0
    lattice: float = 0.0

    @property
    def lam(self) -> float:
        return 3.0 * abs(math.log(self.eps))

    @property
    def half_width(self) -> float:
        """2 eps Lambda: the profile is exactly +-1 beyond this distance from its centre."""
        return 2.0 * self.eps * self.lam

    @property
    def support(self) -> tuple[float, float]:
        if self.orientation == "folded":
            reach = max(2.0 * self.half_width - self.t, 0.0)
            return -reach, reach
        return self.shift - self.half_width, self.shift + self.half_width

    def _unit(self, r):
        """Truncated transition Hbar on the unit scale: (value, d1, d2)."""
        r = np.asarray(r, dtype=float)
        a = np.abs(r)
        lam = self.lam
        h, h1, h2 = base_heteroclinic(self.well, self.lattice).evaluate(a)
        c, c1, c2 = smooth_step(a / lam - 1.0)
        c1, c2 = c1 / lam, c2 / lam**2
        v = 1.0 + c * (h - 1.0)
        d1 = c1 * (h - 1.0) + c * h1
        d2 = c2 * (h - 1.0) + 2.0 * c1 * h1 + c * h2
        sgn = np.where(r < 0.0, -1.0, 1.0)
        return sgn * v, d1, sgn * d2

    def evaluate(self, r):
        """Return (value, first derivative, second derivative) at r."""
        r = np.asarray(r, dtype=float)
        e = self.eps
        if self.orientation == "folded":
            arg = self.half_width - np.abs(r) - self.t
            v, d1, d2 = self._unit(arg / e)
            sgn = np.where(r < 0.0, 1.0, -1.0)
            sgn = np.where(r == 0.0, 0.0, sgn)
            return v, sgn * d1 / e, d2 / e**2
        v, d1, d2 = self._unit((r - self.shift) / e)
        return v, d1 / e, d2 / e**2

    def value(self, r):
        return self.evaluate(r)[0]

    def deriv(self, r):
        return self.evaluate(r)[1]

    def deriv2(self, r):
        return self.evaluate(r)[2]


def truncate(dw: DoubleWell, eps: float, lattice: float = 0.0) -> Profile1D:
    """Truncated heteroclinic Hbar^eps: exactly -1/+1 outside [-2 eps Lambda, 2 eps Lambda]."""
    if not 0.0 < eps < 1.0:
        raise ProfileError(f"eps must lie in (0, 1), got {eps}")
    return Profile1D(eps=eps, well=dw, lattice=lattice)


def shifted(profile: Profile1D, s: float) -> Profile1D:
    """Translate an increasing profile: r -> Hbar^eps(r - s)."""
    if profile.orientation != "increasing":
        raise ProfileError("only increasing profiles can be shifted")
    return replace(profile, shift=profile.shift + s)


def fold(profile: Profile1D, t: float) -> Profile1D:
    """Even folded profile Psi_t built from an unshifted truncated transition."""
    if t < 0.0:
        raise ProfileError(f"fold parameter must be non-negative, got {t}")
    if profile.orientation != "increasing" or profile.shift != 0.0:
        raise ProfileError("fold expects the unshifted truncated transition")
    return replace(profile, orientation="folded", t=float(t))


@dataclass(frozen=True)
class Energy1D:
    unnormalized: float
    normalized: float
    converged: bool


def _gl_integrate(fun, a: float, b: float, panel: float, order: int = 10) -> float:
    n = max(1, int(math.ceil((b - a) / panel)))
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, n + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    pts = mid[:, None] + half[:, None] * x[None, :]
    return float(np.sum(fun(pts) * w[None, :] * half[:, None]))


def energy1d(profile: Profile1D, interval: tuple[float, float] | None = None,
             tol: float = 1e-12) -> Energy1D:
    """Allen-Cahn energy of a profile on an interval (None: the whole line).

    Composite Gauss-Legendre with panels no wider than eps/8; the result is
    compared with a run on halved panels to flag non-convergence.
    """
    lo, hi = profile.support
    if interval is None:
        a, b = lo, hi
    else:
        a, b = max(interval[0], lo), min(interval[1], hi)
    e = profile.eps
    if b <= a:
        return Energy1D(0.0, 0.0, True)

    def density(r):
        v, d1, _ = profile.evaluate(r)
        return 0.5 * e * d1 * d1 + profile.well.w(v) / e

    # split at kinks/seams so every panel sees a smooth integrand
    cuts = sorted({a, b, *[c for c in (0.0, profile.shift) if a < c < b]})
    coarse = sum(_gl_integrate(density, u, v, e / 8.0) for u, v in zip(cuts[:-1], cuts[1:]))
    fine = sum(_gl_integrate(density, u, v, e / 16.0) for u, v in zip(cuts[:-1], cuts[1:]))
    ok = abs(fine - coarse) <= tol * max(1.0, abs(fine))
    return Energy1D(fine, fine / (2.0 * profile.well.sigma), ok)


def fold_energy_deficit(profile: Profile1D, t: float) -> float:
    """E(Psi_0) - E(Psi_t), computed directly as the energy of Psi_0 on [-t, t].

    Differencing two O(1) energies loses the deficit to round-off while it is
    still far below machine precision relative to 2 sigma; integrating the
    removed piece keeps it resolvable.
    """
    base = fold(profile, 0.0) if profile.orientation == "increasing" else replace(profile, t=0.0)
    return energy1d(base, (-t, t)).unnormalized


def ode_residual(profile: Profile1D, r):
    """eps * q'' - W'(q) / eps for the profile q."""
    v, _, d2 = profile.evaluate(r)
    return profile.eps * d2 - profile.well.w1(v) / profile.eps
