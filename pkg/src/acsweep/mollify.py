"""Geodesic mollification on the scenario grids.

The kernel is eta(d(x, y) / delta) with eta(s) = exp(-1 / (1 - s^2)) on |s| < 1.
Two back ends share one interface:

* circulant: full grids whose x2 axis is a uniform rotation angle (S^2, torus).
  The kernel only depends on (row_i, row_j, x2 offset), so each row pair is
  one FFT multiply.
* orbit: grids where a rotation symmetry is not represented (the x2-reduced
  S^2 grid, the S^3 slice). Each node stands for a whole orbit; the kernel
  weight is averaged over the orbit with Gauss-Legendre in the rotation angle.

``raw`` weights use the Euclidean normaliser c_n delta^(n+1), so the kernel
mass is 1 + O(delta^2). ``normalized`` weights divide by the discrete mass at
each node (Shepard weights): constants are reproduced exactly and the
operator stays monotone; it tends to the identity once delta drops below the
grid spacing.
"""

from __future__ import annotations

import math
from functools import cached_property

import numpy as np
from scipy import integrate, sparse
from scipy.spatial import cKDTree

from .manifold_scenarios import ChartGrid, Scenario


class MollifierError(ValueError):
    pass


def eta(s):
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1.0
    out = np.zeros_like(s)
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


def kernel_normalizer(dim: int) -> float:
    """c_n = |S^(dim-1)| int_0^1 eta(s) s^(dim-1) ds, dim = n + 1."""
    sphere = 2 * math.pi ** (dim / 2) / math.gamma(dim / 2)
    val, _ = integrate.quad(lambda s: float(eta(np.array([s]))[0]) * s ** (dim - 1), 0.0, 1.0)
    return sphere * val


def default_delta0(scenario: Scenario) -> float:
    return min(scenario.surface.inj_radius / 4, scenario.surface.omega / 4)


class MollifierKernel:
    def __init__(self, scenario: Scenario, grid: ChartGrid, delta: float, mode: str = "normalized",
                 delta0: float | None = None, gauss: int | None = None, subcell: int | None = None):
        if mode not in ("raw", "normalized"):
            raise MollifierError("mode is 'raw' or 'normalized'")
        d0 = default_delta0(scenario) if delta0 is None else delta0
        if not 0 < delta < d0:
            raise MollifierError(f"delta = {delta} must lie in (0, delta0 = {d0:.4g})")
        self.scenario, self.grid, self.delta, self.mode = scenario, grid, float(delta), mode
        self.dim = scenario.surface.n + 1
        self.cn = kernel_normalizer(self.dim)
        # quadrature: Gauss points in the orbit angle, and per cell side over source cells
        s3 = scenario.name == "sphere3"
        self.gauss = gauss or (16 if s3 else 48)
        self.subcell = subcell or (2 if s3 else (8 if grid.is_reduced else 4))
        if scenario.name == "sphere3" or grid.is_reduced:
            if scenario.name == "torus":
                raise MollifierError("orbit kernels need a rotation symmetry")
            self._build_orbit()
            self.backend = "orbit"
        else:
            self._build_circulant()
            self.backend = "circulant"

    # -- construction -------------------------------------------------------

    def _row_distance(self, ti, tj, dphi):
        rho = self.scenario.radius
        if self.scenario.name == "torus":
            dt = np.mod(ti - tj + math.pi, 2 * math.pi) - math.pi
            return rho * np.sqrt(dt**2 + dphi**2)
        c = np.cos(ti) * np.cos(tj) + np.sin(ti) * np.sin(tj) * np.cos(dphi)
        return rho * np.arccos(np.clip(c, -1.0, 1.0))

    def _cell_nodes(self, axis, density):
        """Sub-cell Gauss nodes and weights (density included) for every cell of an axis."""
        x, w = np.polynomial.legendre.leggauss(self.subcell)
        lo, hi = axis.faces[:-1, None], axis.faces[1:, None]
        pts = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x
        wts = 0.5 * (hi - lo) * w * density(pts)
        return pts, wts

    def _x1_density(self):
        name = self.scenario.name
        rho = self.scenario.radius
        if name == "sphere2":
            return lambda t: rho**2 * np.sin(t)
        if name == "sphere3":
            return lambda t: 2 * math.pi * rho**3 * np.sin(t) ** 2
        return lambda t: rho**2 * np.ones_like(t)

    def _build_circulant(self):
        g = self.grid
        n1, n2 = g.shape
        th = g.ax1.nodes
        sub, sw = self._cell_nodes(g.ax1, self._x1_density())
        dphi = g.ax2.nodes - g.ax2.nodes[0]
        dphi = np.mod(dphi + math.pi, 2 * math.pi) - math.pi
        reach = self.delta / self.scenario.radius + np.max(g.ax1.widths)
        self._pairs = []  # (i, j, rfft of weights)
        mass = np.zeros(n1)
        periodic = g.ax1.boundary == "periodic"
        dx2 = g.ax2.widths[0]
        for i in range(n1):
            gap = np.abs(th - th[i])
            if periodic:
                gap = np.minimum(gap, 2 * math.pi - gap)
            for j in np.nonzero(gap < reach)[0]:
                w = np.zeros(n2)
                for q in range(self.subcell):
                    w += sw[j, q] * eta(self._row_distance(th[i], sub[j, q], dphi) / self.delta)
                w *= dx2
                if w.any():
                    self._pairs.append((i, j, np.fft.rfft(w)))
                    mass[i] += w.sum()
        self.mass_raw = np.repeat((mass / (self.cn * self.delta**self.dim))[:, None], n2, axis=1)
        self._row_mass = mass

    def _embed(self, th, al):
        """Orbit representatives in R^2 or R^3; chord lengths there are the smallest over the orbit."""
        rho = self.scenario.radius
        if self.scenario.name == "sphere3" and not self._sphere_orbit:
            return rho * np.stack([np.cos(th), np.sin(th) * np.cos(al), np.sin(th) * np.sin(al)], axis=1)
        return rho * np.stack([np.cos(th), np.sin(th)], axis=1)

    @property
    def _sphere_orbit(self) -> bool:
        """x2-reduced S^3: the orbit of a node is a 2-sphere rather than a circle."""
        return self.scenario.name == "sphere3" and self.grid.is_reduced

    def _pq(self, ti, ai, tj, aj):
        if self.scenario.name == "sphere3" and not self._sphere_orbit:
            P = np.cos(ti) * np.cos(tj) + np.sin(ti) * np.sin(tj) * np.cos(ai) * np.cos(aj)
            Q = np.sin(ti) * np.sin(tj) * np.sin(ai) * np.sin(aj)
        else:
            P = np.cos(ti) * np.cos(tj)
            Q = np.sin(ti) * np.sin(tj)
        return P, Q

    def _orbit_average(self, P, Q):
        """Orbit mean of eta(d/delta) with cos(d/rho) = P + Q cos(beta).

        Circle orbits: (1/pi) int_0^beta_max d beta. Two-sphere orbits:
        (1/2) int_0^beta_max sin(beta) d beta.
        """
        rho = self.scenario.radius
        cd = math.cos(self.delta / rho)
        with np.errstate(divide="ignore", invalid="ignore"):
            cb = np.where(Q > 1e-300, (cd - P) / Q, np.where(P > cd, -1.0, 1.0))
        bmax = np.arccos(np.clip(cb, -1.0, 1.0))
        x, wq = np.polynomial.legendre.leggauss(self.gauss)
        avg = np.zeros(np.shape(P))
        for xk, wk in zip(x, wq):
            beta = 0.5 * bmax * (xk + 1.0)
            c = np.clip(P + Q * np.cos(beta), -1.0, 1.0)
            f = eta(rho * np.arccos(c) / self.delta)
            avg += wk * (f * np.sin(beta) if self._sphere_orbit else f)
        return avg * 0.5 * bmax * (0.5 if self._sphere_orbit else 1.0 / math.pi)

    def _build_orbit(self):
        g = self.grid
        rho = self.scenario.radius
        s3 = self.scenario.name == "sphere3" and not self._sphere_orbit
        n1, n2 = g.shape
        n = n1 * n2
        t_sub, t_w = self._cell_nodes(g.ax1, self._x1_density())
        if s3:
            a_sub, a_w = self._cell_nodes(g.ax2, np.sin)
        elif self._sphere_orbit:
            a_sub = np.zeros((1, 1))
            a_w = np.full((1, 1), 2.0)  # int_0^pi sin(alpha); the orbit mean spans the rest
        else:
            a_sub = np.zeros((n2, 1))  # the orbit angle already spans x2
            a_w = g.ax2.widths[:, None]
        # every sub-cell quadrature point, tagged with its source cell
        r, c, p, q = (x.ravel() for x in np.meshgrid(np.arange(n1), np.arange(n2), np.arange(t_sub.shape[1]),
                                                       np.arange(a_sub.shape[1]), indexing="ij"))
        st, sa, sw, src = t_sub[r, p], a_sub[c, q], t_w[r, p] * a_w[c, q], r * n2 + c
        ti = np.broadcast_to(g.x1, g.shape).ravel()
        ai = np.broadcast_to(g.x2, g.shape).ravel()
        # exact pruning: a quadrature point contributes only if its nearest orbit point is within delta
        chord = 2 * rho * math.sin(min(self.delta / (2 * rho), 0.5 * math.pi)) * (1 + 1e-12)
        near = cKDTree(self._embed(ti, ai)).sparse_distance_matrix(
            cKDTree(self._embed(st, sa)), chord, output_type="ndarray")
        ii, kk = near["i"].astype(np.intp), near["j"].astype(np.intp)
        P, Q = self._pq(ti[ii], ai[ii], st[kk], sa[kk])
        w = sw[kk] * self._orbit_average(P, Q)
        jj = src[kk]
        keep = w > 0
        self._W = sparse.csr_matrix((w[keep], (ii[keep], jj[keep])), shape=(n, n))
        mass = np.asarray(self._W.sum(axis=1)).ravel()
        self._row_mass = mass
        self.mass_raw = (mass / (self.cn * self.delta**self.dim)).reshape(g.shape)

    # -- application ----------------------------------------------------------

    @cached_property
    def _norm(self) -> np.ndarray:
        if self.mode == "raw":
            return np.full(self.grid.shape, self.cn * self.delta**self.dim)
        if self.backend == "circulant":
            return np.repeat(self._row_mass[:, None], self.grid.shape[1], axis=1)
        return self._row_mass.reshape(self.grid.shape)

    def _weighted_sum(self, u: np.ndarray) -> np.ndarray:
        g = self.grid
        if self.backend == "orbit":
            return (self._W @ u.ravel()).reshape(g.shape)
        n1, n2 = g.shape
        uh = np.fft.rfft(u, axis=1)
        acc = np.zeros((n1, uh.shape[1]), dtype=complex)
        for i, j, wh in self._pairs:
            acc[i] += wh * uh[j]
        return np.fft.irfft(acc, n=n2, axis=1)

    def convolve_field(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != self.grid.shape:
            raise MollifierError("field does not live on the kernel grid")
        norm = self._norm
        empty = norm <= 0  # delta below the sub-cell spacing: no quadrature point in reach
        if not empty.any():
            return self._weighted_sum(u) / norm
        return np.where(empty, u, self._weighted_sum(u) / np.where(empty, 1.0, norm))

    def convolve_measure(self, node_mass: np.ndarray) -> np.ndarray:
        """Density of (measure * eta_delta) for a measure given as mass per cell."""
        m = np.asarray(node_mass, dtype=float) / self.grid.cell_volume
        return self._weighted_sum(m) / self._norm

    def point_mass(self, index: tuple[int, int]) -> np.ndarray:
        m = np.zeros(self.grid.shape)
        m[index] = 1.0
        return self.convolve_measure(m)

    @property
    def mass(self) -> np.ndarray:
        """Discrete kernel mass at every node (1 exactly in normalized mode)."""
        if self.mode == "normalized":
            return np.ones(self.grid.shape)
        return self.mass_raw


def laplacian_measure(grid: ChartGrid, u: np.ndarray) -> np.ndarray:
    """Laplacian of u as a measure: net face flux out of each cell.

    For a kinked field the flux jump across the kink lands in the adjacent
    cells, so the absolutely continuous and the jump part are both carried.
    """
    return grid.divergence_of_gradient(u)


def laplacian_commutator(kernel: MollifierKernel, u: np.ndarray, interior: np.ndarray | None = None) -> dict:
    """sup |Lap(u * eta) - (Lap u) * eta| and C_N = sup / ||u||_inf."""
    g = kernel.grid
    lhs = g.laplacian(kernel.convolve_field(u))
    rhs = kernel.convolve_measure(laplacian_measure(g, u))
    diff = np.abs(lhs - rhs)
    if interior is not None:
        diff = diff[interior]
    sup = float(diff.max())
    unorm = float(np.abs(u).max())
    return {"delta": kernel.delta, "sup": sup, "C_N": sup / unorm if unorm > 0 else math.nan}
