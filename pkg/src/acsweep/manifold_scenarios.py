"""Chart grids for the symmetric test manifolds.

Every scenario is a separable 2D chart (x1, x2) with metric
diag(rho^2, rho^2 r(x1)^2) and volume density a(x1) b(x2). The reference
hypersurface M sits at a constant value of x1 (the equator for spheres, a
meridian circle for the torus). Grids are cell centred: nodes are cell
midpoints and fluxes live on faces, so pole faces carry zero flux and no
node sits on a coordinate singularity.

Fields are plain float arrays of shape ``grid.shape``.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

SCENARIOS = ("sphere2", "sphere3", "torus")


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Axis:
    name: str
    faces: np.ndarray
    boundary: str  # periodic | pole | clamped | mirror (zero-flux symmetry plane)

    @classmethod
    def uniform(cls, name: str, lo: float, hi: float, n: int, boundary: str) -> "Axis":
        if boundary not in ("periodic", "pole", "clamped", "mirror"):
            raise GeometryError(f"unknown boundary type {boundary!r}")
        if n < 1:
            raise GeometryError("axis needs at least one cell")
        return cls(name, np.linspace(lo, hi, n + 1), boundary)

    @cached_property
    def nodes(self) -> np.ndarray:
        return 0.5 * (self.faces[1:] + self.faces[:-1])

    @cached_property
    def widths(self) -> np.ndarray:
        return np.diff(self.faces)

    @property
    def size(self) -> int:
        return len(self.faces) - 1

    @property
    def period(self) -> float:
        return float(self.faces[-1] - self.faces[0])

    @property
    def spacing(self) -> float:
        return float(self.widths.max())


@dataclass(frozen=True)
class HypersurfaceRef:
    name: str
    n: int  # dimension of M
    area: float
    inj_radius: float
    ric_min: float
    second_ff_sq: float
    ric_normal: float
    omega: float
    c_k: float  # semi-width of the Fermi tube used by the constructions
    jacobian_constant: float  # C_K in |J - 1| <= 2 C_K s

    def __post_init__(self):
        if self.area <= 0:
            raise GeometryError("hypersurface area must be positive")
        if not 0 < self.omega < self.inj_radius:
            raise GeometryError("tube half-width must lie in (0, inj)")

    def to_dict(self) -> dict:
        return asdict(self)


class ChartGrid:
    """Separable structured chart with finite-volume Laplace-Beltrami operator.

    ``a_int``/``b_int`` are antiderivatives of the density factors, so cell
    volumes are exact; ``a``/``b`` are the factors themselves, used on faces.
    """

    def __init__(
        self,
        scenario: str,
        radius: float,
        ax1: Axis,
        ax2: Axis,
        a: Callable,
        a_int: Callable,
        b: Callable,
        b_int: Callable,
        stretch: Callable,
        mirror: tuple[bool, bool] = (False, False),
    ):
        self.scenario = scenario
        self.mirror = mirror  # x1 folded at its upper end, x2 folded at 0
        self.radius = float(radius)
        self.ax1 = ax1
        self.ax2 = ax2
        self._a, self._a_int = a, a_int
        self._b, self._b_int = b, b_int
        self._stretch = stretch  # r(x1): the x2 metric coefficient is (rho r)^2
        # cell weights in each direction
        self.w1 = np.diff(a_int(ax1.faces))
        self.w2 = np.diff(b_int(ax2.faces))
        if np.any(self.w1 <= 0) or np.any(self.w2 <= 0):
            raise GeometryError("non-positive cell volume")
        self.cell_volume = np.outer(self.w1, self.w2)
        self.total_volume = float(self.cell_volume.sum())
        self.c1, self.c1_wrap = self._face_coefficients(ax1, a, 1.0 / self.radius**2)
        self.c2, self.c2_wrap = self._face_coefficients(ax2, b, 1.0)
        self.inv_r2 = 1.0 / (self.radius * stretch(ax1.nodes)) ** 2

    @staticmethod
    def _face_coefficients(ax: Axis, dens: Callable, scale: float):
        x = ax.nodes
        inner = scale * dens(ax.faces[1:-1]) / np.diff(x)
        wrap = 0.0
        if ax.boundary == "periodic" and ax.size > 1:
            gap = x[0] + ax.period - x[-1]
            wrap = scale * float(dens(np.array([ax.faces[0]]))[0]) / gap
        return inner, wrap

    # -- basic geometry ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ax1.size, self.ax2.size)

    @property
    def h(self) -> float:
        """Largest metric spacing in the normal direction."""
        return self.radius * self.ax1.spacing

    @cached_property
    def x1(self) -> np.ndarray:
        return np.broadcast_to(self.ax1.nodes[:, None], self.shape)

    @cached_property
    def x2(self) -> np.ndarray:
        return np.broadcast_to(self.ax2.nodes[None, :], self.shape)

    def metric(self, i: int, j: int) -> np.ndarray:
        r = self._stretch(self.ax1.nodes[i])
        return np.diag([self.radius**2, (self.radius * r) ** 2])

    @cached_property
    def vol(self) -> np.ndarray:
        return np.outer(self._a(self.ax1.nodes), self._b(self.ax2.nodes))

    def integrate(self, f) -> float:
        return float(np.sum(np.asarray(f) * self.cell_volume))

    def constant(self, value: float) -> np.ndarray:
        return np.full(self.shape, float(value))

    def reduced(self) -> "ChartGrid":
        """Same normal axis, a single cell in the x2 direction.

        Exact for fields that do not depend on x2.
        """
        ax2 = Axis(self.ax2.name, self.ax2.faces[[0, -1]].copy(), self.ax2.boundary)
        return ChartGrid(self.scenario, self.radius, self.ax1, ax2, self._a, self._a_int,
                         self._b, self._b_int, self._stretch, (self.mirror[0], False))

    @property
    def is_reduced(self) -> bool:
        return self.ax2.size == 1

    def broadcast(self, field: np.ndarray, target: "ChartGrid") -> np.ndarray:
        if field.shape == target.shape:
            return field
        if field.shape[1] != 1 or field.shape[0] != target.shape[0]:
            raise GeometryError("can only broadcast x2-independent fields")
        return np.repeat(field, target.shape[1], axis=1)

    # -- stencils -------------------------------------------------------------

    def _fluxes(self, u: np.ndarray):
        f1 = self.c1[:, None] * np.diff(u, axis=0) * self.w2[None, :]
        f2 = self.c2[None, :] * np.diff(u, axis=1) * (self.w1 * self.inv_r2)[:, None]
        g1 = g2 = None
        if self.c1_wrap:
            g1 = self.c1_wrap * (u[0] - u[-1]) * self.w2
        if self.c2_wrap:
            g2 = self.c2_wrap * (u[:, 0] - u[:, -1]) * self.w1 * self.inv_r2
        return f1, f2, g1, g2

    def divergence_of_gradient(self, u: np.ndarray) -> np.ndarray:
        """Integral of Laplacian u over each cell (sum of outgoing face fluxes)."""
        f1, f2, g1, g2 = self._fluxes(u)
        out = np.zeros(self.shape)
        out[:-1] += f1
        out[1:] -= f1
        out[:, :-1] += f2
        out[:, 1:] -= f2
        if g1 is not None:
            out[-1] += g1
            out[0] -= g1
        if g2 is not None:
            out[:, -1] += g2
            out[:, 0] -= g2
        return out

    def laplacian(self, u: np.ndarray) -> np.ndarray:
        return self.divergence_of_gradient(u) / self.cell_volume

    def dirichlet(self, u: np.ndarray) -> float:
        """Integral of |grad u|^2 as a sum over faces.

        Equals -sum(V u Lap u) exactly, which keeps gradient-flow energy
        identities free of quadrature mismatch.
        """
        f1, f2, g1, g2 = self._fluxes(u)
        total = np.sum(f1 * np.diff(u, axis=0)) + np.sum(f2 * np.diff(u, axis=1))
        if g1 is not None:
            total += np.sum(g1 * (u[0] - u[-1]))
        if g2 is not None:
            total += np.sum(g2 * (u[:, 0] - u[:, -1]))
        return float(total)

    def dirichlet_cells(self, u: np.ndarray) -> np.ndarray:
        """Split of ``dirichlet(u)`` into cells, half of each face to either side."""
        f1, f2, g1, g2 = self._fluxes(u)
        e1 = 0.5 * f1 * np.diff(u, axis=0)
        e2 = 0.5 * f2 * np.diff(u, axis=1)
        out = np.zeros(self.shape)
        out[:-1] += e1
        out[1:] += e1
        out[:, :-1] += e2
        out[:, 1:] += e2
        if g1 is not None:
            w = 0.5 * g1 * (u[0] - u[-1])
            out[0] += w
            out[-1] += w
        if g2 is not None:
            w = 0.5 * g2 * (u[:, 0] - u[:, -1])
            out[:, 0] += w
            out[:, -1] += w
        return out

    def grad_norm(self, u: np.ndarray) -> np.ndarray:
        """Node-wise |grad u|, exact across kinks of distance-like fields.

        Per axis: central difference where the two one-sided slopes agree in
        sign, the larger one-sided slope otherwise.
        """
        s1 = self._axis_slope(u, 0, self.ax1) / self.radius
        s2 = self._axis_slope(u, 1, self.ax2) * np.sqrt(self.inv_r2)[:, None]
        return np.sqrt(s1**2 + s2**2)

    @staticmethod
    def _axis_slope(u: np.ndarray, axis: int, ax: Axis) -> np.ndarray:
        n = ax.size
        if n == 1:
            return np.zeros_like(u)
        x = ax.nodes
        d = np.diff(u, axis=axis) / np.expand_dims(np.diff(x), 1 - axis)
        shape = list(u.shape)
        shape[axis] = 1
        if ax.boundary == "periodic":
            wrap = (np.take(u, [0], axis) - np.take(u, [n - 1], axis)) / (x[0] + ax.period - x[-1])
            fwd = np.concatenate([d, wrap], axis=axis)
            bwd = np.concatenate([wrap, d], axis=axis)
        else:
            fwd = np.concatenate([d, np.take(d, [n - 2], axis)], axis=axis)
            bwd = np.concatenate([np.take(d, [0], axis), d], axis=axis)
        same = fwd * bwd > 0
        return np.where(same, 0.5 * (fwd + bwd), np.maximum(np.abs(fwd), np.abs(bwd)))

    # -- export ---------------------------------------------------------------

    def header(self) -> dict:
        return {
            "scenario": self.scenario,
            "radius": self.radius,
            "dims": [
                {"name": ax.name, "range": [float(ax.faces[0]), float(ax.faces[-1])],
                 "count": ax.size, "boundary": ax.boundary}
                for ax in (self.ax1, self.ax2)
            ],
            "mirror": list(self.mirror),
        }


# ---------------------------------------------------------------------------
# scenarios


@dataclass(eq=False)
class Scenario:
    grid: ChartGrid
    surface: HypersurfaceRef

    @property
    def name(self) -> str:
        return self.grid.scenario

    @property
    def radius(self) -> float:
        return self.grid.radius

    @property
    def ricci_positive(self) -> bool:
        return self.surface.ric_min > 0

    def reduced(self) -> "Scenario":
        return Scenario(self.grid.reduced(), self.surface)

    # symmetric charts cover a fundamental domain of the reflections through M
    # (and, on S^2, through the plane containing b); fields extend evenly

    @property
    def is_folded(self) -> bool:
        return any(self.grid.mirror)

    @cached_property
    def unfolded(self) -> "Scenario":
        if not self.is_folded:
            return self
        g = self.grid
        n1 = 2 * g.shape[0] if g.mirror[0] else g.shape[0]
        n2 = 2 * g.shape[1] if g.mirror[1] else g.shape[1]
        full = make_scenario(self.name, self.radius, n1, max(n2, 2) if g.mirror[1] else n2, self.surface.omega)
        return full.reduced() if g.is_reduced else full

    def expand(self, u: np.ndarray) -> np.ndarray:
        g = self.grid
        if g.mirror[0]:
            u = np.concatenate([u, u[::-1]], axis=0)
        if g.mirror[1]:
            u = np.concatenate([u[:, ::-1], u], axis=1)
        return u

    def restrict(self, u: np.ndarray) -> np.ndarray:
        n1, n2 = self.grid.shape
        g = self.grid
        return u[:n1, (u.shape[1] - n2 if g.mirror[1] else 0):][:, :n2]

    # signed normal coordinate s of the Fermi chart; s > 0 on the x1 < x1(M) side
    def normal_coordinate(self, grid: ChartGrid | None = None) -> np.ndarray:
        g = grid or self.grid
        if self.name == "torus":
            th = np.mod(g.x1 + math.pi, 2 * math.pi) - math.pi
            return -g.radius * th
        return g.radius * (0.5 * math.pi - g.x1)

    def tangential_distance(self, grid: ChartGrid | None = None) -> np.ndarray:
        """Geodesic distance along M from the hole centre b to the foot point."""
        g = grid or self.grid
        return self.tangential_distance_of(g.x2)

    def tangential_distance_of(self, x2) -> np.ndarray:
        x2 = np.asarray(x2, dtype=float)
        if self.name == "sphere3":
            return self.radius * np.abs(x2)
        w = np.mod(x2, 2 * math.pi)
        return self.radius * np.minimum(w, 2 * math.pi - w)

    def cut_distance(self, grid: ChartGrid | None = None) -> np.ndarray:
        """Distance to the analytically known cut locus of M."""
        g = grid or self.grid
        return self.surface_cut_gap(self.normal_coordinate(g))

    def surface_cut_gap(self, s) -> np.ndarray:
        return 0.5 * math.pi * self.radius - np.abs(s)

    def projection_jacobian(self, s) -> np.ndarray:
        """|J Pi| at signed normal distance s from M."""
        s = np.asarray(s, dtype=float)
        if self.name == "torus":
            return np.ones_like(s)
        return 1.0 / np.cos(s / self.radius) ** self.surface.n

    def area_element(self, s) -> np.ndarray:
        return 1.0 / self.projection_jacobian(s)

    def hole_area(self, radius: float) -> float:
        """H^n of a geodesic ball of M centred at b."""
        rho = self.radius
        if self.name == "sphere3":
            return 2 * math.pi * rho**2 * (1 - math.cos(radius / rho))
        return 2.0 * radius

    def tangential_measure(self, a) -> np.ndarray:
        """Density of H^n on M in the radial variable a (distance from b)."""
        a = np.asarray(a, dtype=float)
        if self.name == "sphere3":
            return 2 * math.pi * self.radius * np.sin(a / self.radius)
        return np.full_like(a, 2.0)

    def tangential_extent(self) -> float:
        return math.pi * self.radius


def _sphere_jacobian_constant(radius: float, n: int, c_k: float) -> float:
    # second fundamental form vanishes on the equator; the Jacobian bound is
    # then carried by the curvature of the level sets, evaluated in closed form
    s = np.linspace(c_k / 2000, c_k, 2000)
    jac = 1.0 / np.cos(s / radius) ** n
    return float(max(np.max((jac - 1) / (2 * s)), np.max((1 - 1 / jac) / (2 * s))))


def cells_for_eps(radius: float, eps: float, ratio: float = 4.0, span: float = math.pi) -> int:
    """Even cell count over ``span`` (in chart units) giving metric spacing <= eps/ratio."""
    n = math.ceil(span * radius / (eps / ratio))
    return n + (n % 2)


def make_scenario(name: str, radius: float = 3.0, n1: int = 400, n2: int = 64,
                  omega: float | None = None, folded: bool = False) -> Scenario:
    """Scenario on a chart with n1 x n2 cells.

    ``folded`` keeps only the part s >= 0 (and, on S^2, phi >= 0) of that
    grid, with zero-flux mirror faces; volumes are scaled so integrals and
    energies refer to the whole manifold. Exact for fields with those symmetries.
    """
    if name not in SCENARIOS:
        raise GeometryError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    if radius <= 0:
        raise GeometryError("radius must be positive")
    if n1 % 2:
        raise GeometryError("normal cell count must be even so that M lies on a face")
    rho = float(radius)
    if folded and name == "torus":
        raise GeometryError("folded charts are only set up for the spheres")
    if folded and name == "sphere2" and n2 > 1 and n2 % 2:
        raise GeometryError("folding in phi needs an even cell count")
    fold2 = folded and name == "sphere2" and n2 > 1
    k = (2.0 if folded else 1.0) * (2.0 if fold2 else 1.0)
    th_hi = 0.5 * math.pi if folded else math.pi
    m1 = n1 // 2 if folded else n1
    if name == "sphere2":
        ax1 = Axis.uniform("theta", 0.0, th_hi, m1, "pole")
        ax2 = (Axis.uniform("phi", 0.0, math.pi, n2 // 2, "mirror") if fold2
               else Axis.uniform("phi", -math.pi, math.pi, n2, "periodic"))
        if folded and n2 == 1:
            ax2 = Axis.uniform("phi", 0.0, math.pi, 1, "mirror")
            k = 4.0
        grid = ChartGrid(
            name, rho, ax1, ax2,
            a=lambda x: k * rho**2 * np.sin(x), a_int=lambda x: -k * rho**2 * np.cos(x),
            b=np.ones_like, b_int=lambda x: np.asarray(x, dtype=float),
            stretch=np.sin, mirror=(folded, fold2),
        )
        n, area, ric = 1, 2 * math.pi * rho, 1.0 / rho**2
    elif name == "sphere3":
        ax1 = Axis.uniform("theta", 0.0, th_hi, m1, "pole")
        ax2 = Axis.uniform("alpha", 0.0, math.pi, n2, "pole")
        grid = ChartGrid(
            name, rho, ax1, ax2,
            a=lambda x: k * 2 * math.pi * rho**3 * np.sin(x) ** 2,
            a_int=lambda x: k * math.pi * rho**3 * (x - np.sin(x) * np.cos(x)),
            b=np.sin, b_int=lambda x: -np.cos(x),
            stretch=np.sin, mirror=(folded, False),
        )
        n, area, ric = 2, 4 * math.pi * rho**2, 2.0 / rho**2
    else:
        ax1 = Axis.uniform("theta", -math.pi, math.pi, n1, "periodic")
        ax2 = Axis.uniform("phi", -math.pi, math.pi, n2, "periodic")
        grid = ChartGrid(
            name, rho, ax1, ax2,
            a=lambda x: rho**2 * np.ones_like(x), a_int=lambda x: rho**2 * np.asarray(x, dtype=float),
            b=np.ones_like, b_int=lambda x: np.asarray(x, dtype=float),
            stretch=np.ones_like,
        )
        n, area, ric = 1, 2 * math.pi * rho, 0.0
    inj = math.pi * rho
    om = 0.9 * 0.5 * math.pi * rho if omega is None else float(omega)
    c_k = 0.9 * 0.5 * math.pi * rho
    jac_c = 0.0 if name == "torus" else _sphere_jacobian_constant(rho, n, c_k)
    surface = HypersurfaceRef(
        name="equator" if name != "torus" else "meridian",
        n=n, area=area, inj_radius=inj, ric_min=ric, second_ff_sq=0.0,
        ric_normal=ric, omega=om, c_k=c_k, jacobian_constant=jac_c,
    )
    return Scenario(grid, surface)


def scenario_from_config(cfg: dict) -> Scenario:
    """Build from a mapping with keys name, radius, n1, n2 and optional omega."""
    return make_scenario(cfg["name"], float(cfg.get("radius", 3.0)), int(cfg["n1"]),
                         int(cfg.get("n2", 1)), cfg.get("omega"), bool(cfg.get("folded", False)))


def export_field(scenario: Scenario, field: np.ndarray, path: str | Path, fmt: str = "bin") -> Path:
    """Write a field as flat float64 binary (or CSV) plus a JSON header."""
    path = Path(path)
    head = scenario.grid.header() | {"shape": list(field.shape), "dtype": "float64", "order": "C"}
    if fmt == "csv":
        np.savetxt(path, field, delimiter=",")
    else:
        np.ascontiguousarray(field, dtype=np.float64).tofile(path)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(head, indent=1))
    return path


# ---------------------------------------------------------------------------
# distance to M


@dataclass
class DistanceField:
    values: np.ndarray
    cut_gap: np.ndarray  # distance to the marked cut locus
    lipschitz_violations: np.ndarray  # boolean mask

    @property
    def lipschitz_ok(self) -> bool:
        return not self.lipschitz_violations.any()


def dist_to_M(scenario: Scenario, grid: ChartGrid | None = None) -> DistanceField:
    g = grid or scenario.grid
    d = np.abs(scenario.normal_coordinate(g))
    gn = g.grad_norm(d)
    bad = gn > 1.0 + 5.0 * g.h
    if bad.any():
        log.warning("distance field: |grad d| exceeds 1 + 5h at %d nodes", int(bad.sum()))
    return DistanceField(d, scenario.cut_distance(g), bad)


def distance_laplacian_check(scenario: Scenario, grid: ChartGrid | None = None,
                             margin_cells: float = 3.0) -> tuple[float, np.ndarray]:
    """Max of the discrete Laplacian of d over the admissible node set.

    Admissible: inside the tube, at least ``margin_cells`` spacings away
    from the cut locus and from M itself (where d has its own kink).
    """
    g = grid or scenario.grid
    df = dist_to_M(scenario, g)
    lap = g.laplacian(df.values)
    h = g.h
    mask = (df.values < scenario.surface.omega) & (df.cut_gap >= margin_cells * h) & (df.values >= margin_cells * h)
    return float(lap[mask].max()), mask


# ---------------------------------------------------------------------------
# level sets


@dataclass
class LevelSetArea:
    area: float
    coarse: float
    stable: bool


def level_set_area(scenario: Scenario, field: np.ndarray, t: float, grid: ChartGrid | None = None,
                   rtol: float = 1e-3) -> LevelSetArea:
    """Area of {field = t} via the coarea formula with a hat-shaped band.

    The hat of half-width w integrates |grad f| against cell volumes; with
    w equal to the normal spacing the hats form a partition of unity, which
    makes the estimate second order. The half-width 2w is the coarse check.
    """
    g = grid or scenario.grid
    gap = scenario.cut_distance(g)
    near = np.abs(field - t) < g.h
    if near.any() and gap[near].min() < g.h:
        warnings.warn("level set lies within one cell of the cut locus", RuntimeWarning, stacklevel=2)
    gn = g.grad_norm(field)

    def band(w):
        hat = np.clip(1.0 - np.abs(field - t) / w, 0.0, None) / w
        return float(np.sum(hat * gn * g.cell_volume))

    fine, coarse = band(g.h), band(2 * g.h)
    return LevelSetArea(fine, coarse, abs(fine - coarse) <= rtol * max(abs(fine), 1e-300))


def area_decay_bound(scenario: Scenario, s0: float, t: float) -> float:
    return math.exp(-0.5 * scenario.surface.ric_min * (2 * s0 * t + t * t))


# ---------------------------------------------------------------------------
# normal graphs


def _embed(scenario: Scenario, x1, x2):
    rho = scenario.radius
    if scenario.name == "torus":
        return np.stack([rho * np.asarray(x1), rho * np.asarray(x2)], axis=-1)
    st = np.sin(x1)
    return rho * np.stack([st * np.cos(x2), st * np.sin(x2), np.cos(x1)], axis=-1)


def _chord_to_geodesic(scenario: Scenario, chord):
    if scenario.name == "torus":
        return chord
    rho = scenario.radius
    return 2 * rho * np.arcsin(np.minimum(1.0, chord / (2 * rho)))


class NormalGraph:
    """Two-sided normal graph s = +-(c + t phi(a)) over M.

    ``phi`` is a non-negative function of the tangential distance a from b.
    """

    def __init__(self, scenario: Scenario, c: float, t: float, phi: Callable, samples: int = 16384):
        self.scenario, self.c, self.t, self.phi = scenario, float(c), float(t), phi
        ext = scenario.tangential_extent()
        a = np.linspace(0.0, ext, 4097)
        hmax = self.c + self.t * float(np.max(phi(a)))
        if self.c < 0 or self.t < 0:
            raise GeometryError("graph parameters must be non-negative")
        if hmax >= scenario.surface.c_k:
            raise GeometryError(f"graph height {hmax:.4g} exits the tube of semi-width {scenario.surface.c_k:.4g}")
        self.hmax = hmax
        self.hmin = self.c + self.t * float(np.min(phi(a)))
        self.samples = samples

    def height(self, x2) -> np.ndarray:
        return self.c + self.t * self.phi(self.scenario.tangential_distance_of(x2))

    def _param_range(self):
        ax2 = self.scenario.grid.ax2
        return float(ax2.faces[0]), float(ax2.faces[-1])

    def _points(self, u):
        sc = self.scenario
        s = self.height(u)
        if sc.name == "torus":
            return _embed(sc, s / sc.radius, u)
        return _embed(sc, 0.5 * math.pi - s / sc.radius, u)

    def signed_distance(self, grid: ChartGrid | None = None, band: float | None = None,
                        band_below: float | None = None) -> np.ndarray:
        """Signed distance on the grid nodes.

        Nodes farther than ``band`` above the highest point of the graph (or
        ``band_below`` under its lowest point) get the one-sided bound
        |s| - hmax (resp. |s| - hmin) instead of the exact distance; callers
        pass bands beyond which only the sign matters.
        """
        sc = self.scenario
        g = grid or sc.grid
        if self.t == 0.0:
            return np.abs(sc.normal_coordinate(g)) - self.c
        if g.is_reduced:
            raise GeometryError("graph distances need the full tangential grid")
        n1, n2 = g.shape
        # the fields are even in s, and even in x2 when x2 is symmetric about b;
        # a folded grid already holds only s >= 0
        folded = g.mirror[0]
        rows = np.arange(n1) if folded else np.arange(n1 // 2)
        mirror_cols = sc.grid.ax2.boundary == "periodic" and np.allclose(g.ax2.nodes, -g.ax2.nodes[::-1])
        cols = np.arange(n2 // 2, n2) if mirror_cols else np.arange(n2)
        s = np.abs(sc.normal_coordinate(g))[np.ix_(rows, cols)]
        x2 = np.broadcast_to(g.x2, g.shape)[np.ix_(rows, cols)]
        part = np.empty(s.shape)
        work = np.ones(s.shape, dtype=bool)
        if band is not None:
            above = s > self.hmax + band
            part[above] = s[above] - self.hmax
            work &= ~above
        if band_below is not None:
            below = s < self.hmin - band_below
            part[below] = s[below] - self.hmin
            work &= ~below
        part[work] = self._distance(s[work], x2[work])
        if mirror_cols:
            part = np.concatenate([part[:, ::-1], part], axis=1)
        if folded:
            out = part
        else:
            out = np.empty(g.shape)
            out[: n1 // 2] = part
            out[n1 // 2:] = part[::-1]
        # re-impose the vertical-segment bound with each node's own coordinates,
        # so mirrored values cannot exceed it by round-off
        # and the slab bounds: the graph lies in hmin <= |s| <= hmax
        s_abs = np.abs(sc.normal_coordinate(g))
        vertical = s_abs - self.height(g.x2)
        mag = np.minimum(np.abs(out), np.abs(vertical))
        floor = np.where(vertical < 0, self.hmin - s_abs, s_abs - self.hmax)
        mag = np.maximum(mag, floor)
        return np.where(vertical < 0, -mag, mag)

    def _distance(self, sw: np.ndarray, xw: np.ndarray) -> np.ndarray:
        sc = self.scenario
        lo, hi = self._param_range()
        periodic = sc.grid.ax2.boundary == "periodic"
        u = np.linspace(lo, hi, self.samples + 1)
        if periodic:
            u = u[:-1]
        du = u[1] - u[0]
        pts = self._points(u)
        if sc.name == "torus":
            q = _embed(sc, sw / sc.radius, xw)
            box = np.array([1e9, 2 * math.pi * sc.radius])
            tree = cKDTree(np.mod(pts, box), boxsize=box)
            _, k = tree.query(np.mod(q, box))
        else:
            q = _embed(sc, 0.5 * math.pi - sw / sc.radius, xw)
            tree = cKDTree(pts)
            _, k = tree.query(q)

        def dist(par):
            p = self._points(par)
            diff = q - p
            if sc.name == "torus":
                per = 2 * math.pi * sc.radius
                diff[:, 1] -= per * np.round(diff[:, 1] / per)
            return _chord_to_geodesic(sc, np.sqrt(np.sum(diff * diff, axis=1)))

        a_lo = u[k] - du
        a_hi = u[k] + du
        if not periodic:
            a_lo, a_hi = np.maximum(a_lo, lo), np.minimum(a_hi, hi)
        gr = 0.5 * (math.sqrt(5) - 1)
        x_a = a_hi - gr * (a_hi - a_lo)
        x_b = a_lo + gr * (a_hi - a_lo)
        f_a, f_b = dist(x_a), dist(x_b)
        for _ in range(24):
            left = f_a < f_b
            a_hi = np.where(left, x_b, a_hi)
            a_lo = np.where(left, a_lo, x_a)
            x_b_new = np.where(left, x_a, a_lo + gr * (a_hi - a_lo))
            x_a_new = np.where(left, a_hi - gr * (a_hi - a_lo), x_b)
            f_new = dist(np.where(left, x_a_new, x_b_new))
            f_a, f_b = np.where(left, f_new, f_b), np.where(left, f_a, f_new)
            x_a, x_b = x_a_new, x_b_new
        mag = np.minimum(np.minimum(f_a, f_b), dist(u[k]))
        # the normal segment to the graph point over the same foot is admissible
        # and exact where the graph is flat
        vertical = sw - self.height(xw)
        mag = np.minimum(mag, np.abs(vertical))
        return np.where(vertical < 0, -mag, mag)


def signed_dist_to_graph(scenario: Scenario, c: float, t: float, phi: Callable,
                         grid: ChartGrid | None = None) -> np.ndarray:
    """Signed distance to the graph s = c + t phi, negative between M and the graph."""
    return NormalGraph(scenario, c, t, phi).signed_distance(grid)
