"""Allen-Cahn energy, its forced version and first variation on chart grids."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .manifold_scenarios import ChartGrid
from .wells_profiles import STANDARD_WELL, DoubleWell


@dataclass
class EnergyReport:
    total: float
    dirichlet: float
    potential: float
    by_region: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _two_sigma(well: DoubleWell) -> float:
    return 2.0 * well.sigma


def ac_energy(grid: ChartGrid, u: np.ndarray, eps: float, well: DoubleWell = STANDARD_WELL,
              regions: dict[str, np.ndarray] | None = None) -> EnergyReport:
    """E(u) = (1/2 sigma) int eps |grad u|^2 / 2 + W(u) / eps, both parts normalised."""
    u = np.asarray(u, dtype=float)
    norm = 1.0 / _two_sigma(well)
    pot_cells = well.w(u) / eps * grid.cell_volume
    dirichlet = norm * 0.5 * eps * grid.dirichlet(u)
    potential = norm * float(pot_cells.sum())
    rep = EnergyReport(dirichlet + potential, dirichlet, potential)
    if regions:
        dens = norm * (0.5 * eps * grid.dirichlet_cells(u) + pot_cells)
        rep.by_region = {name: float(dens[mask].sum()) for name, mask in regions.items()}
    return rep


def forced_energy(grid: ChartGrid, u: np.ndarray, eps: float, mu: float,
                  well: DoubleWell = STANDARD_WELL) -> float:
    if mu < 0:
        raise ValueError("forcing must be non-negative")
    e = ac_energy(grid, u, eps, well).total
    return e - mu / _two_sigma(well) * grid.integrate(u)


def first_variation(grid: ChartGrid, u: np.ndarray, eps: float, mu: float = 0.0,
                    well: DoubleWell = STANDARD_WELL) -> np.ndarray:
    """eps Lap u - W'(u)/eps + mu, i.e. minus 2 sigma times the L2 gradient of F."""
    u = np.asarray(u, dtype=float)
    return eps * grid.laplacian(u) - well.w1(u) / eps + mu


def w12_distance(grid: ChartGrid, u: np.ndarray, v: np.ndarray) -> float:
    d = np.asarray(u, dtype=float) - v
    return math.sqrt(max(grid.integrate(d * d) + grid.dirichlet(d), 0.0))


def region_masks(scenario, grid: ChartGrid | None = None, hole_radius: float | None = None,
                 tube: float | None = None) -> dict[str, np.ndarray]:
    """Named node sets: tube around M, the part of it over the hole, and the rest."""
    g = grid or scenario.grid
    s = np.abs(scenario.normal_coordinate(g))
    width = scenario.surface.omega if tube is None else tube
    in_tube = s < width
    masks = {"tube": in_tube}
    if hole_radius is not None:
        a = np.broadcast_to(scenario.tangential_distance(g), g.shape)
        hole = in_tube & (a < hole_radius)
        masks["hole"] = hole
        masks["tube"] = in_tube & ~hole
    masks["complement"] = ~in_tube
    return masks
