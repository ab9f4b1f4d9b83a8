"""Allen-Cahn sweep-outs on desk-scale manifolds: profiles, geometry, segments, forced flow."""

from .ac_energy import ac_energy, first_variation, w12_distance
from .manifold_scenarios import make_scenario
from .wells_profiles import STANDARD_WELL, DoubleWell, mu_eps

__all__ = ["STANDARD_WELL", "DoubleWell", "ac_energy", "first_variation", "make_scenario", "mu_eps", "w12_distance"]
__version__ = "0.1.0"
