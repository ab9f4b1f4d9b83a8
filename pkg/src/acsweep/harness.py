"""Scenario runner: assembles the five segments into one path from -1 to +1
and checks its energy maximum against the calibrated bound."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .flow import FlowOptions, FlowSegment, build_barrier, choose_bridge_delta, segment_flow_to_plus_one, \
    segment_mollify_bridge
from .instability import DeformationPlan, calibrate
from .manifold_scenarios import Scenario, cells_for_eps, make_scenario
from .sweepout import SEGMENTS, SegmentTrace, SweepoutBuilder, fitted_constant, segment_close_hole, \
    segment_hole_deform, segment_to_minus_one

log = logging.getLogger(__name__)

# named presets; grid counts follow eps through the ratios
SCENARIOS = {
    "sphere2": {"name": "sphere2", "radius": 3.0, "h_ratio": 4.0, "tangential_ratio": 1.84, "folded": True},
    "sphere3": {"name": "sphere3", "radius": 6.0, "h_ratio": 2.0, "tangential_ratio": 2.0, "folded": True},
}

DEFAULT_EPS = {"sphere2": [0.04, 0.02], "sphere3": [0.05]}


class ConfigError(ValueError):
    pass


class CertificateFailure(RuntimeError):
    """A segment bound or flow property failed; ``segment`` and ``inequality`` name it."""

    def __init__(self, segment: str, inequality: str, detail: dict | None = None):
        super().__init__(f"{segment}: {inequality} fails ({detail or {}})")
        self.segment, self.inequality, self.detail = segment, inequality, detail or {}


@dataclass
class RunConfig:
    scenario: dict
    eps: list[float]
    plan: dict = field(default_factory=dict)
    samples: int = 128
    tolerances: dict = field(default_factory=dict)
    out: str = "runs/out"
    seed: int = 0  # no randomness in the pipeline; kept so property runs can be keyed by it

    @classmethod
    def preset(cls, name: str, eps: list[float] | None = None, out: str | None = None) -> "RunConfig":
        if name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; presets: {sorted(SCENARIOS)}")
        return cls(dict(SCENARIOS[name]), list(eps or DEFAULT_EPS[name]), out=out or f"runs/{name}")

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        sc = data.get("scenario")
        if isinstance(sc, str):
            sc = dict(SCENARIOS.get(sc) or {"name": sc})
        elif isinstance(sc, dict):
            base = dict(SCENARIOS.get(sc.get("name"), {}))
            base.update(sc)
            sc = base
        else:
            raise ConfigError("config needs a scenario (preset name or mapping)")
        eps = data.get("eps", DEFAULT_EPS.get(sc["name"], []))
        eps = [float(e) for e in (eps if isinstance(eps, list) else [eps])]
        if not eps or any(not 0 < e < 1 for e in eps):
            raise ConfigError(f"eps values must lie in (0, 1): {eps}")
        unknown = set(data) - {"scenario", "eps", "plan", "samples", "tolerances", "out", "seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(sc, eps, dict(data.get("plan") or {}), int(data.get("samples", 128)),
                   dict(data.get("tolerances") or {}), str(data.get("out", f"runs/{sc['name']}")),
                   int(data.get("seed", 0)))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_mapping(yaml.safe_load(fh) or {})

    @property
    def const_tol(self) -> float:
        return float(self.tolerances.get("const_tol", 1e-6))

    @property
    def slack_cap(self) -> float:
        """Largest admissible segment slack, in units of eps |log eps|."""
        return float(self.tolerances.get("slack_cap", 5.0))

    def flow_options(self) -> FlowOptions:
        keys = {"tol", "const_tol", "t_max", "max_steps", "energy_rtol"}
        return FlowOptions(**{k: v for k, v in self.tolerances.items() if k in keys})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def scenario_for(cfg: RunConfig, eps: float) -> Scenario:
    sc = cfg.scenario
    rho = float(sc["radius"])
    n1 = int(sc["n1"]) if "n1" in sc else cells_for_eps(rho, eps, float(sc.get("h_ratio", 4.0)))
    if "n2" in sc:
        n2 = int(sc["n2"])
    else:
        span = 2 * math.pi if sc["name"] == "sphere2" else math.pi
        n2 = 16 * max(1, round(span * rho / (float(sc.get("tangential_ratio", 2.0)) * eps) / 16))
    return make_scenario(sc["name"], rho, n1, n2, sc.get("omega"), bool(sc.get("folded", False)))


def plan_for(cfg: RunConfig, scenario: Scenario) -> DeformationPlan:
    return calibrate(scenario, **cfg.plan)


def check_eps(plan: DeformationPlan, eps: float) -> dict:
    """Tube constraints; the operational one is enforced, the /20 margin only reported."""
    feas = plan.feasibility(eps)
    if not feas["fits_offset"]:
        raise ConfigError(f"eps = {eps}: transition half-width exceeds c0; constraint report {feas}")
    if not feas["margin_twentieth"]:
        log.warning("eps = %g: 6 eps|log eps| = %.4g is not below c0/20 = %.4g", eps,
                    feas["transition_half_width"], plan.c0 / 20)
    return feas


# ---------------------------------------------------------------------------
# one eps


@dataclass
class EpsRun:
    eps: float
    grid: list[int]
    segments: list[SegmentTrace]
    flow: FlowSegment
    barrier: dict
    bridge: dict
    feasibility: dict
    seconds: float

    @property
    def max_energy(self) -> float:
        return max(t.max_energy for t in self.segments)

    def slacks(self) -> dict[str, float]:
        out = {}
        for t in self.segments:
            c = t.certificate
            out[t.name] = c.get("slack", c.get("slack_uniform"))
        return out

    def fitted_c(self) -> float:
        return fitted_constant(list(self.slacks().values()))


def _chain(segments: list[SegmentTrace], tol: float) -> list[dict]:
    gaps = []
    for a, b in zip(segments[:-1], segments[1:]):
        gap = float(np.max(np.abs(a.last - b.first)))
        gaps.append({"from": a.name, "to": b.name, "sup_gap": gap})
        if gap > tol:
            raise CertificateFailure(b.name, f"starts where {a.name} ends", {"sup_gap": gap})
    return gaps


def run_eps(cfg: RunConfig, eps: float, plan: DeformationPlan | None = None) -> EpsRun:
    t_start = time.time()
    sc = scenario_for(cfg, eps)
    plan = plan or plan_for(cfg, sc)
    feas = check_eps(plan, eps)
    b = SweepoutBuilder(sc, eps, plan)
    n = cfg.samples
    log.info("eps=%g grid=%s: explicit segments", eps, sc.grid.shape)
    down = segment_to_minus_one(b, n)
    deform = segment_hole_deform(b, n)
    close = segment_close_hole(b, n)
    g_top = close.last
    log.info("eps=%g: barrier and bridge", eps)
    barrier = build_barrier(b, g_top)
    delta_bar, tried = choose_bridge_delta(b, barrier, g_top)
    bridge = segment_mollify_bridge(b, barrier, g_top, delta_bar, n)
    if not bridge.certificate["above_barrier_all"]:
        raise CertificateFailure("mollifyBridge", "g_top * eta_delta > m for every delta", bridge.certificate)
    log.info("eps=%g: flow to +1", eps)
    flow = segment_flow_to_plus_one(b, barrier, bridge.last, n, cfg.flow_options())
    segments = [down.reversed(), deform, close, bridge, flow.trace]
    _chain(segments, 0.0)
    run = EpsRun(eps, list(sc.grid.shape), segments, flow, barrier.to_dict(),
                 {"delta_bar": delta_bar, "tried": tried}, feas, time.time() - t_start)
    _verify_run(cfg, run, b)
    return run


FLOW_PROPERTIES = {
    "forced_energy_monotone_m": "forced energy non-increasing along m",
    "forced_energy_monotone_h": "forced energy non-increasing along h",
    "mean_convex_m": "minRHS > 0 along m",
    "m_nondecreasing": "m_t non-decreasing in t",
    "ordered_m_below_h": "m_t < h_t at every step",
    "energy_control": "E(h_t) <= E(h_0) + 2 (mu/2 sigma) vol",
    "m_limit_constant": "m_t tends to a constant",
    "h_limit_constant": "h_t tends to a constant",
    "relax_monotone": "k_mu -> +1 relaxation monotone",
}


def _verify_run(cfg: RunConfig, run: EpsRun, b: SweepoutBuilder) -> None:
    first, last = run.segments[0].first, run.segments[-1].last
    if not np.all(first == -1.0):
        raise CertificateFailure("toMinusOne", "path starts at -1")
    if float(np.max(np.abs(last - 1.0))) > cfg.const_tol:
        raise CertificateFailure("flowToPlusOne", "path ends at +1", {"sup": float(np.max(np.abs(last - 1.0)))})
    for tr in run.segments:
        slack = run.slacks()[tr.name]
        if slack > cfg.slack_cap:
            raise CertificateFailure(tr.name, f"E <= {tr.certificate['bound']} + C eps|log eps|, C <= {cfg.slack_cap}",
                                     tr.certificate)
    ch = run.flow.checks
    for key, what in FLOW_PROPERTIES.items():
        if not ch[key]:
            raise CertificateFailure("flowToPlusOne", what, ch)
    for key in ("m_limit_error", "h_limit_error"):
        if ch[key] > cfg.const_tol:
            raise CertificateFailure("flowToPlusOne", f"|limit - k_mu| <= {cfg.const_tol}", ch)


# ---------------------------------------------------------------------------
# verdict


@dataclass
class Verdict:
    maxEnergy: float
    bound: float
    passed: bool
    perSegment: dict
    errorFit: dict
    label: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def verdict_bound(plan: DeformationPlan) -> float:
    return 2 * plan.surface_area - min(plan.tau / 2, plan.hole_area / 2)


def ideal_energy(plan: DeformationPlan) -> float:
    """eps -> 0 value of the path maximum: the doubled graph at the top of the closing segment."""
    return 2 * plan.surface_area - plan.tau


def error_fit(eps: list[float], excess: list[float]) -> dict:
    """Least-squares C in |maxEnergy - ideal| ~ C eps|log eps| (through the origin), with R^2."""
    x = np.array([e * abs(math.log(e)) for e in eps])
    y = np.abs(np.array(excess))
    c = float(x @ y / (x @ x))
    ss_res = float(np.sum((y - c * x) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    decreasing = bool(np.all(np.diff(y[np.argsort(-np.array(eps))]) < 0))
    return {"eps": list(eps), "excess": list(excess), "C": c, "r2": r2, "decreasing": decreasing}


def c_stable(coarse: float, fine: float, rel: float = 0.3) -> bool:
    """A fitted C is stable under eps-halving if it does not grow by more than ``rel``."""
    if coarse == 0.0 and fine == 0.0:
        return True
    return fine <= (1 + rel) * coarse


@dataclass
class RunReport:
    config: RunConfig
    plan: DeformationPlan
    runs: list[EpsRun]
    verdict: Verdict


def assemble_and_verify(cfg: RunConfig) -> RunReport:
    sc0 = scenario_for(cfg, cfg.eps[0])
    plan = plan_for(cfg, sc0)
    runs = [run_eps(cfg, e, plan) for e in cfg.eps]
    bound = verdict_bound(plan)
    max_e = max(r.max_energy for r in runs)
    ideal = ideal_energy(plan)
    per = {}
    for r in runs:
        per[repr(r.eps)] = {
            "maxEnergy": r.max_energy,
            "segments": {t.name: t.summary() for t in r.segments},
            "fittedC": r.fitted_c(),
            "flow": r.flow.checks,
            "barrier": r.barrier,
            "bridge": r.bridge,
            "feasibility": r.feasibility,
            "grid": r.grid,
            "endpoints": {"first_sup_dist_to_minus_one": float(np.max(np.abs(r.segments[0].first + 1.0))),
                          "last_sup_dist_to_plus_one": float(np.max(np.abs(r.segments[-1].last - 1.0)))},
            "seconds": r.seconds,
        }
    fit = error_fit([r.eps for r in runs], [r.max_energy - ideal for r in runs])
    fit["ideal"] = ideal
    cs = sorted(((r.eps, r.fitted_c()) for r in runs), reverse=True)
    fit["fittedC"] = {repr(e): c for e, c in cs}
    fit["fittedC_stable"] = all(c_stable(a[1], b[1]) for a, b in zip(cs[:-1], cs[1:]))
    label = "machinery test (n = 1)" if cfg.scenario["name"] == "sphere2" else "headline (n = 2)"
    verdict = Verdict(max_e, bound, bool(max_e <= bound), per, fit, label)
    return RunReport(cfg, plan, runs, verdict)


# ---------------------------------------------------------------------------
# output


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else repr(float(x))
    return x


def write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=1, sort_keys=True) + "\n")


def report(rep: RunReport, out: str | Path | None = None) -> Path:
    """Summary JSON, per-segment CSVs, flow trajectories and the concatenated energy trace."""
    out = Path(out or rep.config.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in rep.runs:
        d = out / f"eps_{r.eps:g}"
        d.mkdir(exist_ok=True)
        for tr in r.segments:
            tr.write_csv(d / f"{tr.name}.csv")
        r.flow.pair.lower.write_csv(d / "flow_m.csv", r.flow.k_mu)
        r.flow.pair.upper.write_csv(d / "flow_h.csv", r.flow.k_mu)
        with open(d / "path_energy.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["position", "segment", "parameter", "energy"])
            pos = 0
            for k, tr in enumerate(r.segments):
                start = 0 if k == 0 else 1  # shared endpoints appear once
                for p, e in zip(tr.params[start:], tr.energy[start:]):
                    w.writerow([pos, tr.name, repr(float(p)), repr(float(e))])
                    pos += 1
    summary = {
        "label": rep.verdict.label,
        "config": asdict(rep.config),
        "plan": {k: v for k, v in rep.plan.to_dict().items()
                 if k not in ("t_grid", "c_grid", "area_t", "holed_max")},
        "verdict": rep.verdict.to_dict(),
        "segments": list(SEGMENTS),
    }
    write_json(out / "summary.json", summary)
    return out


def source_digest() -> str:
    """Hash of the package sources, so cached runs are invalidated by code changes."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def run_cached(cfg: RunConfig, cache_dir: str | Path) -> dict:
    """summary.json of ``cfg``, computed once per (config, sources) pair."""
    cache = Path(cache_dir)
    key = cache / f"{cfg.scenario['name']}-{cfg.digest()}-{source_digest()}.json"
    if key.exists():
        log.info("using cached run %s", key.name)
        return json.loads(key.read_text())
    out = report(assemble_and_verify(cfg))
    cache.mkdir(parents=True, exist_ok=True)
    key.write_text((out / "summary.json").read_text())
    return json.loads(key.read_text())


def failure_summary(cfg: RunConfig, exc: Exception, out: str | Path | None = None) -> Path:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = {"config": asdict(cfg), "verdict": {"pass": False}, "error": str(exc)}
    if isinstance(exc, CertificateFailure):
        data["failure"] = {"segment": exc.segment, "inequality": exc.inequality, "detail": exc.detail}
    write_json(out / "summary.json", data)
    return out
