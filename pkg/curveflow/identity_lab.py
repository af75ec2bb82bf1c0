"""Residuals of the curve-flow evolution identities, curvature constants and
signed inequality margins along recorded trajectories."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from .curve_flow import (
    Trajectory,
    arclength_derivative,
    circle_component,
    periodic_dx,
)
from .errors import PreconditionError
from .geometry_core import (
    MetricFamily,
    SpacetimeVector,
    cov_deriv_ricci,
    curvature_block_norms,
    g_inner,
    horizontal_riemann,
    interior_time,
    operator_norm,
    ricci_horizontal,
    sample_grid,
    spacetime_cov_deriv,
    spacetime_riemann,
)
from .settings import get_settings, thread_cap

logger = logging.getLogger(__name__)

ORDER_FLOOR = 1e-11

TERM_BOUNDS = {
    "ricci_HH": "k2",
    "ricci_SS": "k2",
    "curvature": "k2+k",
    "ricci_product": "k2",
    "ricci_gradient": "k",
}


@dataclass(frozen=True)
class ResidualReport:
    name: str
    times: np.ndarray
    residuals: np.ndarray  # [frame, node]
    weights: np.ndarray  # ds per node
    N: int
    dt: float
    term_breakdown: Dict[str, float] = field(default_factory=dict)

    def frame_max(self) -> np.ndarray:
        return np.max(np.abs(self.residuals), axis=1)

    def frame_l2(self) -> np.ndarray:
        return np.sqrt(np.sum(self.residuals**2 * self.weights, axis=1))

    @property
    def max_norm(self) -> float:
        return float(np.max(np.abs(self.residuals)))

    @property
    def l2_norm(self) -> float:
        spacing = float(self.times[1] - self.times[0]) if self.times.size > 1 else 1.0
        return float(np.sqrt(spacing * np.sum(self.residuals**2 * self.weights)))

    @property
    def scale(self) -> float:
        return max(self.term_breakdown.values(), default=0.0)

    def passes(self, tolerance: Optional[float] = None) -> bool:
        tol = float(get_settings()["identity_tolerance"]) if tolerance is None else tolerance
        return self.max_norm <= tol * (1.0 + self.scale)


@dataclass(frozen=True)
class ConstantsEstimate:
    C_hat: float
    C1: float
    C2: float
    C_prime: float
    per_term: Dict[str, float]
    samples: Dict[str, float]
    provenance: str

    def __post_init__(self) -> None:
        if self.C1 != self.C_hat / 2:
            raise PreconditionError("C1 must equal C_hat / 2")
        if min(self.C_hat, self.C1, self.C2, self.C_prime) < 0:
            raise PreconditionError("Curvature constants must be non-negative")


@dataclass(frozen=True)
class MonitorSeries:
    name: str
    times: np.ndarray
    margins: Dict[str, np.ndarray]
    tolerances: Dict[str, float]
    scalars: Dict[str, np.ndarray] = field(default_factory=dict)
    events: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise PreconditionError("Monitor sample times must be strictly increasing")

    def min_margin(self, key: str) -> float:
        values = self.margins[key]
        return float(np.nanmin(values)) if np.any(np.isfinite(values)) else math.nan

    def passes(self, key: str) -> bool:
        return bool(self.min_margin(key) >= -self.tolerances[key])

    def all_pass(self) -> bool:
        return all(self.passes(key) for key in self.margins)


# ---------------- per-frame terms ----------------

def _require_frames(traj: Trajectory) -> None:
    if traj.frame_count < 5:
        raise PreconditionError(f"Need at least 5 recorded frames, trajectory has {traj.frame_count}")


def _interior(traj: Trajectory) -> range:
    return range(2, traj.frame_count - 2)


def _time_derivative(traj: Trajectory, values: Sequence[np.ndarray]) -> np.ndarray:
    """Five-frame central derivative at every interior frame."""
    f = np.asarray(values)
    tau = traj.frame_spacing
    return (f[:-4] - 8.0 * f[1:-3] + 8.0 * f[3:-1] - f[4:]) / (12.0 * tau)


def _over(values: np.ndarray, h: np.ndarray) -> np.ndarray:
    """values / h, zero where h vanishes (unregularised geodesic nodes)."""
    return np.divide(values, h, out=np.zeros_like(values, dtype=float), where=h > 0)


def _h_derivatives(h: np.ndarray, k2_s: np.ndarray, k2_ss: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """h′ and h″ from h² = k² + ε².

    h has a kink of width ~ε/|k′| wherever k crosses zero; only the smooth k²
    is differenced.
    """
    h_s = _over(k2_s, 2.0 * h)
    h_ss = _over(k2_ss - 2.0 * h_s**2, 2.0 * h)
    return h_s, h_ss


def frame_terms(traj: Trajectory, i: int) -> Dict[str, np.ndarray]:
    """Every per-node quantity entering the k² evolution at frame i."""
    key = ("terms", i)
    if key in traj._cache:
        return traj._cache[key]
    m = traj.background
    geom = traj.geometry(i)
    t, x = geom.t, geom.nodes
    ric = ricci_horizontal(m, t, x)

    # ∇_S H in M×I: horizontal part ∇^g_S H, vertical part Ric(S, H)
    rate = SpacetimeVector.horizontal_only(periodic_dx(geom.H) / geom.speed[:, None])
    s_vec = SpacetimeVector.horizontal_only(geom.S)
    h_vec = SpacetimeVector.horizontal_only(geom.H)
    dsh = spacetime_cov_deriv(m, t, x, s_vec, h_vec, rate)
    along = g_inner(geom.metric, dsh.horizontal, geom.S)
    perp_h = dsh.horizontal - along[:, None] * geom.S
    perp2 = g_inner(geom.metric, perp_h, perp_h) + np.asarray(dsh.vertical) ** 2

    h_hat = SpacetimeVector(geom.H, np.ones(geom.N))
    grad = cov_deriv_ricci(m, t, x, geom.S)
    k2 = geom.k2
    k2_s = arclength_derivative(k2, geom)
    k2_ss = arclength_derivative(k2_s, geom)
    h_s, h_ss = _h_derivatives(geom.h, k2_s, k2_ss)
    terms = {
        "k2": k2,
        "k": geom.k,
        "h": geom.h,
        "speed": geom.speed,
        "ds": geom.ds,
        "k2_s": k2_s,
        "k2_ss": k2_ss,
        "h_s": h_s,
        "h_ss": h_ss,
        "perp2": perp2,
        "tangential": along + k2,
        "ricci_XX": g_inner(ric, geom.X, geom.X),
        "ricci_SS": g_inner(ric, geom.S, geom.S),
        "ricci_HH": g_inner(ric, geom.H, geom.H),
        "rm_hat": spacetime_riemann(m, t, x, h_hat, s_vec, h_vec, s_vec),
        "rm_g": horizontal_riemann(m, t, x, geom.H, geom.S, geom.H, geom.S),
        "ricci_grad_SH": g_inner(grad, geom.S, geom.H),
    }
    traj._cache[key] = terms
    return terms


def correction_terms(terms: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """The five curvature terms added to (k²)″ − 2|(∇_S H)^⊥|² + 2k⁴."""
    return {
        "ricci_HH": -2.0 * terms["ricci_HH"],
        "ricci_SS": 4.0 * terms["k2"] * terms["ricci_SS"],
        "curvature": 2.0 * terms["rm_hat"],
        "ricci_product": 2.0 * terms["ricci_SS"] * terms["ricci_HH"],
        "ricci_gradient": -2.0 * terms["ricci_grad_SH"],
    }


def _report(name: str, traj: Trajectory, rows: List[np.ndarray], breakdown: Dict[str, float]) -> ResidualReport:
    frames = list(_interior(traj))
    weights = np.asarray([traj.geometry(i).ds for i in frames])
    return ResidualReport(
        name=name,
        times=traj.times[2:-2].copy(),
        residuals=np.asarray(rows),
        weights=weights,
        N=traj.N,
        dt=traj.dt,
        term_breakdown=breakdown,
    )


def _breakdown(parts: Dict[str, List[np.ndarray]]) -> Dict[str, float]:
    return {name: float(np.max(np.abs(np.asarray(rows)))) for name, rows in parts.items()}


# ---------------- identities ----------------

def residual_length_evolution(traj: Trajectory, form: Literal["squared", "commutator"] = "squared") -> ResidualReport:
    """d|X|²/dt + 2Ric(X,X) + 2k²|X|² = 0, or d|X|/dt + (k² + Ric(S,S))|X| = 0."""
    _require_frames(traj)
    geoms = [traj.geometry(i) for i in range(traj.frame_count)]
    ric = [ricci_horizontal(traj.background, g.t, g.nodes) for g in geoms]
    rows: List[np.ndarray] = []
    parts: Dict[str, List[np.ndarray]] = {"d_dt": [], "ricci": [], "curvature": []}
    if form == "squared":
        rate = _time_derivative(traj, [g.speed**2 for g in geoms])
        for j, i in enumerate(_interior(traj)):
            g = geoms[i]
            ricci = 2.0 * g_inner(ric[i], g.X, g.X)
            curvature = 2.0 * g.k2 * g.speed**2
            rows.append(rate[j] + ricci + curvature)
            parts["d_dt"].append(rate[j])
            parts["ricci"].append(ricci)
            parts["curvature"].append(curvature)
    elif form == "commutator":
        rate = _time_derivative(traj, [g.speed for g in geoms])
        for j, i in enumerate(_interior(traj)):
            g = geoms[i]
            ricci = g_inner(ric[i], g.S, g.S) * g.speed
            curvature = g.k2 * g.speed
            rows.append(rate[j] + ricci + curvature)
            parts["d_dt"].append(rate[j])
            parts["ricci"].append(ricci)
            parts["curvature"].append(curvature)
    else:
        raise PreconditionError(f"Unknown length-evolution form '{form}'")
    return _report(f"length_{form}", traj, rows, _breakdown(parts))


def residual_k2_evolution(traj: Trajectory, variant: Literal["corrected", "book_erroneous"] = "corrected") -> ResidualReport:
    _require_frames(traj)
    if variant not in ("corrected", "book_erroneous"):
        raise PreconditionError(f"Unknown k² evolution variant '{variant}'")
    rate = _time_derivative(traj, [traj.geometry(i).k2 for i in range(traj.frame_count)])
    rows: List[np.ndarray] = []
    parts: Dict[str, List[np.ndarray]] = {}
    for j, i in enumerate(_interior(traj)):
        terms = frame_terms(traj, i)
        k2 = terms["k2"]
        rhs = {
            "d_dt": rate[j],
            "k2_ss": terms["k2_ss"],
            "perp": -2.0 * terms["perp2"],
            "k4": 2.0 * k2**2,
        }
        corrections = correction_terms(terms)
        if variant == "corrected":
            rhs.update(corrections)
        else:
            rhs["ricci_HH"] = corrections["ricci_HH"]
            rhs["ricci_SS"] = corrections["ricci_SS"]
            rhs["curvature_g"] = 2.0 * terms["rm_g"]
        rows.append(rate[j] - sum(v for name, v in rhs.items() if name != "d_dt"))
        for name, values in rhs.items():
            parts.setdefault(name, []).append(values)
    return _report(f"k2_{variant}", traj, rows, _breakdown(parts))


def dropped_terms(traj: Trajectory) -> ResidualReport:
    """Per-node size of what the book variant omits, evaluated from the curvature terms alone."""
    _require_frames(traj)
    rows = []
    for i in _interior(traj):
        terms = frame_terms(traj, i)
        corrections = correction_terms(terms)
        rows.append(
            corrections["ricci_product"] + corrections["ricci_gradient"] + 2.0 * (terms["rm_hat"] - terms["rm_g"])
        )
    return _report("dropped_terms", traj, rows, {})


def residual_u_evolution(traj: Trajectory) -> ResidualReport:
    """∂u/∂t = u″ + (k² + Ric(S,S))u for u = g(S, e) along a parallel circle direction e."""
    _require_frames(traj)
    axis = traj.background.circle_axis
    if axis is None:
        raise PreconditionError(f"Background '{traj.background.name}' has no circle factor")
    geoms = [traj.geometry(i) for i in range(traj.frame_count)]
    u = [circle_component(g, axis) for g in geoms]
    rate = _time_derivative(traj, u)
    rows: List[np.ndarray] = []
    parts: Dict[str, List[np.ndarray]] = {"d_dt": [], "u_ss": [], "growth": []}
    for j, i in enumerate(_interior(traj)):
        g = geoms[i]
        ric = ricci_horizontal(traj.background, g.t, g.nodes)
        u_ss = arclength_derivative(u[i], g, order=2)
        growth = (g.k2 + g_inner(ric, g.S, g.S)) * u[i]
        rows.append(rate[j] - u_ss - growth)
        parts["d_dt"].append(rate[j])
        parts["u_ss"].append(u_ss)
        parts["growth"].append(growth)
    return _report("u_evolution", traj, rows, _breakdown(parts))


# ---------------- constants ----------------

def estimate_constants(
    m: MetricFamily,
    horizon: Optional[float] = None,
    time_samples: Optional[int] = None,
    space_samples: Optional[int] = None,
    inflation: Optional[float] = None,
) -> ConstantsEstimate:
    """Coefficient-wise curvature constants from a dense sample of the background.

    Ĉ/2 dominates the five curvature terms of the k² evolution as multiples of
    k², k², k²+k, k² and k. C₂ is the sampled sup of |Ric| in the operator norm
    relative to g(t), without inflation.
    """
    settings = get_settings()
    horizon = float(m.horizon if horizon is None else horizon)
    time_samples = int(settings["constants_time_samples"] if time_samples is None else time_samples)
    space_samples = int(settings["constants_space_samples"] if space_samples is None else space_samples)
    inflation = float(settings["constants_inflation"] if inflation is None else inflation)
    if time_samples < 1 or space_samples < 1:
        raise PreconditionError("Constants sampling grid must be nonempty")

    points = sample_grid(m.chart, space_samples)
    rho = eta = sigma_h = sigma_m = 0.0
    for t in np.linspace(0.0, horizon, time_samples):
        rho = max(rho, float(np.max(operator_norm(m, float(t), points, ricci_horizontal(m, float(t), points)))))
        blocks = curvature_block_norms(m, interior_time(m, float(t)), points)
        eta = max(eta, float(np.max(blocks["grad_ricci"])))
        sigma_h = max(sigma_h, float(np.max(blocks["horizontal_block"])))
        sigma_m = max(sigma_m, float(np.max(blocks["mixed_block"])))

    grow = 1.0 + inflation
    per_term = {
        "ricci_HH": 2.0 * rho * grow,
        "ricci_SS": 4.0 * rho * grow,
        "curvature": 2.0 * max(sigma_h, sigma_m) * grow,
        "ricci_product": 2.0 * rho**2 * grow,
        "ricci_gradient": 2.0 * eta * grow,
    }
    quadratic = per_term["ricci_HH"] + per_term["ricci_SS"] + 2.0 * sigma_h * grow + per_term["ricci_product"]
    linear = 2.0 * sigma_m * grow + per_term["ricci_gradient"]
    c_hat = 2.0 * max(quadratic, linear)
    c1 = c_hat / 2
    estimate = ConstantsEstimate(
        C_hat=c_hat,
        C1=c1,
        C2=rho,
        C_prime=c1 + rho,
        per_term=per_term,
        samples={"ricci": rho, "grad_ricci": eta, "horizontal_block": sigma_h, "mixed_block": sigma_m},
        provenance=(
            f"{time_samples} times x {len(points)} points on [0, {horizon:g}], "
            f"|Ric| as operator norm relative to g(t), coefficient-wise C_hat, inflation {inflation:g}"
        ),
    )
    logger.info(f"[Lab] constants for {m.name}: C_hat={c_hat:.6g} C2={rho:.6g}")
    return estimate


# ---------------- monitors ----------------

def _tolerance(value: float) -> float:
    settings = get_settings()
    return float(settings["tolerance_factor"]) * value + float(settings["tolerance_floor"])


def monitor_inequalities(
    traj: Trajectory,
    constants: ConstantsEstimate,
    k2_report: Optional[ResidualReport] = None,
    commutator_report: Optional[ResidualReport] = None,
) -> MonitorSeries:
    _require_frames(traj)
    for key in ("L", "Theta", "Theta_eps"):
        if key not in traj.scalars or traj.scalars[key].shape[0] != traj.frame_count:
            raise PreconditionError(f"Trajectory is missing the '{key}' monitor")
    k2_report = k2_report or residual_k2_evolution(traj, "corrected")
    commutator_report = commutator_report or residual_length_evolution(traj, "commutator")

    c_hat, c1, c2 = constants.C_hat, constants.C1, constants.C2
    frames = list(_interior(traj))
    k2_rate = _time_derivative(traj, [traj.geometry(i).k2 for i in range(traj.frame_count)])
    h_rate = [_over(k2_rate[j], 2.0 * traj.geometry(i).h) for j, i in enumerate(frames)]
    scalars = {key: traj.scalars[key] for key in ("L", "Theta", "Theta_eps")}
    rates = {key: _time_derivative(traj, values) for key, values in scalars.items()}
    t0 = float(traj.times[0])

    names = ["pointwise_k2", "h_eps", "perp_bound", "length_ode", "theta_ode", "theta_eps_ode", "length_exp", "theta_exp"]
    margins: Dict[str, List[float]] = {name: [] for name in names}
    for j, i in enumerate(frames):
        terms = frame_terms(traj, i)
        k2, k, h, ds = terms["k2"], terms["k"], terms["h"], terms["ds"]
        t = float(traj.times[i])
        margins["pointwise_k2"].append(
            np.min(terms["k2_ss"] - 2.0 * terms["perp2"] + 2.0 * k2**2 + c_hat * (k2 + k) - k2_rate[j])
        )
        margins["h_eps"].append(np.min(terms["h_ss"] + k**3 + c1 * (h + 1.0) - h_rate[j]))
        margins["perp_bound"].append(np.min(terms["perp2"] - terms["h_s"] ** 2))
        margins["length_ode"].append(np.sum((c2 - k2) * ds) - rates["L"][j])
        margins["theta_ode"].append((c1 + c2) * scalars["Theta"][i] + c1 * scalars["L"][i] - rates["Theta"][j])
        margins["theta_eps_ode"].append(
            (c1 + c2) * scalars["Theta_eps"][i] + c1 * scalars["L"][i] - rates["Theta_eps"][j]
        )
        margins["length_exp"].append(scalars["L"][0] * math.exp(c2 * (t - t0)) - scalars["L"][i])
        margins["theta_exp"].append(
            (scalars["Theta"][0] + scalars["L"][0]) * math.exp((c1 + c2) * (t - t0)) - scalars["Theta"][i] - scalars["L"][i]
        )

    r_k2 = np.abs(k2_report.residuals)
    two_h = 2.0 * np.asarray([frame_terms(traj, i)["h"] for i in frames])
    r_h = float(np.max(r_k2 / two_h))
    r_comm = commutator_report.max_norm
    max_h = float(np.max(two_h)) / 2.0
    length_max = float(np.max(scalars["L"]))
    elapsed = max(1.0, float(traj.times[-1] - t0))
    tol_theta = _tolerance(length_max * r_h + max_h * r_comm)
    tolerances = {
        "pointwise_k2": _tolerance(float(np.max(r_k2))),
        "h_eps": _tolerance(r_h),
        "perp_bound": _tolerance(float(np.max(r_k2))),
        "length_ode": _tolerance(r_comm),
        "theta_ode": tol_theta,
        "theta_eps_ode": tol_theta,
        "length_exp": _tolerance(r_comm * elapsed),
        "theta_exp": _tolerance((length_max * r_h + max_h * r_comm + r_comm) * elapsed),
    }
    series = MonitorSeries(
        name="inequalities",
        times=traj.times[2:-2].copy(),
        margins={name: np.asarray(values, dtype=float) for name, values in margins.items()},
        tolerances=tolerances,
        scalars={key: values[2:-2].copy() for key, values in scalars.items()},
    )
    failing = [name for name in names if not series.passes(name)]
    if failing:
        logger.warning(f"[Lab] {traj.background.name}: inequality margins below tolerance: {', '.join(failing)}")
    return series


def term_domination(traj: Trajectory, constants: ConstantsEstimate) -> MonitorSeries:
    """c_term · {k², k², k²+k, k², k} − |term| at every node, minimum per frame."""
    _require_frames(traj)
    margins: Dict[str, List[float]] = {name: [] for name in TERM_BOUNDS}
    for i in _interior(traj):
        terms = frame_terms(traj, i)
        bounds = {"k2": terms["k2"], "k": terms["k"], "k2+k": terms["k2"] + terms["k"]}
        for name, value in correction_terms(terms).items():
            margins[name].append(float(np.min(constants.per_term[name] * bounds[TERM_BOUNDS[name]] - np.abs(value))))
    floor = float(get_settings()["tolerance_floor"])
    return MonitorSeries(
        name="term_domination",
        times=traj.times[2:-2].copy(),
        margins={name: np.asarray(values) for name, values in margins.items()},
        tolerances={name: floor for name in TERM_BOUNDS},
    )


def ramp_monitor(
    traj: Trajectory,
    constants: ConstantsEstimate,
    k2_report: Optional[ResidualReport] = None,
    u_report: Optional[ResidualReport] = None,
) -> MonitorSeries:
    """Margin of ∂(h/u)/∂t ≤ (h/u)″ + (2u′/u)(h/u)′ + C′(h+1)/u with u = g(S, e)."""
    _require_frames(traj)
    axis = traj.background.circle_axis
    if axis is None:
        raise PreconditionError(f"Ramp monitor needs a circle factor; '{traj.background.name}' has none")
    geoms = [traj.geometry(i) for i in range(traj.frame_count)]
    u = [circle_component(g, axis) for g in geoms]
    if float(np.min(u[0])) <= 0:
        raise PreconditionError("Ramp monitor needs u > 0 on the initial curve")
    k2_report = k2_report or residual_k2_evolution(traj, "corrected")
    u_report = u_report or residual_u_evolution(traj)

    k2_rate = _time_derivative(traj, [g.k2 for g in geoms])
    u_rate = _time_derivative(traj, u)
    events: List[str] = []
    margins: List[float] = []
    slack: List[np.ndarray] = []
    for j, i in enumerate(_interior(traj)):
        g, ui = geoms[i], u[i]
        if min(float(np.min(u[i + d])) for d in range(-2, 3)) <= 0:
            events.append(f"u <= 0 near t={traj.times[i]:.6g}")
            margins.append(math.nan)
            continue
        terms = frame_terms(traj, i)
        h, h_s, h_ss = terms["h"], terms["h_s"], terms["h_ss"]
        u_s = arclength_derivative(ui, g)
        u_ss = arclength_derivative(u_s, g)
        # w = h/u
        w_s = h_s / ui - h * u_s / ui**2
        w_ss = h_ss / ui - 2.0 * h_s * u_s / ui**2 - h * u_ss / ui**2 + 2.0 * h * u_s**2 / ui**3
        w_rate = _over(k2_rate[j], 2.0 * h) / ui - h * u_rate[j] / ui**2
        margins.append(float(np.min(w_ss + 2.0 * u_s / ui * w_s + constants.C_prime * (h + 1.0) / ui - w_rate)))
        slack.append(_over(np.abs(k2_report.residuals[j]), 2.0 * h * ui) + h * np.abs(u_report.residuals[j]) / ui**2)

    if events:
        logger.warning(f"[Lab] ramp degenerated: {events[0]}")
    tol = _tolerance(float(np.max(slack)) if slack else 0.0)
    return MonitorSeries(
        name="ramp",
        times=traj.times[2:-2].copy(),
        margins={"h_over_u": np.asarray(margins)},
        tolerances={"h_over_u": tol},
        scalars={"u_min": np.asarray([float(np.min(u[i])) for i in _interior(traj)])},
        events=events,
    )


def theta_eps_sweep(traj: Trajectory, epsilons: Sequence[float] = (1e-2, 1e-3, 1e-4)) -> MonitorSeries:
    """Θ ≤ Θ_ε ≤ Θ + εL for each ε, and Θ_ε decreasing as ε decreases."""
    eps = sorted((float(e) for e in epsilons), reverse=True)
    if not eps or eps[-1] <= 0:
        raise PreconditionError("theta_eps_sweep needs positive epsilons")
    geoms = [traj.geometry(i) for i in range(traj.frame_count)]
    theta = np.asarray([g.theta for g in geoms])
    length = np.asarray([g.length for g in geoms])
    sweep = {e: np.asarray([float(np.sum(np.sqrt(g.k2 + e**2) * g.ds)) for g in geoms]) for e in eps}
    margins: Dict[str, np.ndarray] = {}
    for e in eps:
        margins[f"lower_{e:g}"] = sweep[e] - theta
        margins[f"upper_{e:g}"] = theta + e * length - sweep[e]
    for big, small in zip(eps, eps[1:]):
        margins[f"monotone_{big:g}_{small:g}"] = sweep[big] - sweep[small]
    floor = float(get_settings()["tolerance_floor"])
    return MonitorSeries(
        name="theta_eps_sweep",
        times=traj.times.copy(),
        margins=margins,
        tolerances={key: floor for key in margins},
        scalars={f"Theta_eps_{e:g}": values for e, values in sweep.items()},
    )


# ---------------- convergence ----------------

RESIDUALS: Dict[str, Callable[[Trajectory], ResidualReport]] = {
    "length_squared": lambda tr: residual_length_evolution(tr, "squared"),
    "length_commutator": lambda tr: residual_length_evolution(tr, "commutator"),
    "k2_corrected": lambda tr: residual_k2_evolution(tr, "corrected"),
    "k2_book_erroneous": lambda tr: residual_k2_evolution(tr, "book_erroneous"),
    "u_evolution": residual_u_evolution,
    "dropped_terms": dropped_terms,
}


@dataclass(frozen=True)
class ConvergenceRow:
    N: int
    dt: float
    max_norm: float
    l2_norm: float
    term_breakdown: Dict[str, float]


@dataclass(frozen=True)
class ConvergenceTable:
    name: str
    rows: List[ConvergenceRow]
    order: float
    l2_order: float

    @property
    def monotone(self) -> bool:
        norms = [row.max_norm for row in self.rows]
        return all(b < a or b <= ORDER_FLOOR for a, b in zip(norms, norms[1:]))


def fit_order(resolutions: Sequence[float], norms: Sequence[float]) -> float:
    """Least-squares −slope of log(norm) against log(N), ignoring roundoff-level norms."""
    n = np.asarray(resolutions, dtype=float)
    e = np.asarray(norms, dtype=float)
    keep = e > ORDER_FLOOR
    if keep.sum() < 2:
        return math.inf
    slope = np.polyfit(np.log(n[keep]), np.log(e[keep]), 1)[0]
    return float(-slope)


def convergence_study(
    levels: Sequence[Tuple[int, float]],
    simulate: Callable[[int, float], Trajectory],
    checks: Sequence[str],
) -> Dict[str, ConvergenceTable]:
    if len(levels) < 3:
        raise PreconditionError("A convergence study needs at least 3 levels")
    resolutions = [n for n, _ in levels]
    steps = [dt for _, dt in levels]
    if any(b <= a for a, b in zip(resolutions, resolutions[1:])) or any(b >= a for a, b in zip(steps, steps[1:])):
        raise PreconditionError("Refinement levels must increase N and decrease dt monotonically")
    unknown = [name for name in checks if name not in RESIDUALS]
    if unknown:
        raise PreconditionError(f"Unknown residual checks: {', '.join(unknown)}")

    def evaluate(level: Tuple[int, float]) -> Dict[str, ResidualReport]:
        traj = simulate(*level)
        return {name: RESIDUALS[name](traj) for name in checks}

    workers = max(1, min(thread_cap(), len(levels)))
    logger.info(f"[Convergence] {len(levels)} levels on {workers} worker(s): {', '.join(checks)}")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        reports = list(pool.map(evaluate, levels))

    tables: Dict[str, ConvergenceTable] = {}
    for name in checks:
        rows = [
            ConvergenceRow(n, dt, r[name].max_norm, r[name].l2_norm, r[name].term_breakdown)
            for (n, dt), r in zip(levels, reports)
        ]
        tables[name] = ConvergenceTable(
            name=name,
            rows=rows,
            order=fit_order(resolutions, [row.max_norm for row in rows]),
            l2_order=fit_order(resolutions, [row.l2_norm for row in rows]),
        )
        logger.info(f"[Convergence] {name}: fitted order {tables[name].order:.3g}")
    return tables
