"""Configuration-driven experiment runner.

Config files are JSON documents:
  background  -> BackgroundSpec fields (kind, horizon, periods / r0 / circle_length, pole_margin)
  curve       -> CurveSpec fields (kind, radius, amplitudes, theta0, winding, modulation, ...)
  flow        -> nodes, dt, t_end, record_every, epsilon (dt and epsilon default from the seed curve)
  checks      -> residual and monitor names from CHECKS
  output      -> directory, formats
  seed        -> integer
Artifacts per run: trajectory.csv, residual_<check>.csv, margins_<monitor>_<key>.csv, report.json.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .backgrounds import BACKGROUND_KINDS, BackgroundSpec, exact_data, make_background
from .curve_flow import (
    CURVE_KINDS,
    SCALAR_COLUMNS,
    CurveSpec,
    FlowState,
    Trajectory,
    default_dt,
    default_epsilon,
    integrate,
    seed_curve,
    step_plan,
)
from .errors import ConfigError, FlowAborted, LabError
from .geometry_core import validate_ricci_flow
from .identity_lab import (
    RESIDUALS,
    ConstantsEstimate,
    MonitorSeries,
    ResidualReport,
    convergence_study,
    estimate_constants,
    monitor_inequalities,
    ramp_monitor,
    term_domination,
    theta_eps_sweep,
)

logger = logging.getLogger(__name__)

MONITORS = ("inequalities", "term_domination", "ramp", "theta_eps_sweep")
CHECKS = tuple(RESIDUALS) + MONITORS
# informational: recorded but never fails
REPORT_ONLY = ("dropped_terms",)
# need five recorded frames / spacetime curvature at every residual frame
FRAME_CHECKS = tuple(RESIDUALS) + ("inequalities", "term_domination", "ramp")
SPACETIME_CHECKS = ("k2_corrected", "k2_book_erroneous", "dropped_terms", "inequalities", "term_domination", "ramp")

EXIT_OK, EXIT_CONFIG, EXIT_ABORTED, EXIT_FAILED = 0, 1, 2, 3
RICCI_FLOW_TOLERANCE = 1e-12


class FlowSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    nodes: int = Field(128, description="Number of curve nodes N (even, >= 16)")
    dt: Optional[float] = Field(None, description="Time step; defaults to cfl_safety * (min ds)^2")
    t_end: float = Field(..., description="Final time of the curve flow")
    record_every: int = Field(1, description="Steps between recorded frames")
    epsilon: Optional[float] = Field(None, description="h_eps regularisation; defaults to 1e-3 (max k + 1)")


class OutputSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    directory: str = "results"
    formats: List[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    background: BackgroundSpec
    curve: CurveSpec
    flow: FlowSettings
    checks: List[str] = Field(default_factory=lambda: ["length_squared", "k2_corrected", "inequalities"])
    output: OutputSettings = Field(default_factory=OutputSettings)
    seed: int = 0
    levels: int = Field(3, description="Default number of refinement levels for convergence")
    expected_failures: List[str] = Field(default_factory=list)


# ---------------- parsing ----------------

def _describe(err: Dict[str, Any]) -> str:
    loc = ".".join(str(p) for p in err.get("loc", ()))
    if err.get("type") == "extra_forbidden":
        return f"unknown key '{loc}'"
    return f"{loc}: {err.get('msg')}"


def _section(model, raw: Any):
    try:
        return model.model_validate(raw)
    except ValidationError:
        return None


def _cross_field_violations(raw: Dict[str, Any]) -> List[str]:
    """Invariants spanning sections, checked on whatever parts validate on their own."""
    problems: List[str] = []
    background = _section(BackgroundSpec, raw.get("background"))
    flow = _section(FlowSettings, raw.get("flow"))
    curve = _section(CurveSpec, raw.get("curve"))
    if background is not None:
        problems.extend(background.spec_violations())
    if flow is not None:
        if flow.nodes < 16 or flow.nodes % 2:
            problems.append(f"flow.nodes must be even and >= 16 (got {flow.nodes})")
        if flow.record_every < 1:
            problems.append("flow.record_every must be >= 1")
        if flow.dt is not None and not flow.dt > 0:
            problems.append(f"flow.dt must be > 0 (got {flow.dt})")
        if flow.epsilon is not None and flow.epsilon < 0:
            problems.append("flow.epsilon must be >= 0")
        if not flow.t_end > 0:
            problems.append("flow.t_end must be > 0")
    if background is not None and flow is not None and flow.t_end > background.horizon:
        message = f"flow.t_end {flow.t_end} exceeds background.horizon {background.horizon}"
        if background.kind != "flat_torus":
            message += f" (positivity bound r0^2/2 = {background.r0 ** 2 / 2:g})"
        problems.append(message)
    if background is not None and curve is not None and CURVE_KINDS[curve.kind] != background.kind:
        problems.append(f"curve.kind '{curve.kind}' needs a {CURVE_KINDS[curve.kind]} background, got {background.kind}")
    for name in raw.get("checks", []) or []:
        if name not in CHECKS:
            problems.append(f"unknown check '{name}'")
    return problems


def resolve_defaults(config: ExperimentConfig) -> ExperimentConfig:
    """Fill flow.dt and flow.epsilon from the seeded curve."""
    if config.flow.dt is not None and config.flow.epsilon is not None:
        return config
    curve = seed_curve(config.curve, config.flow.nodes, make_background(config.background), seed=config.seed)
    updates = {}
    if config.flow.dt is None:
        updates["dt"] = default_dt(curve)
    if config.flow.epsilon is None:
        updates["epsilon"] = default_epsilon(curve)
    return config.model_copy(update={"flow": config.flow.model_copy(update=updates)})


def _frame_violations(config: ExperimentConfig) -> List[str]:
    """Frame layout problems that would otherwise only surface while evaluating checks."""
    flow = config.flow
    steps, dt = step_plan(flow.t_end, flow.dt, flow.record_every)
    frames = steps // flow.record_every + 1
    tau = dt * flow.record_every
    if frames < 5 and any(name in FRAME_CHECKS for name in config.checks):
        return [f"flow records {frames} frames, residual checks need at least 5 (lower flow.record_every or raise flow.t_end)"]
    if any(name in SPACETIME_CHECKS for name in config.checks):
        family = make_background(config.background)
        pad = 2.0 * family.time_step()
        lo, hi = family.time_interval
        first, last = 2.0 * tau, flow.t_end - 2.0 * tau
        if first - pad < lo or last + pad > hi:
            return [
                f"residual frames span [{first:g}, {last:g}], closer than 2·h_fd = {pad:g} to the time interval "
                f"[{lo:g}, {hi:g}] (raise flow.dt * flow.record_every or lower flow.t_end)"
            ]
    return []


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"invalid JSON: {e}"])
    if not isinstance(raw, dict):
        raise ConfigError(["configuration must be a JSON object"])

    violations: List[str] = []
    config: Optional[ExperimentConfig] = None
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        violations.extend(_describe(err) for err in e.errors())
    violations.extend(v for v in _cross_field_violations(raw) if v not in violations)
    if violations or config is None:
        raise ConfigError(violations)
    try:
        config = resolve_defaults(config)
    except LabError as e:
        raise ConfigError([e.detail])
    violations = _frame_violations(config)
    if violations:
        raise ConfigError(violations)
    return config


# ---------------- scenarios ----------------

@dataclass(frozen=True)
class Scenario:
    description: str
    config: Dict[str, Any]
    expected_failures: Tuple[str, ...] = ()


_ALL_FLAT = ["length_squared", "length_commutator", "k2_corrected", "k2_book_erroneous", "inequalities", "term_domination", "theta_eps_sweep"]

SCENARIOS: Dict[str, Scenario] = {
    "flat_torus_circle": Scenario(
        "round circle of radius 1 shrinking in the flat torus (closed-form law)",
        {
            "background": {"kind": "flat_torus", "horizon": 0.45},
            "curve": {"kind": "torus_circle", "radius": 1.0},
            "flow": {"nodes": 256, "dt": 1e-4, "t_end": 0.3, "record_every": 10},
            "checks": _ALL_FLAT,
        },
    ),
    "flat_torus_fourier": Scenario(
        "Fourier-perturbed circle in the flat torus (non-trivial length evolution)",
        {
            "background": {"kind": "flat_torus", "horizon": 0.45},
            "curve": {"kind": "torus_fourier", "radius": 1.0, "amplitudes": [0.05, 0.03]},
            "flow": {"nodes": 512, "dt": 2e-5, "t_end": 0.05, "record_every": 50},
            "checks": _ALL_FLAT,
        },
    ),
    "flat_torus_line": Scenario(
        "closed geodesic around the torus circle direction (degenerate ramp, u = 1)",
        {
            "background": {"kind": "flat_torus", "horizon": 0.45},
            "curve": {"kind": "torus_line"},
            "flow": {"nodes": 64, "dt": 1e-3, "t_end": 0.1, "record_every": 5},
            "checks": ["length_squared", "k2_corrected", "u_evolution", "inequalities", "term_domination", "ramp"],
        },
    ),
    "sphere_geodesic": Scenario(
        "equator of the shrinking round sphere (stays a geodesic)",
        {
            "background": {"kind": "shrinking_sphere", "horizon": 0.4, "r0": 1.0},
            "curve": {"kind": "sphere_latitude", "theta0": math.pi / 2},
            "flow": {"nodes": 64, "dt": 1e-3, "t_end": 0.3, "record_every": 10},
            "checks": ["length_squared", "length_commutator", "k2_corrected", "k2_book_erroneous", "inequalities", "term_domination"],
        },
    ),
    "sphere_latitude": Scenario(
        "latitude theta0 = pi/3 on the shrinking round sphere",
        {
            "background": {"kind": "shrinking_sphere", "horizon": 0.4, "r0": 1.0},
            "curve": {"kind": "sphere_latitude", "theta0": math.pi / 3},
            "flow": {"nodes": 32, "dt": 1e-3, "t_end": 0.2, "record_every": 4},
            "checks": [
                "length_squared",
                "length_commutator",
                "k2_corrected",
                "k2_book_erroneous",
                "dropped_terms",
                "inequalities",
                "term_domination",
                "theta_eps_sweep",
            ],
        },
    ),
    "product_ramp": Scenario(
        "modulated equator ramp on sphere x circle; the book k^2 evolution fails here",
        {
            "background": {"kind": "sphere_cross_circle", "horizon": 0.4, "r0": 1.0, "circle_length": 2 * math.pi},
            "curve": {"kind": "product_ramp", "theta0": math.pi / 2, "winding": 1, "modulation": 0.5},
            "flow": {"nodes": 256, "dt": 1e-4, "t_end": 0.2, "record_every": 50},
            "checks": [
                "length_squared",
                "length_commutator",
                "k2_corrected",
                "k2_book_erroneous",
                "dropped_terms",
                "u_evolution",
                "inequalities",
                "term_domination",
                "ramp",
            ],
        },
        expected_failures=("k2_book_erroneous",),
    ),
}


def scenario_config(name: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    if name not in SCENARIOS:
        raise ConfigError([f"unknown scenario '{name}' (see list-scenarios)"])
    scenario = SCENARIOS[name]
    raw = json.loads(json.dumps(scenario.config))
    raw["name"] = name
    raw["expected_failures"] = list(scenario.expected_failures)
    raw.update(overrides or {})
    return parse_config(json.dumps(raw))


def list_scenarios() -> str:
    width = max(len(name) for name in SCENARIOS)
    return "\n".join(f"{name:<{width}}  {scenario.description}" for name, scenario in SCENARIOS.items())


# ---------------- artifacts ----------------

def _fmt(value: Any) -> str:
    if value is None:
        return ""
    value = float(value)
    if math.isnan(value):
        return ""
    return format(value, ".17g")


def _json_value(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_value(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _write_csv(path: str, header: List[str], rows: List[List[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_trajectory(path: str, traj: Trajectory) -> None:
    rows = [
        [_fmt(t)] + [_fmt(traj.scalars[name][i]) for name in SCALAR_COLUMNS]
        for i, t in enumerate(traj.times)
    ]
    _write_csv(path, ["t"] + list(SCALAR_COLUMNS), rows)


def write_residual(path: str, report: ResidualReport) -> None:
    rows = [[_fmt(t), _fmt(a), _fmt(b)] for t, a, b in zip(report.times, report.frame_max(), report.frame_l2())]
    _write_csv(path, ["t", "max_norm", "l2_norm"], rows)


def write_margins(directory: str, series: MonitorSeries) -> None:
    for key, values in series.margins.items():
        times = series.times
        rows = [[_fmt(t), _fmt(v)] for t, v in zip(times, values)]
        _write_csv(os.path.join(directory, f"margins_{series.name}_{key}.csv"), ["t", "min_margin"], rows)


def _constants_record(constants: ConstantsEstimate) -> Dict[str, Any]:
    return {
        "C_hat": constants.C_hat,
        "C1": constants.C1,
        "C2": constants.C2,
        "C_prime": constants.C_prime,
        "per_term": constants.per_term,
        "samples": constants.samples,
        "provenance": constants.provenance,
        "note": "|Ric_g| is the operator norm relative to g(t); C_hat is one admissible coefficient-wise construction",
    }


# ---------------- run ----------------

@dataclass
class RunResult:
    exit_status: int
    checks: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    report: Dict[str, Any] = field(default_factory=dict)


def simulate(config: ExperimentConfig, nodes: Optional[int] = None, dt: Optional[float] = None) -> Trajectory:
    background = make_background(config.background)
    n = config.flow.nodes if nodes is None else nodes
    curve = seed_curve(config.curve, n, background, seed=config.seed)
    state = FlowState(curve, float(config.flow.dt if dt is None else dt), float(config.flow.epsilon or 0.0))
    track_u = any(name in ("u_evolution", "ramp") for name in config.checks)
    return integrate(state, config.flow.t_end, config.flow.record_every, track_u=track_u)


def _evaluate_checks(config: ExperimentConfig, traj: Trajectory) -> Tuple[Dict[str, Any], Dict[str, Any], Optional[ConstantsEstimate]]:
    residuals: Dict[str, ResidualReport] = {}
    monitors: Dict[str, MonitorSeries] = {}
    constants: Optional[ConstantsEstimate] = None

    for name in config.checks:
        if name in RESIDUALS:
            residuals[name] = RESIDUALS[name](traj)
    if any(name in ("inequalities", "term_domination", "ramp") for name in config.checks):
        constants = estimate_constants(traj.background)
    k2 = None
    if constants is not None:
        k2 = residuals.get("k2_corrected") or RESIDUALS["k2_corrected"](traj)
    for name in config.checks:
        if name == "inequalities":
            monitors[name] = monitor_inequalities(traj, constants, k2, residuals.get("length_commutator"))
        elif name == "term_domination":
            monitors[name] = term_domination(traj, constants)
        elif name == "ramp":
            monitors[name] = ramp_monitor(traj, constants, k2, residuals.get("u_evolution"))
        elif name == "theta_eps_sweep":
            monitors[name] = theta_eps_sweep(traj)
    return residuals, monitors, constants


def _check_outcomes(config: ExperimentConfig, residuals, monitors) -> Dict[str, Dict[str, Any]]:
    outcomes: Dict[str, Dict[str, Any]] = {}
    for name, report in residuals.items():
        entry: Dict[str, Any] = {
            "kind": "residual",
            "max_norm": report.max_norm,
            "l2_norm": report.l2_norm,
            "scale": report.scale,
            "term_breakdown": report.term_breakdown,
            "passed": True if name in REPORT_ONLY else report.passes(),
        }
        if name == "k2_book_erroneous":
            entry["limiting_residual"] = report.max_norm
        outcomes[name] = entry
    for name, series in monitors.items():
        outcomes[name] = {
            "kind": "monitor",
            "passed": series.all_pass(),
            "min_margins": {key: series.min_margin(key) for key in series.margins},
            "tolerances": series.tolerances,
            "events": list(series.events),
        }
    for name, entry in outcomes.items():
        entry["expected_failure"] = name in config.expected_failures
        entry["behaved"] = entry["passed"] != entry["expected_failure"]
    return outcomes


def run(config: ExperimentConfig, out_dir: Optional[str] = None) -> RunResult:
    directory = out_dir or config.output.directory
    os.makedirs(directory, exist_ok=True)
    want_csv = "csv" in config.output.formats
    want_json = "json" in config.output.formats
    report: Dict[str, Any] = {
        "name": config.name,
        "seed": config.seed,
        "background": config.background.model_dump(),
        "curve": config.curve.model_dump(),
        "resolution": {
            "N": config.flow.nodes,
            "dt": config.flow.dt,
            "record_every": config.flow.record_every,
            "t_end": config.flow.t_end,
            "epsilon": config.flow.epsilon,
        },
    }
    logger.info(f"[Run] {config.name}: {config.background.kind} / {config.curve.kind}, checks={','.join(config.checks)}")

    try:
        traj = simulate(config)
    except FlowAborted as exc:
        logger.error(f"[Run] {config.name}: {exc.detail}")
        if want_csv and exc.trajectory is not None and exc.trajectory.frame_count:
            write_trajectory(os.path.join(directory, "trajectory.csv"), exc.trajectory)
        report.update({"status": "aborted", "reason": exc.reason, "event_time": exc.time, "exit_status": EXIT_ABORTED})
        if want_json:
            _write_report(directory, report)
        return RunResult(EXIT_ABORTED, report=report)

    if want_csv:
        write_trajectory(os.path.join(directory, "trajectory.csv"), traj)
    try:
        residuals, monitors, constants = _evaluate_checks(config, traj)
    except LabError as exc:
        logger.error(f"[Run] {config.name}: checks could not be evaluated: {type(exc).__name__}: {exc.detail}")
        report.update({"status": "error", "reason": f"{type(exc).__name__}: {exc.detail}", "exit_status": EXIT_FAILED})
        if want_json:
            _write_report(directory, report)
        return RunResult(EXIT_FAILED, report=report)

    outcomes = _check_outcomes(config, residuals, monitors)
    if want_csv:
        for name, residual in residuals.items():
            write_residual(os.path.join(directory, f"residual_{name}.csv"), residual)
        for series in monitors.values():
            write_margins(directory, series)

    failed = [name for name, entry in outcomes.items() if not entry["behaved"]]
    status = EXIT_OK if not failed else EXIT_FAILED
    report.update(
        {
            "status": "completed",
            "constants": _constants_record(constants) if constants is not None else None,
            "checks": outcomes,
            "exit_status": status,
        }
    )
    if "dropped_terms" in residuals and "k2_book_erroneous" in residuals:
        report["contrast"] = {
            "book_limit": residuals["k2_book_erroneous"].max_norm,
            "dropped_terms": residuals["dropped_terms"].max_norm,
        }
    if want_json:
        _write_report(directory, report)
    if failed:
        logger.warning(f"[Run] {config.name}: unexpected outcome for {', '.join(failed)}")
    else:
        logger.info(f"[Run] {config.name}: all {len(outcomes)} checks behaved")
    return RunResult(status, outcomes, report)


def _write_report(directory: str, report: Dict[str, Any]) -> None:
    with open(os.path.join(directory, "report.json"), "w", encoding="utf-8") as f:
        json.dump(_json_value(report), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------- convergence ----------------

def refinement_levels(config: ExperimentConfig, count: Optional[int] = None) -> List[Tuple[int, float]]:
    count = config.levels if count is None else count
    return [(config.flow.nodes * 2**i, config.flow.dt / 4**i) for i in range(count)]


def convergence(config: ExperimentConfig, levels: Optional[int] = None, out_dir: Optional[str] = None):
    directory = out_dir or config.output.directory
    os.makedirs(directory, exist_ok=True)
    checks = [name for name in config.checks if name in RESIDUALS]
    if not checks:
        raise ConfigError(["convergence needs at least one residual check"])
    plan = refinement_levels(config, levels)
    tables = convergence_study(plan, lambda n, dt: simulate(config, n, dt), checks)

    lines = []
    for name, table in tables.items():
        rows = [[str(row.N), _fmt(row.dt), _fmt(row.max_norm), _fmt(row.l2_norm)] for row in table.rows]
        rows.append(["order", "", _fmt(table.order) if math.isfinite(table.order) else "inf", _fmt(table.l2_order) if math.isfinite(table.l2_order) else "inf"])
        rows.append(["monotone", "", "true" if table.monotone else "false", ""])
        _write_csv(os.path.join(directory, f"convergence_{name}.csv"), ["N", "dt", "max_norm", "l2_norm"], rows)
        lines.append(f"{name}")
        lines.append(f"  {'N':>6}  {'dt':>12}  {'max_norm':>12}  {'l2_norm':>12}")
        for row in table.rows:
            lines.append(f"  {row.N:>6}  {row.dt:>12.4e}  {row.max_norm:>12.4e}  {row.l2_norm:>12.4e}")
        trend = "decreasing monotonically" if table.monotone else "NOT monotone"
        lines.append(f"  fitted order {table.order:.3g} (l2 {table.l2_order:.3g}), max norm {trend}")
    print("\n".join(lines))
    return tables


# ---------------- background validation / suite ----------------

def validate_background(spec: BackgroundSpec, seed: int = 0, samples: int = 64) -> Tuple[float, bool]:
    family = make_background(spec)
    residual = validate_ricci_flow(family, samples, seed)
    data = exact_data(spec, 0.0)
    ok = residual < RICCI_FLOW_TOLERANCE
    print(f"{spec.kind} ({BACKGROUND_KINDS[spec.kind]})")
    print(f"  ricci-flow residual {residual:.3e} over {samples} samples ({'ok' if ok else 'FAILED'})")
    print(f"  sup|Ric| at t=0: {data.sup_ricci:.6g}  sup|grad Ric|: {data.sup_grad_ricci:.3g}")
    print(f"  spacetime curvature blocks at t=0: horizontal {data.horizontal_block:.6g}, mixed {data.mixed_block:.3g}")
    return residual, ok


def suite(out_dir: str, seed: int = 0, names: Optional[List[str]] = None) -> int:
    os.makedirs(out_dir, exist_ok=True)
    summary: Dict[str, Any] = {}
    worst = EXIT_OK
    for name in names or list(SCENARIOS):
        config = scenario_config(name, {"seed": seed})
        result = run(config, os.path.join(out_dir, name))
        summary[name] = {
            "exit_status": result.exit_status,
            "checks": {check: {k: entry[k] for k in ("passed", "expected_failure", "behaved")} for check, entry in result.checks.items()},
        }
        if result.exit_status != EXIT_OK:
            worst = max(worst, result.exit_status)
    with open(os.path.join(out_dir, "suite.json"), "w", encoding="utf-8") as f:
        json.dump(_json_value(summary), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"[Run] suite finished with exit status {worst}")
    return worst
