"""Chart-based tensor calculus for an evolving metric g(t) and the spacetime
metric dt² + g(t) on M×I.

All fields are batched: a point array of shape (..., n) evaluates to tensors of
shape (..., n, n) and so on. Index 0 of every spacetime array is the time
direction; indices 1..n are the chart coordinates.

Curvature convention: Rm(A, B, C, D) = <R(A, B)D, C> with
R(A, B) = ∇_A∇_B − ∇_B∇_A − ∇_[A,B], so Rm(A, B, A, B) is the sectional
curvature of span{A, B} times |A∧B|².
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import DomainError, GeometryError, PreconditionError, SpecError
from .settings import get_settings

logger = logging.getLogger(__name__)

TensorField = Callable[[float, np.ndarray], np.ndarray]

UNIT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ChartDomain:
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    periodic: Tuple[bool, ...]
    boundary_margin: float = 0.0

    def __post_init__(self) -> None:
        if not (len(self.lower) == len(self.upper) == len(self.periodic)) or not self.lower:
            raise SpecError("Chart bounds and periodic flags must have the same positive length")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise SpecError("Chart requires lower[i] < upper[i] for every coordinate")
        if self.boundary_margin < 0:
            raise SpecError("boundary_margin must be >= 0")

    @property
    def dimension(self) -> int:
        return len(self.lower)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float) - np.asarray(self.lower, dtype=float)

    def reduce(self, x: np.ndarray) -> np.ndarray:
        """Reduce periodic coordinates into [lower, upper)."""
        x = np.array(x, dtype=float, copy=True)
        lo = np.asarray(self.lower, dtype=float)
        ext = self.extent
        for i, per in enumerate(self.periodic):
            if per:
                x[..., i] = lo[i] + np.mod(x[..., i] - lo[i], ext[i])
        return x

    def admissible(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        ok = np.all(np.isfinite(x), axis=-1)
        for i, per in enumerate(self.periodic):
            if per:
                continue
            lo = self.lower[i] + self.boundary_margin
            hi = self.upper[i] - self.boundary_margin
            ok &= (x[..., i] >= lo) & (x[..., i] <= hi)
        return ok

    def require_admissible(self, x: np.ndarray) -> None:
        ok = self.admissible(x)
        if not np.all(ok):
            bad = np.asarray(x)[~ok] if np.ndim(ok) else np.asarray(x)
            raise DomainError(f"Point outside admissible chart region: {np.atleast_2d(bad)[0].tolist()}")

    def fd_steps(self) -> np.ndarray:
        return float(get_settings()["fd_relative_step"]) * self.extent


@dataclass(frozen=True)
class MetricFamily:
    """Time-dependent metric on a chart with analytic closures."""

    chart: ChartDomain
    metric: TensorField
    metric_dot: TensorField
    horizon: float
    ricci: Optional[TensorField] = None
    metric_grad: Optional[TensorField] = None
    circle_axis: Optional[int] = None
    name: str = "custom"

    @property
    def dimension(self) -> int:
        return self.chart.dimension

    @property
    def time_interval(self) -> Tuple[float, float]:
        return (0.0, float(self.horizon))

    def time_step(self) -> float:
        return float(get_settings()["fd_relative_step"]) * float(self.horizon)


@dataclass(frozen=True)
class ChristoffelTable:
    horizontal: np.ndarray  # Γ^k_ij, [..., k, i, j]
    mixed: np.ndarray  # Γ̂^k_i0, [..., k, i]
    vertical: np.ndarray  # Γ̂^0_ij, [..., i, j]

    def full(self) -> np.ndarray:
        n = self.horizontal.shape[-1]
        batch = self.horizontal.shape[:-3]
        out = np.zeros(batch + (n + 1, n + 1, n + 1))
        out[..., 1:, 1:, 1:] = self.horizontal
        out[..., 1:, 1:, 0] = self.mixed
        out[..., 1:, 0, 1:] = self.mixed
        out[..., 0, 1:, 1:] = self.vertical
        return out


@dataclass(frozen=True)
class SpacetimeVector:
    horizontal: np.ndarray
    vertical: np.ndarray

    @classmethod
    def horizontal_only(cls, v: np.ndarray) -> "SpacetimeVector":
        v = np.asarray(v, dtype=float)
        return cls(v, np.zeros(v.shape[:-1]))

    @classmethod
    def time(cls, shape: Tuple[int, ...], n: int) -> "SpacetimeVector":
        return cls(np.zeros(shape + (n,)), np.ones(shape))

    @classmethod
    def from_array(cls, y: np.ndarray) -> "SpacetimeVector":
        return cls(np.asarray(y[..., 1:]), np.asarray(y[..., 0]))

    def as_array(self) -> np.ndarray:
        h = np.asarray(self.horizontal, dtype=float)
        v = np.broadcast_to(np.asarray(self.vertical, dtype=float), h.shape[:-1])
        return np.concatenate([v[..., None], h], axis=-1)


# ---------------- helpers ----------------

def _points(m: MetricFamily, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != m.dimension:
        raise PreconditionError(f"Expected points with {m.dimension} coordinates, got shape {x.shape}")
    return x


def _check(m: MetricFamily, t: float, x: np.ndarray) -> np.ndarray:
    x = _points(m, x)
    lo, hi = m.time_interval
    if not (lo - 1e-12 <= t <= hi + 1e-12):
        raise DomainError(f"Time {t} outside [{lo}, {hi}]")
    m.chart.require_admissible(x)
    return x


def g_inner(g: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...i,...j->...", g, u, v)


def checked_metric(m: MetricFamily, t: float, x: np.ndarray) -> np.ndarray:
    g = np.asarray(m.metric(t, x), dtype=float)
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        raise GeometryError(f"Metric '{m.name}' is not positive definite at t={t}")
    return g


def _shift(x: np.ndarray, axis: int, h: float) -> np.ndarray:
    y = np.array(x, dtype=float, copy=True)
    y[..., axis] += h
    return y


def _central(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (f(_shift(x, axis, h)) - f(_shift(x, axis, -h))) / (2.0 * h)


def _derivative(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, axis: int, h: float, richardson: bool) -> np.ndarray:
    coarse = _central(f, x, axis, h)
    if not richardson:
        return coarse
    fine = _central(f, x, axis, 0.5 * h)
    return (4.0 * fine - coarse) / 3.0


def _metric_grad(m: MetricFamily, t: float, x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """∂_k g_ij as [..., k, i, j]."""
    if m.metric_grad is not None:
        return np.asarray(m.metric_grad(t, x), dtype=float)
    parts = [_central(lambda y: m.metric(t, y), x, k, steps[k]) for k in range(m.dimension)]
    return np.stack(parts, axis=-3)


def _christoffel(m: MetricFamily, t: float, x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    g = np.asarray(m.metric(t, x), dtype=float)
    dg = _metric_grad(m, t, x, steps)
    lower = 0.5 * (np.einsum("...ijl->...lij", dg) + np.einsum("...jil->...lij", dg) - dg)
    n = m.dimension
    flat = lower.reshape(lower.shape[:-3] + (n, n * n))
    return np.linalg.solve(g, flat).reshape(lower.shape)


def _ricci_from_christoffel(gamma: np.ndarray, dgamma: np.ndarray) -> np.ndarray:
    # dgamma[..., m, k, i, j] = ∂_m Γ^k_ij
    return (
        np.einsum("...kkij->...ij", dgamma)
        - np.einsum("...ikkj->...ij", dgamma)
        + np.einsum("...kkl,...lij->...ij", gamma, gamma)
        - np.einsum("...kil,...lkj->...ij", gamma, gamma)
    )


def _christoffel_grad(m: MetricFamily, t: float, x: np.ndarray, steps: np.ndarray, richardson: bool = False) -> np.ndarray:
    parts = [
        _derivative(lambda y: _christoffel(m, t, y, steps), x, k, steps[k], richardson)
        for k in range(m.dimension)
    ]
    return np.stack(parts, axis=-4)


def _ricci(m: MetricFamily, t: float, x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    if m.ricci is not None:
        return np.asarray(m.ricci(t, x), dtype=float)
    gamma = _christoffel(m, t, x, steps)
    return _ricci_from_christoffel(gamma, _christoffel_grad(m, t, x, steps))


def _spacetime_christoffel(m: MetricFamily, t: float, x: np.ndarray, steps: np.ndarray) -> ChristoffelTable:
    g = np.asarray(m.metric(t, x), dtype=float)
    gamma = _christoffel(m, t, x, steps)
    ric = _ricci(m, t, x, steps)
    mixed = -np.linalg.solve(g, ric)
    return ChristoffelTable(horizontal=gamma, mixed=mixed, vertical=ric)


def _spacetime_metric(g: np.ndarray) -> np.ndarray:
    n = g.shape[-1]
    out = np.zeros(g.shape[:-2] + (n + 1, n + 1))
    out[..., 0, 0] = 1.0
    out[..., 1:, 1:] = g
    return out


def _lower_riemann(metric: np.ndarray, gamma: np.ndarray, dgamma: np.ndarray) -> np.ndarray:
    """Rm[a, b, c, d] = <R(∂_a, ∂_b)∂_d, ∂_c> from Γ and dgamma[..., a, l, b, c] = ∂_a Γ^l_bc."""
    r_up = (
        np.einsum("...albc->...labc", dgamma)
        - np.einsum("...blac->...labc", dgamma)
        + np.einsum("...lam,...mbc->...labc", gamma, gamma)
        - np.einsum("...lbm,...mac->...labc", gamma, gamma)
    )
    return np.einsum("...cl,...labd->...abcd", metric, r_up)


# ---------------- operations ----------------

def christoffel_horizontal(m: MetricFamily, t: float, x: np.ndarray) -> np.ndarray:
    x = _check(m, t, x)
    checked_metric(m, t, x)
    return _christoffel(m, t, x, m.chart.fd_steps())


def ricci_horizontal(m: MetricFamily, t: float, x: np.ndarray) -> np.ndarray:
    x = _check(m, t, x)
    checked_metric(m, t, x)
    return _ricci(m, t, x, m.chart.fd_steps())


def ricci_finite_difference(m: MetricFamily, t: float, x: np.ndarray) -> np.ndarray:
    """Ricci tensor from differenced Christoffel symbols, ignoring any analytic closure."""
    x = _check(m, t, x)
    checked_metric(m, t, x)
    steps = m.chart.fd_steps()
    gamma = _christoffel(m, t, x, steps)
    return _ricci_from_christoffel(gamma, _christoffel_grad(m, t, x, steps))


def metric_compatibility_residual(m: MetricFamily, t: float, x: np.ndarray, steps: Optional[np.ndarray] = None) -> np.ndarray:
    """∂_k g_ij − Γ^l_ki g_lj − Γ^l_kj g_il with ∂g differenced at ``steps``.

    Γ comes from the family itself (analytic ∂g when supplied), so the residual
    measures the differencing error of ∂g.
    """
    x = _check(m, t, x)
    steps = m.chart.fd_steps() if steps is None else np.asarray(steps, dtype=float)
    g = np.asarray(m.metric(t, x), dtype=float)
    dg = np.stack([_central(lambda y: m.metric(t, y), x, k, steps[k]) for k in range(m.dimension)], axis=-3)
    gamma = _christoffel(m, t, x, steps)
    return dg - np.einsum("...lki,...lj->...kij", gamma, g) - np.einsum("...lkj,...il->...kij", gamma, g)


def cov_deriv_ricci(m: MetricFamily, t: float, x: np.ndarray, s: np.ndarray) -> np.ndarray:
    x = _check(m, t, x)
    g = checked_metric(m, t, x)
    s = np.asarray(s, dtype=float)
    if np.any(np.abs(g_inner(g, s, s) - 1.0) > UNIT_TOLERANCE):
        raise PreconditionError("cov_deriv_ricci requires a g-unit direction")
    steps = m.chart.fd_steps()
    gamma = _christoffel(m, t, x, steps)
    ric = _ricci(m, t, x, steps)
    dric = np.stack([_central(lambda y: _ricci(m, t, y, steps), x, k, steps[k]) for k in range(m.dimension)], axis=-3)
    return (
        np.einsum("...k,...kij->...ij", s, dric)
        - np.einsum("...k,...lki,...lj->...ij", s, gamma, ric)
        - np.einsum("...k,...lkj,...il->...ij", s, gamma, ric)
    )


def ricci_gradient_tensor(m: MetricFamily, t: float, x: np.ndarray) -> np.ndarray:
    """(∇_k Ric)_ij as [..., k, i, j]."""
    x = _check(m, t, x)
    steps = m.chart.fd_steps()
    gamma = _christoffel(m, t, x, steps)
    ric = _ricci(m, t, x, steps)
    dric = np.stack([_central(lambda y: _ricci(m, t, y, steps), x, k, steps[k]) for k in range(m.dimension)], axis=-3)
    return dric - np.einsum("...lki,...lj->...kij", gamma, ric) - np.einsum("...lkj,...il->...kij", gamma, ric)


def spacetime_christoffel(m: MetricFamily, t: float, x: np.ndarray) -> ChristoffelTable:
    x = _check(m, t, x)
    checked_metric(m, t, x)
    return _spacetime_christoffel(m, t, x, m.chart.fd_steps())


def spacetime_inner(m: MetricFamily, t: float, x: np.ndarray, u: SpacetimeVector, v: SpacetimeVector) -> np.ndarray:
    g = np.asarray(m.metric(t, _points(m, x)), dtype=float)
    return g_inner(g, u.horizontal, v.horizontal) + np.asarray(u.vertical) * np.asarray(v.vertical)


def spacetime_cov_deriv(
    m: MetricFamily,
    t: float,
    x: np.ndarray,
    direction: SpacetimeVector,
    field: SpacetimeVector,
    rate: Optional[SpacetimeVector] = None,
) -> SpacetimeVector:
    """∇_A V for the spacetime connection.

    ``rate`` holds A(V^a), the derivative of the field's components along the
    direction (taken along the curve by the caller). Without it the field is
    treated as having constant chart components, e.g. ∂_t or e_i.
    """
    x = _check(m, t, x)
    a = direction.as_array()
    y = field.as_array()
    batch = x.shape[:-1]
    if a.shape[:-1] != batch or y.shape[:-1] != batch:
        raise PreconditionError("Direction and field must be sampled at the same surface points")
    if rate is None:
        da = np.zeros_like(y)
    else:
        da = rate.as_array()
        if da.shape != y.shape:
            raise PreconditionError("Direction is not representable on the sampled surface")
    table = _spacetime_christoffel(m, t, x, m.chart.fd_steps()).full()
    return SpacetimeVector.from_array(da + np.einsum("...abc,...b,...c->...a", table, a, y))


def _require_time_interior(m: MetricFamily, t: float) -> float:
    ht = m.time_step()
    lo, hi = m.time_interval
    if t - 2.0 * ht < lo or t + 2.0 * ht > hi:
        raise DomainError(f"Time {t} within 2·h_fd of the interval boundary; spacetime curvature needs time differencing")
    return ht


def spacetime_riemann_tensor(m: MetricFamily, t: float, x: np.ndarray) -> np.ndarray:
    x = _check(m, t, x)
    ht = _require_time_interior(m, t)
    steps = m.chart.fd_steps()
    richardson = bool(get_settings()["richardson"])
    n = m.dimension

    def table_at(y: np.ndarray) -> np.ndarray:
        return _spacetime_christoffel(m, float(y[(0,) * (y.ndim - 1) + (0,)]), y[..., 1:], steps).full()

    # time-first spacetime coordinates so every axis is differenced the same way
    y0 = np.concatenate([np.full(x.shape[:-1] + (1,), float(t)), x], axis=-1)
    all_steps = np.concatenate([[ht], steps])
    dtable = np.stack([_derivative(table_at, y0, a, all_steps[a], richardson) for a in range(n + 1)], axis=-4)
    gamma = _spacetime_christoffel(m, t, x, steps).full()
    metric = _spacetime_metric(np.asarray(m.metric(t, x), dtype=float))
    return _lower_riemann(metric, gamma, dtable)


def spacetime_riemann(
    m: MetricFamily,
    t: float,
    x: np.ndarray,
    a: SpacetimeVector,
    b: SpacetimeVector,
    c: SpacetimeVector,
    d: SpacetimeVector,
) -> np.ndarray:
    rm = spacetime_riemann_tensor(m, t, x)
    return np.einsum("...abcd,...a,...b,...c,...d->...", rm, a.as_array(), b.as_array(), c.as_array(), d.as_array())


def horizontal_riemann_tensor(m: MetricFamily, t: float, x: np.ndarray) -> np.ndarray:
    """Riemann tensor of g(t) alone, same convention as the spacetime tensor."""
    x = _check(m, t, x)
    steps = m.chart.fd_steps()
    richardson = bool(get_settings()["richardson"])
    gamma = _christoffel(m, t, x, steps)
    dgamma = _christoffel_grad(m, t, x, steps, richardson)
    return _lower_riemann(np.asarray(m.metric(t, x), dtype=float), gamma, dgamma)


def horizontal_riemann(m: MetricFamily, t: float, x: np.ndarray, a, b, c, d) -> np.ndarray:
    rm = horizontal_riemann_tensor(m, t, x)
    return np.einsum("...abcd,...a,...b,...c,...d->...", rm, a, b, c, d)


def operator_norm(m: MetricFamily, t: float, x: np.ndarray, form: np.ndarray) -> np.ndarray:
    """max |λ| over the eigenvalues of g^{-1}·form (symmetric form)."""
    frame = orthonormal_frame(m, t, x)
    sym = np.einsum("...ia,...ij,...jb->...ab", frame, form, frame)
    return np.max(np.abs(np.linalg.eigvalsh(sym)), axis=-1)


def orthonormal_frame(m: MetricFamily, t: float, x: np.ndarray) -> np.ndarray:
    """Columns e_a with g(e_a, e_b) = δ_ab."""
    g = checked_metric(m, t, _points(m, x))
    chol = np.linalg.cholesky(g)
    return np.swapaxes(np.linalg.inv(chol), -1, -2)


def validate_ricci_flow(m: MetricFamily, sample_count: int, seed: int) -> float:
    if sample_count < 1:
        raise PreconditionError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    chart = m.chart
    lo = np.asarray(chart.lower, dtype=float)
    hi = np.asarray(chart.upper, dtype=float)
    for i, per in enumerate(chart.periodic):
        if not per:
            lo[i] += chart.boundary_margin
            hi[i] -= chart.boundary_margin
    times = rng.uniform(0.0, m.horizon, size=sample_count)
    points = rng.uniform(lo, hi, size=(sample_count, m.dimension))
    steps = chart.fd_steps()
    worst = 0.0
    for t, x in zip(times, points):
        residual = np.asarray(m.metric_dot(float(t), x)) + 2.0 * _ricci(m, float(t), x, steps)
        worst = max(worst, float(np.max(np.abs(residual))))
    logger.debug(f"[Background] ricci-flow residual for {m.name}: {worst:.3e} over {sample_count} samples")
    return worst


def interior_time(m: MetricFamily, t: float) -> float:
    """Clamp t away from the interval ends far enough for time differencing."""
    pad = 2.5 * m.time_step()
    return float(min(max(t, pad), m.horizon - pad))


def sample_grid(chart: ChartDomain, per_axis: int) -> np.ndarray:
    """Tensor grid of admissible points, ``per_axis`` values per coordinate."""
    axes = []
    for lo, hi, per in zip(chart.lower, chart.upper, chart.periodic):
        if per:
            axes.append(lo + (hi - lo) * np.arange(per_axis) / per_axis)
        else:
            axes.append(np.linspace(lo + chart.boundary_margin, hi - chart.boundary_margin, per_axis))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in mesh], axis=-1)


def curvature_block_norms(m: MetricFamily, t: float, x: np.ndarray) -> dict:
    """Frame norms of the curvature quantities that enter the k² evolution.

    ricci: operator norm of Ric relative to g; grad_ricci: |∇Ric|;
    horizontal_block / mixed_block: Frobenius norms of the spacetime tensor
    with no / exactly one time slot, in a ĝ-orthonormal frame.
    """
    x = _check(m, t, x)
    frame = orthonormal_frame(m, t, x)
    ric = ricci_horizontal(m, t, x)
    grad = ricci_gradient_tensor(m, t, x)
    grad_frame = np.einsum("...kij,...ka,...ib,...jc->...abc", grad, frame, frame, frame)
    rm = spacetime_riemann_tensor(m, t, x)
    n = m.dimension
    full_frame = np.zeros(frame.shape[:-2] + (n + 1, n + 1))
    full_frame[..., 0, 0] = 1.0
    full_frame[..., 1:, 1:] = frame
    rm_frame = np.einsum("...abcd,...ai,...bj,...ck,...dl->...ijkl", rm, full_frame, full_frame, full_frame, full_frame)
    return {
        "ricci": operator_norm(m, t, x, ric),
        "grad_ricci": np.sqrt(np.sum(grad_frame**2, axis=(-3, -2, -1))),
        "horizontal_block": np.sqrt(np.sum(rm_frame[..., 1:, 1:, 1:, 1:] ** 2, axis=(-4, -3, -2, -1))),
        "mixed_block": np.sqrt(np.sum(rm_frame[..., 0, 1:, 1:, 1:] ** 2, axis=(-3, -2, -1))),
    }
