import math

import numpy as np
import pytest
from pydantic import ValidationError

from curveflow.backgrounds import BackgroundSpec, exact_data, make_background
from curveflow.errors import DomainError, SpecError
from curveflow.geometry_core import operator_norm, ricci_horizontal, sample_grid


def test_shrinking_sphere_metric_closed_form(sphere):
    g = sphere.metric(0.25, np.array([1.0, 0.0]))
    assert g[0, 0] == pytest.approx(0.5)
    assert g[1, 1] == pytest.approx(0.5 * math.sin(1.0) ** 2)
    np.testing.assert_allclose(sphere.metric_dot(0.25, np.array([1.0, 0.0])), -2 * np.diag([1.0, math.sin(1.0) ** 2]))


def test_circle_factor_is_ricci_flat(product):
    x = np.array([[0.6, 1.0, 0.5], [2.0, 4.0, 6.0]])
    for t in (0.0, 0.2, 0.39):
        ric = ricci_horizontal(product, t, x)
        assert np.all(ric[:, 2, :] == 0) and np.all(ric[:, :, 2] == 0)
    assert product.circle_axis == 2


def test_flat_torus_uses_last_coordinate_as_circle(flat_torus):
    assert flat_torus.circle_axis == 1
    assert flat_torus.chart.periodic == (True, True)


def test_sphere_horizon_positivity_bound():
    spec = BackgroundSpec(kind="shrinking_sphere", horizon=0.5, r0=1.0)
    with pytest.raises(SpecError) as info:
        make_background(spec)
    assert "0.5" in info.value.detail


def test_invalid_parameters_are_all_reported():
    spec = BackgroundSpec(kind="sphere_cross_circle", horizon=0.1, r0=-1.0, circle_length=0.0)
    problems = spec.spec_violations()
    assert any("r0" in p for p in problems)
    assert any("circle_length" in p for p in problems)


def test_unknown_parameters_are_rejected():
    with pytest.raises(ValidationError):
        BackgroundSpec(kind="flat_torus", horizon=1.0, radius=2.0)


def test_exact_data_flat():
    data = exact_data(BackgroundSpec(kind="flat_torus", horizon=1.0), 0.5)
    assert data.sup_ricci == 0
    assert data.r_squared is None
    assert data.horizontal_block == 0 and data.mixed_block == 0


def test_exact_data_sphere_at_start():
    data = exact_data(BackgroundSpec(kind="shrinking_sphere", horizon=0.4, r0=1.0), 0.0)
    assert data.r_squared == 1.0
    assert data.sup_ricci == pytest.approx(1.0)
    assert data.sup_grad_ricci == 0.0


def test_exact_data_curvature_blocks_match_warped_product():
    spec = BackgroundSpec(kind="shrinking_sphere", horizon=0.4, r0=1.0)
    data = exact_data(spec, 0.1)
    assert data.mixed_sectional == pytest.approx(1 / 0.8**2)
    assert data.horizontal_sectional == pytest.approx((1 - 1 / 0.8) / 0.8)
    # the horizontal block of a 2-sphere has four equal entries
    assert data.horizontal_block == pytest.approx(2 * abs(data.horizontal_sectional), rel=1e-5)
    assert data.mixed_block < 1e-6


def test_exact_sup_ricci_matches_dense_sampling(sphere):
    spec = BackgroundSpec(kind="shrinking_sphere", horizon=0.4, r0=1.0)
    points = sample_grid(sphere.chart, 17)
    for t in (0.0, 0.2, 0.4):
        sampled = float(np.max(operator_norm(sphere, t, points, ricci_horizontal(sphere, t, points))))
        assert abs(sampled - exact_data(spec, t).sup_ricci) < 1e-8


def test_exact_data_time_range():
    with pytest.raises(DomainError):
        exact_data(BackgroundSpec(kind="shrinking_sphere", horizon=0.4, r0=1.0), 0.41)
