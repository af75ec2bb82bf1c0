import math

import numpy as np
import pytest

from curveflow.errors import PreconditionError
from curveflow.identity_lab import (
    ConstantsEstimate,
    convergence_study,
    correction_terms,
    dropped_terms,
    estimate_constants,
    fit_order,
    frame_terms,
    monitor_inequalities,
    ramp_monitor,
    residual_k2_evolution,
    residual_length_evolution,
    residual_u_evolution,
    term_domination,
    theta_eps_sweep,
)

from conftest import flow


@pytest.fixture(scope="session")
def flat_constants(flat_torus):
    return estimate_constants(flat_torus)


@pytest.fixture(scope="session")
def sphere_constants(sphere):
    return estimate_constants(sphere)


@pytest.fixture(scope="session")
def product_constants(product):
    return estimate_constants(product)


def test_flat_circle_identities(circle_run):
    for form in ("squared", "commutator"):
        assert residual_length_evolution(circle_run, form).passes()
    corrected = residual_k2_evolution(circle_run, "corrected")
    book = residual_k2_evolution(circle_run, "book_erroneous")
    assert corrected.passes()
    np.testing.assert_allclose(corrected.residuals, book.residuals, atol=1e-12)
    assert corrected.residuals.shape == (circle_run.frame_count - 4, circle_run.N)


def test_sphere_identities(latitude_run, geodesic_run):
    for traj in (latitude_run, geodesic_run):
        assert residual_length_evolution(traj, "squared").passes()
        assert residual_length_evolution(traj, "commutator").passes()
        assert residual_k2_evolution(traj, "corrected").passes()
    # the omitted terms cancel on an Einstein background
    assert dropped_terms(latitude_run).max_norm < 1e-5
    assert residual_k2_evolution(latitude_run, "book_erroneous").passes()


def test_book_variant_differs_by_dropped_terms(ramp_run):
    corrected = residual_k2_evolution(ramp_run, "corrected")
    book = residual_k2_evolution(ramp_run, "book_erroneous")
    dropped = dropped_terms(ramp_run)
    np.testing.assert_allclose(book.residuals - corrected.residuals, dropped.residuals, atol=1e-10)
    assert dropped.max_norm > 5e-3
    assert corrected.max_norm < 0.05 * book.max_norm
    assert book.max_norm == pytest.approx(dropped.max_norm, rel=0.2)
    assert not book.passes()


def test_breakdown_names_the_curvature_terms(ramp_run):
    report = residual_k2_evolution(ramp_run, "corrected")
    assert set(correction_terms(frame_terms(ramp_run, 2))) <= set(report.term_breakdown)
    assert report.scale == max(report.term_breakdown.values())


def test_tangential_part_of_curvature_derivative(latitude_run):
    for i in range(2, latitude_run.frame_count - 2):
        assert np.max(np.abs(frame_terms(latitude_run, i)["tangential"])) < 1e-6


def test_u_evolution_on_ramp(ramp_run):
    assert residual_u_evolution(ramp_run).passes(1e-3)


def test_u_evolution_needs_circle_factor(latitude_run):
    with pytest.raises(PreconditionError):
        residual_u_evolution(latitude_run)


def test_residuals_need_five_frames(flat_torus):
    short = flow(flat_torus, {"kind": "torus_circle", "radius": 1.0}, 32, 1e-3, 0.003)
    assert short.frame_count == 4
    with pytest.raises(PreconditionError):
        residual_length_evolution(short)


def test_flat_constants_vanish(flat_constants):
    assert flat_constants.C_hat == 0
    assert flat_constants.C2 == 0
    assert all(value == 0 for value in flat_constants.per_term.values())


def test_sphere_constants(sphere, sphere_constants):
    assert sphere_constants.C2 == pytest.approx(5.0, rel=1e-9)
    assert sphere_constants.C1 == sphere_constants.C_hat / 2
    assert sphere_constants.C_prime == pytest.approx(sphere_constants.C1 + sphere_constants.C2)
    assert sphere_constants.per_term["ricci_SS"] == pytest.approx(4 * 5.0 * 1.1)
    coarse = estimate_constants(sphere, time_samples=5, space_samples=5)
    assert coarse.C_hat == pytest.approx(sphere_constants.C_hat, rel=1e-2)
    assert "operator norm" in sphere_constants.provenance


def test_constants_consistency_is_checked():
    with pytest.raises(PreconditionError):
        ConstantsEstimate(C_hat=2.0, C1=2.0, C2=0.0, C_prime=2.0, per_term={}, samples={}, provenance="")


def test_inequalities_hold_on_flat_circle(circle_run, flat_constants):
    series = monitor_inequalities(circle_run, flat_constants)
    assert series.all_pass()
    # L' = -k^2 L for a flat circle, so the ODE margin is L' - L' = 0 up to discretization
    assert abs(series.min_margin("length_ode")) < 1e-6
    assert series.times.shape == (circle_run.frame_count - 4,)


def test_inequalities_and_domination_on_sphere(latitude_run, sphere_constants):
    assert monitor_inequalities(latitude_run, sphere_constants).all_pass()
    assert term_domination(latitude_run, sphere_constants).all_pass()


def test_domination_on_product(ramp_run, product_constants):
    assert term_domination(ramp_run, product_constants).all_pass()


def test_ramp_reduces_to_regularized_curvature_on_a_line(line_run, flat_constants):
    ramp = ramp_monitor(line_run, flat_constants)
    inequalities = monitor_inequalities(line_run, flat_constants)
    assert ramp.events == []
    np.testing.assert_allclose(ramp.scalars["u_min"], 1.0, rtol=1e-12)
    assert abs(ramp.min_margin("h_over_u")) < 1e-8
    assert abs(inequalities.min_margin("h_eps")) < 1e-8
    assert ramp.passes("h_over_u") and inequalities.passes("h_eps")


def test_ramp_on_product(ramp_run, product_constants):
    ramp = ramp_monitor(ramp_run, product_constants)
    assert ramp.events == []
    assert ramp.passes("h_over_u")
    assert np.all(ramp.scalars["u_min"] > 0)


def test_theta_eps_sweep(latitude_run):
    sweep = theta_eps_sweep(latitude_run)
    assert sweep.all_pass()
    assert {"lower_0.01", "upper_0.0001", "monotone_0.01_0.001"} <= set(sweep.margins)
    with pytest.raises(PreconditionError):
        theta_eps_sweep(latitude_run, [0.0])


def test_fit_order():
    n = np.array([16, 32, 64, 128])
    assert fit_order(n, 3.0 / n.astype(float) ** 4) == pytest.approx(4.0)
    assert fit_order(n, [1e-13, 1e-14, 1e-13, 1e-15]) == math.inf
    assert fit_order(n, [1e-3, 2.5e-4, 1e-13, 1e-14]) == pytest.approx(2.0)


def test_convergence_study_rejects_bad_levels():
    never = lambda n, dt: pytest.fail("simulate must not run")  # noqa: E731
    with pytest.raises(PreconditionError):
        convergence_study([(16, 1e-3), (32, 2.5e-4)], never, ["length_squared"])
    with pytest.raises(PreconditionError):
        convergence_study([(16, 1e-3), (32, 2e-3), (64, 1e-4)], never, ["length_squared"])
    with pytest.raises(PreconditionError):
        convergence_study([(16, 1e-3), (32, 2.5e-4), (64, 6.25e-5)], never, ["no_such_check"])


def test_curvature_derivative_bound_near_inflections(ramp_run, product_constants):
    smallest_k = min(float(np.min(frame_terms(ramp_run, i)["k"])) for i in range(2, ramp_run.frame_count - 2))
    assert smallest_k < 0.1
    series = monitor_inequalities(ramp_run, product_constants)
    assert series.passes("perp_bound")
    assert series.passes("h_eps")
    for i in range(2, ramp_run.frame_count - 2):
        terms = frame_terms(ramp_run, i)
        np.testing.assert_allclose(2.0 * terms["h"] * terms["h_s"], terms["k2_s"], rtol=1e-12, atol=1e-15)


@pytest.mark.slow
def test_product_ramp_contrast_under_refinement(product):
    def simulate(n, dt):
        curve = {"kind": "product_ramp", "theta0": math.pi / 2, "winding": 1, "modulation": 0.5}
        return flow(product, curve, n, dt, 0.02, record_every=4)

    levels = [(32, 1e-3), (64, 2.5e-4), (128, 6.25e-5)]
    tables = convergence_study(levels, simulate, ["k2_corrected", "k2_book_erroneous", "dropped_terms"])
    corrected = tables["k2_corrected"]
    book = tables["k2_book_erroneous"]
    dropped = tables["dropped_terms"]
    assert corrected.order >= 1.8
    assert corrected.monotone
    assert book.order < 0.5
    assert book.rows[-1].max_norm == pytest.approx(dropped.rows[-1].max_norm, rel=0.2)


@pytest.mark.slow
def test_latitude_corrected_identity_converges(sphere):
    def simulate(n, dt):
        return flow(sphere, {"kind": "sphere_latitude", "theta0": math.pi / 3}, n, dt, 0.1, record_every=5)

    levels = [(32, 2e-3), (64, 5e-4), (128, 1.25e-4)]
    tables = convergence_study(levels, simulate, ["k2_corrected", "length_squared"])
    assert tables["k2_corrected"].order >= 1.8
    assert tables["k2_corrected"].monotone


@pytest.mark.slow
def test_length_evolution_converges_at_fourth_order(flat_torus):
    def simulate(n, dt):
        curve = {"kind": "torus_fourier", "radius": 1.0, "amplitudes": [0.05, 0.03]}
        return flow(flat_torus, curve, n, dt, 0.05, record_every=5)

    levels = [(128, 1e-3), (256, 2.5e-4), (512, 6.25e-5)]
    table = convergence_study(levels, simulate, ["length_squared"])["length_squared"]
    assert table.order >= 3.5
    assert table.monotone


@pytest.mark.slow
def test_ramp_stays_positive_to_the_horizon(product, product_constants):
    curve = {"kind": "product_ramp", "theta0": math.pi / 2, "winding": 1, "modulation": 0.5}
    traj = flow(product, curve, 64, 5e-4, 0.39, record_every=20, track_u=True)
    u_min = traj.scalars["min_u"]
    assert traj.times[-1] == pytest.approx(0.39)
    assert np.all(u_min > 0)
    assert np.min(u_min) >= u_min[0] / 2
    ramp = ramp_monitor(traj, product_constants)
    assert ramp.events == []
    assert ramp.passes("h_over_u")
