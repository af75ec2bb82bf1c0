import math

import pytest

from curveflow.backgrounds import BackgroundSpec, make_background
from curveflow.curve_flow import CurveSpec, FlowState, integrate, seed_curve


def build(kind, **params):
    return make_background(BackgroundSpec(kind=kind, **params))


def flow(background, curve_params, nodes, dt, t_end, record_every=1, epsilon=1e-3, track_u=False):
    curve = seed_curve(CurveSpec(**curve_params), nodes, background)
    return integrate(FlowState(curve, dt, epsilon), t_end, record_every, track_u=track_u)


@pytest.fixture(scope="session")
def flat_torus():
    return build("flat_torus", horizon=0.45)


@pytest.fixture(scope="session")
def sphere():
    return build("shrinking_sphere", horizon=0.4, r0=1.0)


@pytest.fixture(scope="session")
def product():
    return build("sphere_cross_circle", horizon=0.4, r0=1.0, circle_length=2 * math.pi)


@pytest.fixture(scope="session")
def circle_run(flat_torus):
    return flow(flat_torus, {"kind": "torus_circle", "radius": 1.0}, 64, 5e-4, 0.1, record_every=4)


@pytest.fixture(scope="session")
def latitude_run(sphere):
    return flow(sphere, {"kind": "sphere_latitude", "theta0": math.pi / 3}, 32, 2e-3, 0.1, record_every=5)


@pytest.fixture(scope="session")
def geodesic_run(sphere):
    return flow(sphere, {"kind": "sphere_latitude", "theta0": math.pi / 2}, 32, 2e-3, 0.1, record_every=5)


@pytest.fixture(scope="session")
def line_run(flat_torus):
    return flow(flat_torus, {"kind": "torus_line"}, 32, 1e-3, 0.02, record_every=2, track_u=True)


@pytest.fixture(scope="session")
def ramp_run(product):
    return flow(
        product,
        {"kind": "product_ramp", "theta0": math.pi / 2, "winding": 1, "modulation": 0.5},
        64,
        5e-4,
        0.03,
        record_every=6,
        track_u=True,
    )
