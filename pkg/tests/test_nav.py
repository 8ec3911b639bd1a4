import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomagnav.angles import angle_diff, wrap_deg
from geomagnav.field import GeoPosition, World, derive_elements
from geomagnav.nav import (
    DegenerateHeadingError,
    GradientEstimate,
    NavParams,
    NavState,
    NotReadyError,
    ObjectiveVector,
    Policy,
    PolicyError,
    SpeedSchedule,
    analytic_heading,
    estimate_gradients,
    objective,
    run_mission,
    should_terminate,
    speed_update,
    step_kinematics,
)
from geomagnav.projection import LocalProjection

PROJ = LocalProjection(22.6, 132.9)


# ------------------------------------------------------------------ angles

@given(st.floats(-1e5, 1e5, allow_nan=False))
def test_wrap_range(a):
    w = wrap_deg(a)
    assert -180.0 < w <= 180.0
    assert math.isclose(math.cos(math.radians(w)), math.cos(math.radians(a)), abs_tol=1e-6)


def test_wrap_seam():
    assert wrap_deg(-180.0) == 180.0
    assert wrap_deg(540.0) == 180.0
    assert angle_diff(179.0, -179.0) == pytest.approx(-2.0)
    np.testing.assert_allclose(wrap_deg(np.array([190.0, -190.0, 0.0])), [-170.0, 170.0, 0.0])


# -------------------------------------------------------------- projection

@settings(max_examples=200)
@given(st.floats(-2e6, 2e6), st.floats(-2e6, 2e6))
def test_projection_round_trip(x, y):
    lat, lon = PROJ.inverse(x, y)
    x2, y2 = PROJ.forward(lat, lon)
    assert abs(x2 - x) < 1e-6 and abs(y2 - y) < 1e-6


def test_projection_axes():
    x, y = PROJ.forward(23.6, 132.9)
    assert y == 0.0 and x == pytest.approx(PROJ.radius_m * math.radians(1.0))
    x, y = PROJ.forward(22.6, 133.9)
    assert x == 0.0 and y > 0.0


def test_projection_rejects_pole_anchor():
    with pytest.raises(ValueError):
        LocalProjection(90.0, 0.0)


# -------------------------------------------------------------- kinematics

def _state(speed=50.0):
    origin = GeoPosition.from_latlon(22.6, 132.9, PROJ)
    return NavState(origin, 0.0, speed, 0, derive_elements(1.0, 0.0, 0.0))


def test_step_north():
    p = step_kinematics(_state(), 0.0, 1.0, PROJ)
    assert p.x_m == pytest.approx(50_000.0, abs=1e-9) and p.y_m == pytest.approx(0.0, abs=1e-9)


def test_step_east():
    p = step_kinematics(_state(), 90.0, 1.0, PROJ)
    assert p.x_m == pytest.approx(0.0, abs=1e-9) and p.y_m == pytest.approx(50_000.0, abs=1e-9)


def test_step_diagonal_symmetric():
    p = step_kinematics(_state(), 45.0, 1.0, PROJ)
    assert abs(p.x_m - p.y_m) <= 1e-12 * 50_000.0


def test_step_rejects_bad_dt():
    with pytest.raises(ValueError):
        step_kinematics(_state(), 0.0, 0.0, PROJ)


# --------------------------------------------------------------- gradients

def _history(points, fn):
    out = deque(maxlen=3)
    for x, y in points:
        d, i = fn(x, y)
        out.append((GeoPosition.from_xy(x, y, PROJ), _sample(d, i)))
    return out


def _sample(decl, incl, f=40000.0):
    h = f * math.cos(math.radians(incl))
    return derive_elements(h * math.cos(math.radians(decl)), h * math.sin(math.radians(decl)),
                           f * math.sin(math.radians(incl)))


@pytest.mark.parametrize("pts", [
    [(0, 0), (1000, 0), (1000, 1000)],
    [(0, 0), (700, 300), (900, 1400)],
    [(5000, -3000), (4000, -2000), (4500, 100)],
])
def test_gradients_exact_on_linear_field(pts):
    a = 2e-5
    g = estimate_gradients(_history(pts, lambda x, y: (a * x, 10.0 + 3e-5 * y)))
    assert g.valid
    assert g.g_dx == pytest.approx(a, rel=1e-6)
    assert g.g_dy == pytest.approx(0.0, abs=1e-6 * a)
    assert g.g_iy == pytest.approx(3e-5, rel=1e-6)


def test_gradients_constant_field():
    g = estimate_gradients(_history([(0, 0), (800, 100), (900, 900)], lambda x, y: (4.0, 20.0)))
    assert (g.g_dx, g.g_dy, g.g_ix, g.g_iy) == pytest.approx((0, 0, 0, 0), abs=1e-12)


def test_gradients_quadratic_backward_difference():
    # north step then east step: plain backward-difference quotients
    fn = lambda x, y: (1e-8 * x * x, 1e-8 * y * y)  # noqa: E731
    g = estimate_gradients(_history([(0, 0), (1000, 0), (1000, 1000)], fn))
    d0, d1, d2 = fn(0, 0)[0], fn(1000, 0)[0], fn(1000, 1000)[0]
    i0, i1, i2 = fn(0, 0)[1], fn(1000, 0)[1], fn(1000, 1000)[1]
    assert g.g_dx == pytest.approx((d1 - d0) / 1000.0, rel=1e-6)
    assert g.g_dy == pytest.approx((d2 - d1) / 1000.0, abs=1e-12)
    assert g.g_ix == pytest.approx((i1 - i0) / 1000.0, abs=1e-12)
    assert g.g_iy == pytest.approx((i2 - i1) / 1000.0, rel=1e-6)


def test_gradients_degenerate_inputs():
    fn = lambda x, y: (1e-5 * x, 1e-5 * y)  # noqa: E731
    assert not estimate_gradients(_history([(0, 0), (1000, 0), (2000, 0)], fn)).valid
    assert not estimate_gradients(_history([(0, 0), (0, 0), (1000, 1000)], fn)).valid
    with pytest.raises(NotReadyError):
        estimate_gradients(_history([(0, 0), (1000, 0)], fn))


# ----------------------------------------------------------------- heading

@pytest.mark.parametrize("ei, expected", [(0.5, 90.0), (-0.5, -90.0)])
def test_heading_single_term(ei, expected):
    g = GradientEstimate(1.0, 0.0, 0.0, 0.0)
    assert analytic_heading((3.0, 10.0 + ei), (3.0, 10.0), g) == pytest.approx(expected)


def test_heading_degenerate_at_destination():
    with pytest.raises(DegenerateHeadingError):
        analytic_heading((3.0, 10.0), (3.0, 10.0), GradientEstimate(1e-5, 2e-5, 3e-5, -1e-5))


def test_heading_random_tuples_match_direct_evaluation():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        ed, ei = rng.normal(size=2)
        gdx, gdy, gix, giy = rng.normal(size=4) * 1e-5
        got = analytic_heading((ed, 30.0 + ei), (0.0, 30.0), GradientEstimate(gdx, gdy, gix, giy))
        literal = math.degrees(math.atan2(ei * gdx - ed * gix, ed * giy - ei * gdy))
        if gdx * giy - gdy * gix > 0.0:
            literal += 180.0
        assert abs(angle_diff(got, literal)) < 1e-9


def test_heading_points_down_the_linearised_error():
    # stepping along the returned heading reduces both errors to first order
    rng = np.random.default_rng(3)
    for _ in range(200):
        gdx, gdy, gix, giy = rng.normal(size=4) * 1e-5
        ed, ei = rng.normal(size=2)
        th = math.radians(analytic_heading((ed, 20.0 + ei), (0.0, 20.0), GradientEstimate(gdx, gdy, gix, giy)))
        u = np.array([math.cos(th), math.sin(th)])
        J = np.array([[gdx, gdy], [gix, giy]])
        step = np.linalg.solve(J, -np.array([ed, ei]))
        assert float(u @ step) / np.linalg.norm(step) == pytest.approx(1.0, abs=1e-9)


# --------------------------------------------------------------- objective

M0 = derive_elements(30000.0, 2000.0, 12000.0)
MD = derive_elements(29000.0, 3000.0, 11000.0)


def test_objective_arrival_and_start():
    assert objective(MD, MD, M0).total == 0.0
    assert objective(M0, MD, M0).total == pytest.approx(1.0, abs=1e-12)


def test_objective_halfway():
    mid = derive_elements(29500.0, 2500.0, 11500.0)
    obj = objective(mid, MD, M0)
    # components are exactly halfway; D and I are close but not exactly linear
    for name, v in zip(("bx", "by", "bz"), obj.elements[:3]):
        assert v == pytest.approx(0.25, abs=1e-12), name
    assert obj.total == pytest.approx(0.25, abs=5e-3)


def test_objective_excludes_flat_elements():
    m0 = derive_elements(30000.0, 2000.0, 12000.0)
    md = derive_elements(29000.0, 2000.0, 11000.0)
    obj = objective(m0, md, m0)
    assert "by" in obj.excluded and obj.total == pytest.approx(1.0)


@pytest.mark.parametrize("F, eps, step, max_steps, expected", [
    (0.019, 0.02, 10, 300, "success"),
    (0.5, 0.02, 300, 300, "budget-exhausted"),
    (0.03, 0.05, 10, 300, "success"),
    (0.06, 0.05, 10, 300, None),
])
def test_should_terminate(F, eps, step, max_steps, expected):
    obj = ObjectiveVector((F,) * 5, F, ())
    assert should_terminate(obj, eps, step, max_steps) == expected


# ------------------------------------------------------------------- speed

def test_speed_outside_box():
    s = SpeedSchedule(v0_kmh=50.0, decay=0.5, decay_interval=5)
    assert speed_update(s, GeoPosition(21.4, 136.0), GeoPosition(20.8, 136.0), 3, 20) == 50.0


def test_speed_inside_box_last_step():
    s = SpeedSchedule(v0_kmh=50.0, decay=0.5, decay_interval=5)
    assert speed_update(s, GeoPosition(20.9, 136.0), GeoPosition(20.8, 136.0), 20, 20) == 25.0


def test_speed_inside_box_capped():
    s = SpeedSchedule(v0_kmh=50.0, decay=0.5, decay_interval=5)
    v = speed_update(s, GeoPosition(20.9, 136.0), GeoPosition(20.8, 136.0), 15, 20)
    assert v == min(50.0, 50.0 * 0.5 * math.e) == 50.0


def test_speed_schedule_validation():
    with pytest.raises(ValueError):
        SpeedSchedule(decay=0.0)
    with pytest.raises(ValueError):
        SpeedSchedule(decay_interval=0)


# ----------------------------------------------------------------- mission

def test_mission_to_origin_terminates_immediately():
    o = GeoPosition(22.6, 132.9)
    r = run_mission(World(), o, [o], Policy(), SpeedSchedule(), 0.02, 300)
    assert r.outcome == "success" and r.steps == 0 and r.table["F_total"][0] == 0.0


def test_mission_anomaly_free_analytic():
    r = run_mission(World(), GeoPosition(22.6, 132.9), [GeoPosition(20.8, 136.0)], Policy(),
                    SpeedSchedule(), 0.02, 300)
    assert r.outcome == "success" and r.steps <= 300
    assert r.table["F_total"][-1] <= 0.02
    assert r.table["F_total"][0] == 1.0
    assert r.metrics.deviation < 0.2


def test_mission_budget_exhausted_keeps_trajectory():
    r = run_mission(World(), GeoPosition(22.6, 132.9), [GeoPosition(20.8, 136.0)], Policy(),
                    SpeedSchedule(), 0.02, 10)
    assert r.outcome == "budget-exhausted" and r.steps == 10
    assert len(r.table["lat"]) == 11


def test_policy_needs_model():
    with pytest.raises(PolicyError):
        run_mission(World(), GeoPosition(22.6, 132.9), [GeoPosition(20.8, 136.0)], Policy("calibrated"),
                    SpeedSchedule(), 0.02, 10)
    with pytest.raises(PolicyError):
        Policy("bogus")


def test_mission_abort_outside_grid():
    from geomagnav.field import sample_grid
    grid = sample_grid(World(), np.arange(20.0, 23.01, 0.25), np.arange(132.0, 134.01, 0.25))
    r = run_mission(World(dipole=None, grid=grid), GeoPosition(22.6, 132.9), [GeoPosition(20.8, 136.0)],
                    Policy(), SpeedSchedule(), 0.02, 300)
    assert r.outcome == "aborted" and "outside" in r.message


def test_mission_window_and_bootstrap_params():
    r = run_mission(World(), GeoPosition(22.6, 132.9), [GeoPosition(20.8, 136.0)], Policy(),
                    SpeedSchedule(), 0.02, 300, NavParams(window=10))
    assert r.outcome == "success"


def test_mission_abort_origin_outside_grid():
    from geomagnav.field import sample_grid
    grid = sample_grid(World(), np.arange(20.0, 23.01, 0.25), np.arange(132.0, 134.01, 0.25))
    r = run_mission(World(dipole=None, grid=grid), GeoPosition(25.0, 132.9), [GeoPosition(21.0, 133.0)],
                    Policy(), SpeedSchedule(), 0.02, 300)
    assert r.outcome == "aborted" and r.metrics is None and "origin" in r.message
