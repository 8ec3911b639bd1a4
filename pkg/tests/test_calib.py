import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geomagnav.calib import (
    ETA_MIN,
    SIGMA2_FLOOR,
    AnomalyStats,
    NotReadyError,
    anomaly_weight,
    blend_heading,
    fit_reference,
    heading_discrepancy,
)

headings = st.floats(-180.0, 180.0, allow_nan=False)


def test_discrepancy_identical():
    assert heading_discrepancy([10.0, -20.0, 170.0], [10.0, -20.0, 170.0]) == 0.0


def test_discrepancy_constant_offset():
    a = np.linspace(-100, 100, 20)
    assert heading_discrepancy(a + 10.0, a) == pytest.approx(10.0, abs=1e-12)


def test_discrepancy_wraps():
    assert heading_discrepancy([179.0], [-179.0]) == pytest.approx(2.0)


def test_discrepancy_validation():
    with pytest.raises(ValueError):
        heading_discrepancy([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        heading_discrepancy([], [])


def test_fit_constant_window_hits_floor():
    s = fit_reference([10.0, 10.0, 10.0])
    assert s.mu == 10.0 and s.sigma2 == SIGMA2_FLOOR


def test_fit_two_points_biased():
    s = fit_reference([0.0, 10.0])
    assert s.mu == 5.0 and s.sigma2 == max(25.0, SIGMA2_FLOOR)


def test_fit_gaussian_sample():
    x = np.random.default_rng(11).normal(3.0, 2.0, 10_000)
    s = fit_reference(x)
    assert abs(s.mu - 3.0) < 0.1 and abs(s.sigma2 - 4.0) < 0.2


def test_fit_needs_two_samples():
    with pytest.raises(NotReadyError):
        fit_reference([1.0])


def test_stats_validation():
    with pytest.raises(ValueError):
        AnomalyStats(0.0, 0.0, (1.0,))


def test_weight_at_mean_is_one():
    s = AnomalyStats(4.2, 2.5, (1.0,))
    assert anomaly_weight(4.2, s) == 1.0


def test_weight_one_sigma():
    s = AnomalyStats(2.0, 9.0, (1.0,))
    assert anomaly_weight(5.0, s) == pytest.approx(math.exp(-1.0), abs=1e-15)
    assert anomaly_weight(5.0, s) == pytest.approx(0.3679, abs=1e-4)


def test_weight_clamped_far_out():
    s = AnomalyStats(2.0, 9.0, (1.0,))
    assert anomaly_weight(2.0 + 30.0, s) == ETA_MIN


@given(st.floats(0.0, 200.0), st.floats(0.0, 50.0), st.floats(1.0, 100.0))
def test_weight_range(e, mu, var):
    eta = anomaly_weight(e, AnomalyStats(mu, var, (1.0,)))
    assert ETA_MIN <= eta <= 1.0


def test_blend_passthrough():
    assert blend_heading(1.0, 37.5, -120.0) == 37.5
    assert blend_heading(ETA_MIN, 37.5, -120.0) == pytest.approx(-120.0, abs=0.2)


def test_blend_midpoint():
    assert blend_heading(0.5, 10.0, 20.0) == pytest.approx(15.0, abs=1e-9)


def test_blend_across_seam_takes_short_arc():
    assert blend_heading(0.5, 170.0, -170.0) == pytest.approx(180.0, abs=1e-9)


@given(st.floats(0.0, 1.0), headings, headings)
def test_blend_lies_on_short_arc(eta, a, p):
    out = blend_heading(eta, a, p)
    span = abs(((a - p + 180.0) % 360.0) - 180.0)
    d_p = abs(((out - p + 180.0) % 360.0) - 180.0)
    d_a = abs(((out - a + 180.0) % 360.0) - 180.0)
    assert d_p + d_a == pytest.approx(span, abs=1e-6)
    assert d_p == pytest.approx(eta * span, abs=1e-6)
