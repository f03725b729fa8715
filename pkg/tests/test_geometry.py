import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from twistwire.geometry import (
    TwistProfile,
    drift_numeric,
    map_point,
    metric_at,
    metric_numeric,
    twist_angle,
    twist_curvature,
    twist_rate,
)

from oracles import twist_metric

PROFILE = TwistProfile(1.5 * math.pi, 17.5)
coords = st.floats(-60, 60)
section = st.tuples(st.floats(-10, 10), st.floats(-5, 5))


def test_twist_angle_limits():
    assert twist_angle(0.0, PROFILE) == pytest.approx(0.75 * math.pi, abs=1e-15)
    assert twist_angle(1e4, PROFILE) == pytest.approx(1.5 * math.pi, abs=1e-15)
    assert twist_angle(-1e4, PROFILE) == pytest.approx(0.0, abs=1e-15)
    assert twist_angle(-35.0, PROFILE) == pytest.approx(0.00234 * PROFILE.Phi, abs=1e-5)


def test_twist_rate_peak():
    assert twist_rate(0.0, PROFILE) == pytest.approx(0.1519, abs=1e-4)
    assert twist_rate(0.0, TwistProfile(0.0, 17.5)) == 0.0


@settings(max_examples=50, deadline=None)
@given(x=coords)
def test_twist_rate_is_even_and_is_the_derivative(x):
    assert twist_rate(x, PROFILE) == pytest.approx(twist_rate(-x, PROFILE), abs=1e-15)
    h = 1e-4
    numeric = (twist_angle(x + h, PROFILE) - twist_angle(x - h, PROFILE)) / (2 * h)
    assert numeric == pytest.approx(twist_rate(x, PROFILE), abs=1e-8)
    numeric2 = (twist_rate(x + h, PROFILE) - twist_rate(x - h, PROFILE)) / (2 * h)
    assert numeric2 == pytest.approx(twist_curvature(x, PROFILE), abs=1e-8)


def test_profile_accepts_complex_positions():
    z = 10.0 * np.exp(0.3j)
    assert PROFILE.alpha(z) == pytest.approx(0.5 * (erf(10.0 / 17.5) + 1), abs=0.5)  # finite, analytic
    h = 1e-5
    d = (PROFILE.alpha(z + h) - PROFILE.alpha(z - h)) / (2 * h)
    assert d == pytest.approx(PROFILE.alpha_prime(z), rel=1e-7)


def test_map_point_examples():
    assert map_point(3.0, 1.0, 2.0, TwistProfile(0.0, 17.5)) == pytest.approx((3.0, 1.0, 2.0))
    x, y, z = map_point(1e4, 1.0, 0.0, TwistProfile(math.pi / 2, 17.5))
    assert (y, z) == pytest.approx((0.0, -1.0), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(x=coords, yz=section)
def test_map_point_preserves_radius(x, yz):
    y, z = yz
    _, yp, zp = map_point(x, y, z, PROFILE)
    assert yp**2 + zp**2 == pytest.approx(y**2 + z**2, rel=1e-12, abs=1e-12)


def test_metric_example():
    m = metric_at(0.0, 5.0, 0.0, PROFILE)
    assert m.G[0, 0] == pytest.approx(1.5766, abs=1e-3)
    assert m.G[0, 2] == pytest.approx(-0.7594, abs=1e-3)
    assert m.G[0, 1] == 0.0


def test_metric_identity_without_twist():
    m = metric_at(np.linspace(-50, 50, 7), 3.0, -2.0, TwistProfile(0.0, 17.5))
    assert np.allclose(m.G, np.eye(3)) and np.allclose(m.drift, 0.0)


@settings(max_examples=50, deadline=None)
@given(x=coords, yz=section)
def test_metric_closed_form_against_numeric_jacobian(x, yz):
    y, z = yz
    m = metric_at(x, y, z, PROFILE)
    assert np.allclose(m.G, metric_numeric(x, y, z, PROFILE), atol=1e-8)
    assert np.allclose(m.G, twist_metric(x, y, z, PROFILE.Phi, PROFILE.lam), atol=1e-13)
    assert np.allclose(m.G @ m.G_inv, np.eye(3), atol=1e-12)
    assert m.sqrt_det == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(x=st.floats(-40, 40), yz=section)
def test_drift_matches_second_derivatives_of_map(x, yz):
    y, z = yz
    m = metric_at(x, y, z, PROFILE)
    assert np.allclose(m.drift, drift_numeric(x, y, z, PROFILE), atol=2e-5)


def test_det_one_on_many_points(rng):
    x = rng.uniform(-60, 60, 1000)
    y = rng.uniform(-10, 10, 1000)
    z = rng.uniform(-5, 5, 1000)
    m = metric_at(x, y, z, PROFILE)
    assert np.max(np.abs(m.sqrt_det - 1.0)) < 1e-12


def test_metric_is_identity_in_the_leads():
    x = np.array([-100.0, -80.0, 80.0, 100.0])
    m = metric_at(x, 10.0, 5.0, TwistProfile(3 * math.pi, 17.5))
    assert np.max(np.abs(m.G - np.eye(3))) < 1e-6
