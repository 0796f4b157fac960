import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import constants as C
from scipy.integrate import solve_ivp

from microtrap import reproduce as R
from microtrap.analysis import (CD111, DriveConfig, SaddleError, UntrappedError, find_minimum,
                                mathieu_beta, secular_analysis, trap_depth, trap_fields)
from microtrap.dynamics import FieldModel
from microtrap.fields import GridField, sample

OMEGA = 2 * np.pi * 15.9e6


def monodromy_beta(a, q):
    """Secular tune from one period of u'' + (a - 2 q cos 2t) u = 0."""
    def rhs(t, y):
        k = a - 2 * q * math.cos(2 * t)
        return [y[1], -k * y[0], y[3], -k * y[2]]

    sol = solve_ivp(rhs, (0, math.pi), [1, 0, 0, 1], rtol=1e-12, atol=1e-12, method="DOP853")
    tr = sol.y[0, -1] + sol.y[3, -1]
    return math.acos(tr / 2) / math.pi if abs(tr) < 2 else math.nan


def grid(fn, half=60e-6, h=2e-6):
    n = int(round(2 * half / h)) + 1
    origin = -half * np.ones(3)
    x = origin[0] + h * np.arange(n)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    return GridField(fn(X, Y, Z), origin, h)


# --- Mathieu ----------------------------------------------------------------

def test_beta_zero():
    assert mathieu_beta(0.0, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_beta_low_q():
    b = mathieu_beta(0.0, 0.3)
    assert b == pytest.approx(monodromy_beta(0.0, 0.3), abs=1e-8)
    # the lowest-order tune q / sqrt(2) undershoots by about 2 % at this q
    assert b == pytest.approx(0.3 / math.sqrt(2), rel=0.02)
    assert mathieu_beta(0.0, 0.05) == pytest.approx(0.05 / math.sqrt(2), rel=0.001)


def test_beta_paper_q_brackets_transverse_frequencies():
    f = mathieu_beta(0.0, 0.62) * OMEGA / 2 / (2 * np.pi)
    assert 3.3e6 < f < 4.3e6
    assert mathieu_beta(0.0, 0.62) == pytest.approx(monodromy_beta(0.0, 0.62), abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.05, 0.05), st.floats(0.02, 0.85))
def test_beta_matches_monodromy(a, q):
    ref = monodromy_beta(a, q)
    if not (0.01 < ref < 0.99):
        return
    assert mathieu_beta(a, q) == pytest.approx(ref, abs=1e-7)


def test_beta_unstable():
    assert not 0 < mathieu_beta(0.0, 1.0) < 1


# --- synthetic quadrupole ---------------------------------------------------

def quadrupole_model(r0, V0=8.0, kz=0.0):
    rf = grid(lambda x, y, z: (y ** 2 - z ** 2) / (2 * r0 ** 2))
    dc = grid(lambda x, y, z: kz * (x ** 2 - 0.5 * (y ** 2 + z ** 2)))
    return FieldModel.from_potentials(dc, rf, DriveConfig(V0, OMEGA, {}, CD111))


def test_ideal_quadrupole_pseudopotential():
    tf = quadrupole_model(47e-6).trap_fields()
    r = 30e-6
    expected = C.e ** 2 * 8.0 ** 2 * r ** 2 / (4 * CD111.mass * OMEGA ** 2 * 47e-6 ** 4) / C.e
    # cross-check through q: U = (q^2 / 16) m Omega^2 r^2 / e
    q = 2 * C.e * 8.0 / (CD111.mass * OMEGA ** 2 * 47e-6 ** 2)
    assert expected == pytest.approx(q ** 2 / 16 * CD111.mass * OMEGA ** 2 * r ** 2 / C.e, rel=1e-12)
    assert sample(tf.U, (0, r, 0)).value == pytest.approx(expected, rel=1e-6)
    assert sample(tf.U, (0, 0, r)).value == pytest.approx(expected, rel=1e-6)


def test_ideal_quadrupole_q():
    model = quadrupole_model(47.4e-6, kz=2e8)
    sa = model.analysis((0, 0, 0))
    q = 2 * C.e * 8.0 / (CD111.mass * OMEGA ** 2 * 47.4e-6 ** 2)
    assert q == pytest.approx(0.62, abs=0.01)
    assert sa.q == pytest.approx(q, rel=1e-6)
    assert sa.stable
    np.testing.assert_allclose(sa.r0, 0, atol=1e-9)


def test_zero_rf_gives_static_potential():
    model = quadrupole_model(47e-6, V0=0.0, kz=2e8)
    tf = model.trap_fields()
    np.testing.assert_array_equal(tf.U.values, tf.dc.values)


def test_static_saddle_untrapped():
    model = quadrupole_model(47e-6, V0=0.0, kz=2e8)
    with pytest.raises((UntrappedError, SaddleError)):
        model.analysis((0, 0, 0))


# --- depth ------------------------------------------------------------------

def test_depth_double_well_barrier():
    """min(x^2, (x-2)^2 + 0.5): leaving the left well costs the barrier height."""
    h = 0.125
    x = -2.125 + h * np.arange(35)
    y = -1.0 + h * np.arange(17)
    X, Y, Z = np.meshgrid(x, y, y, indexing="ij")
    U = np.minimum(X ** 2, (X - 2) ** 2 + 0.5) + 10 * (Y ** 2 + Z ** 2)
    dr = trap_depth(GridField(U, (x[0], y[0], y[0]), h), (0.0, 0.0, 0.0))
    assert dr.depth == pytest.approx(1.125 ** 2, abs=1e-12)
    assert dr.saddle_position[0] == pytest.approx(1.125)
    np.testing.assert_allclose(dr.escape_direction, [1, 0, 0], atol=1e-12)


def test_depth_flood_fill_equals_graph_search():
    assert R.depth_oracle_agreement(n_grids=5) == 5


def test_depth_open_basin_untrapped():
    U = grid(lambda x, y, z: x + 0 * y)
    with pytest.raises(UntrappedError):
        find_minimum(U, (0, 0, 0))


# --- paper operating point --------------------------------------------------

def test_minimum_near_zone_centre(analysis):
    sa, _ = analysis
    assert np.linalg.norm(sa.r0 - np.array([-77.5e-6, 0, 0])) < 3e-6


def test_paper_point(analysis):
    sa, dr = analysis
    f = sa.frequencies_hz
    np.testing.assert_allclose(f, [1.0e6, 3.3e6, 4.3e6], rtol=0.2)
    assert sa.q == pytest.approx(0.62, rel=0.2)
    assert sa.axis_tilt == pytest.approx(40, abs=10)
    assert dr.depth == pytest.approx(0.08, rel=0.3)
    assert dr.escape_tilt_angle == pytest.approx(37, abs=10)
    assert np.allclose(sa.hessian_U, sa.hessian_U.T)
    np.testing.assert_allclose(sa.axes @ sa.axes.T, np.eye(3), atol=1e-12)


def test_pseudo_vs_mathieu_low_q(bases, drive):
    """Lowest-order pseudopotential frequencies match the Mathieu result at small q.

    Halving V0 with the DC voltages scaled by 1/4 keeps a / q^2, and so the
    trap shape, fixed while q drops to about 0.34.
    """
    sa = secular_analysis(bases, drive.scaled(V0=4.0, dc_scale=0.25), seed=(-77.5e-6, 0, 0))
    assert sa.q < 0.35
    np.testing.assert_allclose(sa.omega, sa.omega_mathieu, rtol=0.05)


def test_pseudo_vs_mathieu_paper_q(analysis):
    """At the operating q the gap is the higher-order Mathieu correction."""
    sa, _ = analysis
    ratio = sa.omega_mathieu / sa.omega
    exact = [monodromy_beta(a, q) / math.sqrt(a + q * q / 2) for a, q in zip(sa.mathieu_a, sa.mathieu_q)]
    assert np.all(ratio[1:] > 1.05)
    np.testing.assert_allclose(ratio, exact, rtol=0.02)


def test_stray_field_displacement(bases, drive, analysis):
    sa, _ = analysis
    E = np.array([0.0, 100.0, 0.0])
    moved = secular_analysis(bases, drive, seed=sa.r0, stray_field=E)
    # harmonic oracle: H dr = q E, with H in eV/m^2 and charge e
    expected = np.linalg.solve(sa.hessian_U, E)
    # e E / (m w^2) is 0.12 um at 4.3 MHz; the transverse axes are tilted, so
    # a field along y displaces by an amount between the two transverse values
    shift = [C.e * 100.0 / (CD111.mass * w ** 2) for w in (2 * np.pi * 4.3e6, *sa.omega[1:])]
    assert shift[0] == pytest.approx(0.12e-6, rel=0.02)
    assert shift[2] * 0.99 <= np.linalg.norm(expected) <= shift[1] * 1.01
    np.testing.assert_allclose(moved.r0 - sa.r0, expected, atol=0.15 * np.linalg.norm(expected))


def test_dc_scaling(bases, drive, analysis):
    sa, _ = analysis
    alpha = 2.0
    sa2 = secular_analysis(bases, drive.scaled(dc_scale=alpha), seed=sa.r0)
    np.testing.assert_allclose(sa2.hessian_rf, sa.hessian_rf, rtol=0.02, atol=1e-3 * np.abs(sa.hessian_rf).max())
    assert sa2.omega[0] / sa.omega[0] == pytest.approx(math.sqrt(alpha), rel=0.05)


def test_rf_only_depth_scales_quadratically(bases, drive):
    zero = drive.with_dc({})
    r = (-77.5e-6, 0, 0)
    d1 = trap_depth(trap_fields(bases, zero).U, r).depth
    d2 = trap_depth(trap_fields(bases, zero.scaled(V0=16.0)).U, r).depth
    assert d2 / d1 == pytest.approx(4.0, rel=1e-9)


def test_zero_rf_paper_untrapped(bases, drive):
    with pytest.raises((UntrappedError, SaddleError)):
        secular_analysis(bases, drive.scaled(V0=0.0), seed=(-77.5e-6, 0, 0))


def test_high_drive_flags_unstable(bases, drive):
    sa = secular_analysis(bases, drive.scaled(V0=12.5), seed=(-77.5e-6, 0, 0))
    assert sa.q > 0.908 and not sa.stable
