import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microtrap import reproduce as R
from microtrap.shuttle import (FilterError, FilterModel, InfeasibleWaveformError, Waveform, apply_filter,
                               axial_model, min_jerk, simulate_transport, solve_waveform)

ZA, ZB = (-77.5e-6, 0.0, 0.0), (77.5e-6, 0.0, 0.0)
W_AX = 2 * np.pi * 0.5e6


# --- filter -------------------------------------------------------------------

def test_filter_constant_unchanged():
    wf = Waveform(1e-6, np.full((50, 3), 2.5), [1, 2, 3])
    np.testing.assert_allclose(apply_filter(wf, FilterModel()).voltages, 2.5)


def test_filter_step_time_constant():
    filt = FilterModel(1e-9, 10e3)
    assert R.rc_step_time(filt) == pytest.approx(filt.tau, rel=0.01)


def test_filter_sinusoid_attenuation():
    filt = FilterModel(1e-9, 1e6)                 # tau = 1 ms
    f = 1e3
    Ts = 1e-6
    t = np.arange(0, 20e-3, Ts)
    y = apply_filter(Waveform(Ts, np.sin(2 * np.pi * f * t)[:, None], [0]), filt).voltages[:, 0]
    keep = t > 10e-3
    A = np.column_stack([np.sin(2 * np.pi * f * t[keep]), np.cos(2 * np.pi * f * t[keep])])
    amp = np.linalg.norm(np.linalg.lstsq(A, y[keep], rcond=None)[0])
    expected = 1 / math.sqrt(1 + (2 * np.pi * f * 1e-3) ** 2)
    assert expected == pytest.approx(0.157, abs=0.001)
    assert amp == pytest.approx(expected, rel=0.01)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=60))
def test_filter_stays_within_input_range(vals):
    v = np.array(vals)[:, None]
    y = apply_filter(Waveform(1e-7, v, [0]), FilterModel()).voltages
    assert y.min() >= v.min() - 1e-12 and y.max() <= v.max() + 1e-12


def test_filter_rejects_coarse_sampling():
    with pytest.raises(FilterError):
        apply_filter(Waveform(1e-5, np.zeros((3, 1)), [0]), FilterModel())


def test_min_jerk_profile():
    s = np.linspace(0, 1, 101)
    p = min_jerk(s)
    assert p[0] == 0 and p[-1] == 1 and np.all(np.diff(p) >= 0)
    assert min_jerk(0.5) == pytest.approx(0.5)


def test_waveform_resample_and_extend():
    wf = Waveform(1e-3, np.array([[0.0], [1.0], [0.0]]), [0])
    r = wf.resample(0.25e-3)
    assert r.n_samples == 9 and r.duration == pytest.approx(wf.duration)
    assert r.voltages[2, 0] == pytest.approx(0.5)
    assert wf.extended(2e-3).n_samples == 5
    np.testing.assert_array_equal(wf.reversed().voltages, wf.voltages[::-1])


# --- waveforms on the paper trap -------------------------------------------

@pytest.fixture(scope="module")
def waveform(bases, drive):
    return solve_waveform(bases, drive, ZA, ZB, 2.5e-3, W_AX)


@pytest.fixture(scope="module")
def axial(bases, drive, waveform):
    return axial_model(bases, drive, waveform)


def test_identity_transport(bases, drive):
    wf = solve_waveform(bases, drive, ZA, ZA, 1e-3, W_AX, n_samples=11)
    np.testing.assert_allclose(wf.voltages, np.repeat(wf.voltages[:1], 11, axis=0), atol=1e-12)
    res = simulate_transport(bases, drive, wf)
    assert res.quanta < 1e-6


def test_waveform_feasible(waveform):
    assert np.abs(waveform.voltages).max() <= 10.0
    assert waveform.duration == pytest.approx(2.5e-3)
    assert waveform.metadata["path"] == "minimum-jerk"


def test_equilibria_follow_path(waveform, axial):
    for i in (0, 25, 50, 75, 100):
        target = ZA[0] + (ZB[0] - ZA[0]) * min_jerk(i / 100)
        x, k = axial.equilibrium(waveform.voltages[i], target)
        assert x == pytest.approx(target, abs=0.5e-6)


def test_infeasible_target_names_sample(bases, drive):
    with pytest.raises(InfeasibleWaveformError) as exc:
        solve_waveform(bases, drive, ZA, ZB, 2.5e-3, 2 * np.pi * 1.0e6, n_samples=21)
    assert exc.value.sample_index is not None
    assert "sample" in str(exc.value)


def test_gain_decreases_with_duration(bases, drive, waveform, axial):
    gains = []
    for T in (2.5e-3, 25e-3, 250e-3):
        wf = waveform if T == 2.5e-3 else solve_waveform(bases, drive, ZA, ZB, T, W_AX)
        gains.append(simulate_transport(bases, drive, wf, axial=axial).quanta)
    assert gains[0] > gains[1] > gains[2]
    assert gains[1] < 1.0


def test_filter_increases_lag(bases, drive, waveform, axial):
    filt = FilterModel(1e-9, 10e3)
    raw = simulate_transport(bases, drive, waveform, axial=axial)
    fw = apply_filter(waveform.resample(0.1 * filt.tau), filt)
    filtered = simulate_transport(bases, drive, fw, axial=axial)
    assert filtered.max_lag > raw.max_lag
    assert filtered.position_error >= raw.position_error


def test_reverse_transport_returns(bases, drive, waveform, axial):
    res = simulate_transport(bases, drive, waveform.reversed(), axial=axial, target_b=ZA)
    assert res.position_error < 1e-6
