import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microtrap.circuit import (BreakdownLimits, CircuitModel, Resonator, ScalingModel, ScalingRangeWarning,
                               check_operating_point, depth_scaling, dissipation, implied_self_capacitance,
                               loaded_frequency, loaded_resonance, power_density_scaling, quality_factor)

OM = 2 * math.pi * 15.9e6


def test_quality_factor():
    Q = quality_factor(CircuitModel(34e-12, 5.0, 0.0), OM)
    assert Q == pytest.approx(58.9, abs=0.05)
    assert Q == pytest.approx(55, rel=0.15)
    assert quality_factor(CircuitModel(34e-12, 0.0, 0.01), OM) == pytest.approx(100.0)
    assert quality_factor(CircuitModel(34e-12, 5.0, 1e9), OM) < 1e-8


def test_dissipation():
    assert float(dissipation(8.0, 34e-12, OM, 55)) == pytest.approx(1.98e-3, rel=0.01)
    assert float(dissipation(0.0, 34e-12, OM, 55)) == 0.0


def test_self_capacitance():
    cs = implied_self_capacitance(54.9e6, 15.9e6, 34e-12)
    assert cs == pytest.approx(3.1e-12, abs=0.05e-12)
    assert loaded_frequency(54.9e6, cs, 34e-12) == pytest.approx(15.9e6, rel=1e-14)
    assert loaded_resonance(Resonator(f_self=54.9e6), 34e-12, 15.9e6)["C_self"] == cs


def test_loading_limits():
    assert loaded_frequency(54.9e6, 3e-12, 0.0) == 54.9e6
    assert loaded_frequency(54.9e6, 3e-12, 9e-12) == pytest.approx(54.9e6 / 2)
    with pytest.raises(ValueError):
        loaded_resonance(Resonator(), 34e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-13, 1e-10), st.floats(1e-13, 1e-9), st.floats(1e6, 1e9))
def test_resonator_round_trip(c_self, c_trap, f_self):
    f = loaded_frequency(f_self, c_self, c_trap)
    assert implied_self_capacitance(f_self, f, c_trap) == pytest.approx(c_self, rel=1e-9)


def test_depth_scaling():
    m = ScalingModel(calibration=(60e-6, 0.08))
    assert depth_scaling(60e-6, 4e-6, m).value == pytest.approx(0.08)
    assert depth_scaling(30e-6, 4e-6, m).value == pytest.approx(0.08 * 2 ** 0.44)
    assert 2 ** 0.44 == pytest.approx(1.36, abs=0.005)
    with pytest.warns(ScalingRangeWarning):
        out = depth_scaling(100e-6, 4e-6, m)
    assert not out.in_range


def test_depth_scaling_reference_terms():
    m = ScalingModel(calibration=(60e-6, 0.08), reference=(4e-6, 0.62, 1e6))
    assert depth_scaling(60e-6, 8e-6, m, q=0.31, E_max=2e6).value == pytest.approx(0.08 * 2 * 0.5 * 2)


def test_power_density_scaling():
    m = ScalingModel()
    assert power_density_scaling(60e-6, m, 1.0, 60e-6).value == 1.0
    assert power_density_scaling(30e-6, m, 1.0, 60e-6).value == pytest.approx(4.59, abs=0.01)
    assert power_density_scaling(120e-6, m, 1.0, 60e-6).value == pytest.approx(0.218, abs=0.001)


def test_breakdown():
    assert check_operating_point(8.0, OM).ok
    rep = check_operating_point(11.0, 2 * math.pi * 14.75e6)
    assert not rep.ok and rep.violations
    rep = check_operating_point(8.0, OM, static_voltages=[45.0])
    assert rep.ok and rep.warnings
    assert not check_operating_point(8.0, OM, BreakdownLimits(), [-70.0]).ok


def test_invalid_inputs():
    with pytest.raises(ValueError):
        CircuitModel(C=0.0)
    with pytest.raises(ValueError):
        quality_factor(CircuitModel(), 0.0)
    with pytest.raises(ValueError):
        depth_scaling(60e-6, 4e-6, ScalingModel())
