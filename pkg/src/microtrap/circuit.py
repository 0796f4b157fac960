"""RF delivery: quality factor, dissipation, resonator loading, breakdown, scaling."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class ScalingRangeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Resonator:
    unloaded_Q: float = 500.0
    f_self: float = 54.9e6          # Hz
    C_self: float | None = None     # F


@dataclass(frozen=True)
class CircuitModel:
    C: float = 34e-12
    R_S: float = 5.0
    tan_delta: float = 0.0
    resonator: Resonator = field(default_factory=Resonator)

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be > 0")
        if self.R_S < 0 or self.tan_delta < 0:
            raise ValueError("R_S and tan_delta must be >= 0")


def quality_factor(model: CircuitModel, omega: float) -> float:
    if not omega > 0:
        raise ValueError("omega must be > 0")
    loss = model.R_S * model.C * omega + model.tan_delta
    return math.inf if loss == 0 else 1.0 / loss


def dissipation(V0, C, omega, Q):
    """Power ``V0^2 C omega / (2 Q)`` (W)."""
    return np.asarray(V0, float) ** 2 * C * omega / (2 * Q)


def loaded_frequency(f_self: float, C_self: float, C_trap: float) -> float:
    if C_trap < 0:
        raise ValueError("C_trap must be >= 0")
    return f_self * math.sqrt(C_self / (C_self + C_trap))


def implied_self_capacitance(f_self: float, f_loaded: float, C_trap: float) -> float:
    if C_trap < 0:
        raise ValueError("C_trap must be >= 0")
    r2 = (f_loaded / f_self) ** 2
    return C_trap * r2 / (1 - r2)


def loaded_resonance(resonator: Resonator, C_trap: float, f_loaded: float | None = None) -> dict:
    """Lumped LC loading.  With ``f_loaded`` given, infer the self-capacitance;
    otherwise predict the loaded frequency from ``resonator.C_self``."""
    if not resonator.f_self > 0:
        raise ValueError("self-resonant frequency must be > 0")
    if f_loaded is not None:
        cs = implied_self_capacitance(resonator.f_self, f_loaded, C_trap)
        return {"f_loaded": f_loaded, "C_self": cs}
    if resonator.C_self is None:
        raise ValueError("resonator.C_self is required to predict the loaded frequency")
    return {"f_loaded": loaded_frequency(resonator.f_self, resonator.C_self, C_trap),
            "C_self": resonator.C_self}


@dataclass(frozen=True)
class ScalingModel:
    sigma_exponent: float = -0.44
    power_density_exponent: float = -2.2
    aspect_range: tuple = (1.0, 20.0)
    calibration: tuple | None = None      # (s_ref, D_ref in eV)
    reference: tuple | None = None        # (h, q, E_max) at the calibration point

    def __post_init__(self):
        if self.calibration is not None and not self.calibration[1] > 0:
            raise ValueError("calibration depth must be > 0")


@dataclass(frozen=True)
class ScaledValue:
    value: float
    in_range: bool


def _check_aspect(s, h, model):
    lo, hi = model.aspect_range
    ok = lo < s / h < hi
    if not ok:
        warnings.warn(f"s/h = {s / h:.3g} outside the scaling range {lo} < s/h < {hi}",
                      ScalingRangeWarning, stacklevel=3)
    return ok


def depth_scaling(s: float, h: float, scaling: ScalingModel, q: float | None = None,
                  E_max: float | None = None) -> ScaledValue:
    """Depth (eV) at in-plane gap ``s``, ``D ~ sigma(s) q E_max h``.

    Without ``scaling.reference`` (or with ``q``/``E_max`` omitted) h, q and
    E_max are held at their calibration values and only ``sigma(s)`` varies.
    """
    if scaling.calibration is None:
        raise ValueError("depth scaling needs a calibration (s_ref, D_ref)")
    ok = _check_aspect(s, h, scaling)
    s_ref, D_ref = scaling.calibration
    D = D_ref * (s / s_ref) ** scaling.sigma_exponent
    if scaling.reference is not None:
        h_ref, q_ref, E_ref = scaling.reference
        D *= h / h_ref
        if q is not None:
            D *= q / q_ref
        if E_max is not None:
            D *= E_max / E_ref
    return ScaledValue(D, ok)


def power_density_scaling(s: float, scaling: ScalingModel, I0_ref: float, s_ref: float,
                          h: float | None = None) -> ScaledValue:
    ok = _check_aspect(s, h, scaling) if h is not None else True
    return ScaledValue(I0_ref * (s / s_ref) ** scaling.power_density_exponent, ok)


@dataclass(frozen=True)
class BreakdownLimits:
    static_limit: float = 70.0
    rf_limit: float = 11.0
    rf_limit_frequency: float = 14.75e6
    warn_threshold: float = 40.0

    def __post_init__(self):
        if not (self.static_limit > 0 and self.rf_limit > 0):
            raise ValueError("limits must be > 0")


@dataclass
class OperatingReport:
    ok: bool = True
    violations: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def check_operating_point(V0: float, omega: float, limits: BreakdownLimits = BreakdownLimits(),
                          static_voltages=()) -> OperatingReport:
    rep = OperatingReport()
    if V0 >= limits.rf_limit:
        rep.violations.append(
            f"RF amplitude {V0:g} V at {omega / (2 * math.pi) / 1e6:.4g} MHz reaches the breakdown limit "
            f"{limits.rf_limit:g} V (observed at {limits.rf_limit_frequency / 1e6:.4g} MHz)")
    for v in np.atleast_1d(np.asarray(static_voltages, float)):
        if abs(v) >= limits.static_limit:
            rep.violations.append(f"static {v:g} V reaches the {limits.static_limit:g} V limit")
        elif abs(v) >= limits.warn_threshold:
            rep.warnings.append(f"static {v:g} V above {limits.warn_threshold:g} V, where nonlinear "
                                "electrode behaviour appears")
    if V0 >= limits.warn_threshold and V0 < limits.rf_limit:
        rep.warnings.append(f"RF amplitude {V0:g} V above {limits.warn_threshold:g} V")
    rep.ok = not rep.violations
    return rep
