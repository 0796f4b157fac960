"""Electric-field-noise heating, Raman carrier thermometry and boil-out."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import constants as C

from .analysis import CD111, IonSpecies

LAMB_DICKE_WARN = 0.3


class LambDickeWarning(UserWarning):
    pass


class HeatingFitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Field-noise spectral density ``S_E_ref`` ((V/m)^2/Hz) at ``d_ref`` (m),
    scaling as ``d^-p``."""

    S_E_ref: float
    d_ref: float
    p: float = 4.0

    def __post_init__(self):
        if self.S_E_ref < 0:
            raise ValueError("S_E_ref must be >= 0")
        if not self.d_ref > 0:
            raise ValueError("d_ref must be > 0")

    def S_E(self, d: float) -> float:
        return self.S_E_ref * (self.d_ref / d) ** self.p


@dataclass(frozen=True)
class RamanConfig:
    wavelength: float = 214.5e-9
    beam_angle: float = math.radians(7.0)
    axis_angle: float = math.radians(45.0)
    detuning: float = 70e9
    beatnote: float = 14.53e9
    probe_time: float = 10e-6

    def __post_init__(self):
        if not self.wavelength > 0:
            raise ValueError("wavelength must be > 0")
        if not 0 <= self.beam_angle < math.pi:
            raise ValueError("beam_angle must lie in [0, pi)")

    @property
    def delta_k_axial(self) -> float:
        k = 2 * math.pi / self.wavelength
        return 2 * k * math.sin(self.beam_angle / 2) * math.cos(self.axis_angle)


@dataclass(frozen=True)
class HeatingResult:
    nbar_rate: float      # quanta/s
    eta: float
    fit_error: float      # quanta/s
    rates: tuple = ()     # (tau, R, sigma_R) per delay
    warning: str = ""


def lamb_dicke(raman: RamanConfig, omega_axial: float, species: IonSpecies = CD111) -> float:
    if not omega_axial > 0:
        raise ValueError("omega_axial must be > 0")
    x0 = math.sqrt(C.hbar / (2 * species.mass * omega_axial))
    return abs(raman.delta_k_axial) * x0


def noise_to_heating(noise: NoiseModel, d: float, omega: float, species: IonSpecies = CD111) -> float:
    """Heating rate dn/dt = q^2 S_E / (4 m hbar omega) for single-sided ``S_E``."""
    if not d > 0 or not omega > 0:
        raise ValueError("d and omega must be > 0")
    return species.charge ** 2 * noise.S_E(d) / (4 * species.mass * C.hbar * omega)


def heating_to_noise(rate: float, omega: float, species: IonSpecies = CD111) -> float:
    return rate * 4 * species.mass * C.hbar * omega / species.charge ** 2


def carrier_rate(R0: float, eta: float, nbar: float):
    """Debye-Waller suppressed carrier Rabi rate.  Warns outside the Lamb-Dicke regime."""
    x = eta * eta * np.asarray(nbar, float)
    if np.any(x > LAMB_DICKE_WARN):
        warnings.warn(f"eta^2 nbar = {np.max(x):.3g} exceeds {LAMB_DICKE_WARN}", LambDickeWarning,
                      stacklevel=2)
    return R0 * np.exp(-x)


def transition_probability(R, t):
    t = np.asarray(t, float)
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    return np.sin(np.asarray(R) * t / 2) ** 2


@dataclass(frozen=True)
class RamanDataset:
    tau: np.ndarray
    t: np.ndarray
    successes: np.ndarray
    shots: np.ndarray

    @property
    def fraction(self):
        return self.successes / self.shots

    def write_csv(self, path, header=""):
        with open(path, "w", newline="") as fh:
            fh.write(header)
            wr = csv.writer(fh)
            wr.writerow(["tau_s", "t_s", "successes", "shots"])
            for row in zip(self.tau, self.t, self.successes, self.shots):
                wr.writerow([f"{row[0]:.9e}", f"{row[1]:.9e}", f"{row[2]:.10g}", int(row[3])])


def simulate_raman_experiment(nbar0, nbar_rate, eta, R0, delays, probe_times, shots=200,
                              rng_seed=None, exact=False) -> RamanDataset:
    """Binomial counts for every (delay, probe time) pair.

    With ``exact=True`` the expected number of successes is returned instead
    of a draw (the infinite-shot limit).
    """
    delays = np.asarray(delays, float)
    probe_times = np.asarray(probe_times, float)
    if np.any(delays < 0) or np.any(probe_times <= 0) or shots < 1:
        raise ValueError("delays must be >= 0, probe times > 0 and shots >= 1")
    tau, t = (a.ravel() for a in np.meshgrid(delays, probe_times, indexing="ij"))
    R = carrier_rate(R0, eta, nbar0 + nbar_rate * tau)
    P = transition_probability(R, t)
    n = np.full(tau.shape, int(shots))
    if exact:
        k = P * n
    else:
        k = np.random.default_rng(rng_seed).binomial(n, P).astype(float)
    return RamanDataset(tau, t, k, n)


def _rate_from_probe(t, frac, shots):
    """Carrier rate from early-time points.

    ``arcsin(sqrt(P)) = R t / 2`` is the exact form of ``P ~ (R t / 2)^2`` and
    stabilises the binomial variance at ``1 / (4 N)``.  Least squares through
    the origin.
    """
    y = np.arcsin(np.sqrt(np.clip(frac, 0, 1)))
    stt = np.sum(t * t)
    R = 2 * np.sum(t * y) / stt
    var_y = np.mean(1.0 / (4 * shots))
    return R, 2 * math.sqrt(var_y / stt)


def fit_heating_rate(data: RamanDataset, eta: float, p_max: float = 0.5) -> HeatingResult:
    taus = np.unique(data.tau)
    if len(taus) < 2:
        raise ValueError("need at least two distinct delays")
    rows = []
    for tau in taus:
        sel = (data.tau == tau)
        frac = data.fraction[sel]
        early = frac < p_max
        if early.sum() < 1:
            raise ValueError(f"no early-time points with P < {p_max} at tau = {tau:g}")
        R, sR = _rate_from_probe(data.t[sel][early], frac[early], data.shots[sel][early])
        if not R > 0:
            raise ValueError(f"non-positive carrier rate at tau = {tau:g}")
        rows.append((tau, R, sR))
    tau, R, sR = map(np.array, zip(*rows))
    y = np.log(R)
    w = (R / sR) ** 2
    # weighted straight line ln R = c - eta^2 nbar_rate tau
    W = np.sum(w)
    tm = np.sum(w * tau) / W
    ym = np.sum(w * y) / W
    Stt = np.sum(w * (tau - tm) ** 2)
    slope = np.sum(w * (tau - tm) * (y - ym)) / Stt
    slope_err = math.sqrt(1.0 / Stt)
    rate = -slope / eta ** 2
    err = slope_err / eta ** 2
    warning = ""
    if rate < 0:
        warning = "carrier rate does not decrease with delay; reporting 0"
        warnings.warn(warning, HeatingFitWarning, stacklevel=2)
        rate = 0.0
    return HeatingResult(rate, eta, err, tuple(zip(tau, R, sR)), warning)


@dataclass(frozen=True)
class BoiloffResult:
    boil_time: float           # s
    dark_power: float          # eV/s
    ratio_to_cold_rate: float


def boiloff_analysis(depth: float, dark_heating_power: float = None, cold_rate: float = None,
                     boil_time: float = None) -> BoiloffResult:
    """Boil-out time ``depth / power`` and the ratio of the dark heating power
    to ``cold_rate`` (eV/s).  Give either the power or the observed boil time."""
    if not depth > 0:
        raise ValueError("depth must be > 0")
    if dark_heating_power is None:
        if not (boil_time and boil_time > 0):
            raise ValueError("give dark_heating_power or boil_time > 0")
        dark_heating_power = depth / boil_time
    if not dark_heating_power > 0:
        raise ValueError("dark_heating_power must be > 0")
    ratio = dark_heating_power / cold_rate if cold_rate else float("nan")
    return BoiloffResult(depth / dark_heating_power, dark_heating_power, ratio)


def quanta_rate_to_ev(rate: float, omega: float) -> float:
    """Heating rate in quanta/s to power in eV/s."""
    return rate * C.hbar * omega / C.e


def thermal_field_noise(resistance: float, temperature: float, d: float) -> float:
    """Johnson-noise field spectral density ``4 k_B T R / d^2``."""
    if resistance < 0 or temperature < 0 or not d > 0:
        raise ValueError("resistance and temperature must be >= 0, d > 0")
    return 4 * C.k * temperature * resistance / d ** 2
