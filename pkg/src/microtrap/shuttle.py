"""Transport waveforms between trap zones, on-chip RC filtering and transport simulation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy import constants as C
from scipy import ndimage, optimize
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from .analysis import E_CHARGE, DriveConfig, IonSpecies, analyze_fields, find_minimum, trap_fields
from .dynamics import FieldModel, IonLostError, IonState, SimOptions, run_model
from .fields import BasisSet, sample, sample_many

log = logging.getLogger(__name__)

DEFAULT_BOUND = 10.0


class InfeasibleWaveformError(RuntimeError):
    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


class FilterError(ValueError):
    pass


@dataclass
class Waveform:
    """Per-electrode voltages on a uniform time grid, piecewise linear in between."""

    sample_period: float
    voltages: np.ndarray           # (n_samples, n_electrodes)
    electrode_ids: list
    labels: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voltages = np.atleast_2d(np.asarray(self.voltages, float))
        if self.voltages.shape[1] != len(self.electrode_ids):
            raise ValueError("one voltage column per electrode is required")
        if not self.sample_period > 0:
            raise ValueError("sample_period must be > 0")

    @property
    def n_samples(self):
        return self.voltages.shape[0]

    @property
    def duration(self):
        return (self.n_samples - 1) * self.sample_period

    @property
    def times(self):
        return np.arange(self.n_samples) * self.sample_period

    def at(self, t):
        """Voltages at time(s) ``t`` (held constant outside the waveform)."""
        t = np.atleast_1d(np.asarray(t, float))
        out = np.stack([np.interp(t, self.times, col) for col in self.voltages.T], axis=-1)
        return out

    def resample(self, sample_period: float) -> "Waveform":
        n = int(math.ceil(self.duration / sample_period - 1e-9)) + 1
        period = self.duration / (n - 1) if n > 1 else sample_period
        ts = np.arange(n) * period
        return replace(self, sample_period=period, voltages=self.at(ts), metadata=dict(self.metadata))

    def extended(self, hold: float) -> "Waveform":
        """Append ``hold`` seconds at the final voltages."""
        k = int(math.ceil(hold / self.sample_period))
        if k <= 0:
            return self
        v = np.vstack([self.voltages, np.repeat(self.voltages[-1:], k, axis=0)])
        return replace(self, voltages=v, metadata=dict(self.metadata))

    def reversed(self) -> "Waveform":
        """The same waveform played backwards, carrying the ion from zone B to zone A."""
        meta = dict(self.metadata)
        if "zone_a_m" in meta:
            meta["zone_a_m"], meta["zone_b_m"] = meta.get("zone_b_m", meta["zone_a_m"]), meta["zone_a_m"]
        return replace(self, voltages=self.voltages[::-1].copy(), metadata=meta)

    def write_csv(self, path, header=""):
        names = self.labels or [f"electrode_{i}" for i in self.electrode_ids]
        with open(path, "w", newline="") as fh:
            fh.write(header)
            for k, v in self.metadata.items():
                fh.write(f"# {k}: {v}\n")
            wr = csv.writer(fh)
            wr.writerow(["t_s"] + [f"V_{n}" for n in names])
            for t, row in zip(self.times, self.voltages):
                wr.writerow([f"{t:.9e}"] + [f"{v:.9f}" for v in row])


@dataclass(frozen=True)
class FilterModel:
    """First-order RC low-pass: source resistance ``R`` into shunt ``C``."""

    C: float = 1000e-12
    R: float = 10e3

    def __post_init__(self):
        if not (self.C > 0 and self.R > 0):
            raise ValueError("R and C must be > 0")

    @property
    def tau(self):
        return self.R * self.C


def min_jerk(s):
    """Minimum-jerk profile on [0, 1]: zero velocity and acceleration at both ends."""
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10 - 15 * s + 6 * s * s)


# --- waveform synthesis -------------------------------------------------------

@dataclass
class _LocalModel:
    """Fits of the RF pseudopotential and DC bases at one point."""

    gU: np.ndarray       # eV/m
    HU: np.ndarray       # eV/m^2
    g: np.ndarray        # (K, 3) V/m per V
    H: np.ndarray        # (K, 3, 3)


def _local(rf: "_RFPseudo", dc_fields, r):
    _, gU, HU = rf(r)
    _, g, H = sample_many(dc_fields, r)
    return _LocalModel(gU, HU, g, H)


class _RFPseudo:
    """Pseudopotential ``c |grad phi_RF|^2`` (eV) and its derivatives from a
    local fit of the RF potential.

    Fitting the smooth RF potential rather than the pseudopotential itself
    avoids the bias that the strong cubic terms of ``U`` near the RF null put
    on a quadratic fit of ``U``.
    """

    def __init__(self, bases: BasisSet, drive: DriveConfig):
        sp = drive.species
        self.rf = bases.rf_field()
        self.c = sp.charge ** 2 * drive.V0 ** 2 / (4 * sp.mass * drive.Omega ** 2) / E_CHARGE

    def __call__(self, r):
        s = sample(self.rf, r)
        g, H = s.gradient, s.hessian
        return self.c * g @ g, 2 * self.c * H @ g, 2 * self.c * H @ H


def _solve_sample(loc: _LocalModel, z, k_target, bound, reg, fscale, kscale, transverse_weight):
    """Bounded ridge least squares for one well position.

    Rows: force balance (3), axial curvature, and two soft rows holding the
    static transverse anisotropy (H_yz and (H_yy - H_zz)/2) near zero so the
    static quadrupole cannot overwhelm the RF confinement.
    """
    wt = transverse_weight
    A = np.vstack([z * loc.g.T / fscale,
                   z * loc.H[:, 0, 0][None, :] / kscale,
                   wt * z * loc.H[:, 1, 2][None, :] / kscale,
                   wt * z * 0.5 * (loc.H[:, 1, 1] - loc.H[:, 2, 2])[None, :] / kscale])
    b = np.concatenate([-loc.gU / fscale, [(k_target - loc.HU[0, 0]) / kscale, 0.0, 0.0]])
    K = A.shape[1]
    Aa = np.vstack([A, math.sqrt(reg) * np.eye(K)])
    ba = np.concatenate([b, np.zeros(K)])
    res = optimize.lsq_linear(Aa, ba, bounds=(-bound, bound), method="bvls", tol=1e-12)
    return res.x


def well_response(loc: _LocalModel, z, volts):
    """Newton displacement to the true minimum and the axial frequency factor
    ``d2U/dx2`` (eV/m^2) for voltages ``volts``."""
    grad = loc.gU + z * volts @ loc.g
    H = loc.HU + z * np.einsum("k,kij->ij", volts, loc.H)
    w, v = np.linalg.eigh(H)
    ax = int(np.argmax(np.abs(v[0])))
    return -np.linalg.solve(H, grad), w[ax], w


def solve_waveform(bases: BasisSet, drive: DriveConfig, zone_a_center, zone_b_center, duration: float,
                   target_omega_z: float, n_samples: int = 101, regularization: float = 1e-6,
                   transverse_weight: float = 0.1,
                   voltage_bound: float = DEFAULT_BOUND, electrodes=None,
                   position_tol: float = 2e-6, omega_tol: float = 0.05) -> Waveform:
    """DC waveform moving the well along a minimum-jerk path from A to B.

    At each sample the DC voltages solve a bounded, ridge-regularised least
    squares problem: zero total force (pseudopotential plus static) at the
    target position and axial curvature ``m omega_z^2``.  Equations are
    scaled so that one unit of residual is a force equivalent to 1 um of
    displacement or a 100% curvature error.

    Raises :class:`InfeasibleWaveformError` naming the worst sample when the
    achieved well position misses by more than ``position_tol`` or the axial
    frequency by more than ``omega_tol`` (relative).
    """
    if not duration > 0:
        raise ValueError("duration must be > 0")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if not target_omega_z > 0:
        raise ValueError("target_omega_z must be > 0")
    ids = list(bases.dc_ids if electrodes is None else electrodes)
    sp = drive.species
    z = sp.charge / E_CHARGE
    k_target = sp.mass * target_omega_z ** 2 / E_CHARGE
    fscale = k_target * 1e-6
    kscale = k_target
    a = np.asarray(zone_a_center, float)
    b = np.asarray(zone_b_center, float)
    ts = np.linspace(0.0, duration, n_samples)
    path = a + np.outer(min_jerk(ts / duration), b - a)
    Urf = _RFPseudo(bases, drive)
    dc_fields = [bases[e].field for e in ids]
    volts = np.empty((n_samples, len(ids)))
    worst = (0.0, 0, "")
    cache = {}
    for i, r in enumerate(path):
        key = tuple(np.round(r, 15))
        if key not in cache:
            loc = _local(Urf, dc_fields, r)
            v = _solve_sample(loc, z, k_target, voltage_bound, regularization, fscale, kscale,
                              transverse_weight)
            dr, k_ax, w = well_response(loc, z, v)
            if np.any(w <= 0):
                bad = (np.inf, i, "no confining well")
            else:
                dw = abs(math.sqrt(k_ax / k_target) - 1)
                bad = (max(np.linalg.norm(dr) / position_tol, dw / omega_tol), i,
                       f"position error {np.linalg.norm(dr):.3g} m, axial frequency error {dw:.3%}")
            cache[key] = (v, bad)
        v, bad = cache[key]
        volts[i] = v
        if bad[0] > worst[0]:
            worst = bad
    if worst[0] > 1:
        raise InfeasibleWaveformError(f"sample {worst[1]} (t = {ts[worst[1]]:.4g} s) infeasible: {worst[2]}",
                                      worst[1])
    labels = [bases.labels[e].name for e in ids]
    meta = {"path": "minimum-jerk", "zone_a_m": list(a), "zone_b_m": list(b),
            "target_omega_z_rad_s": target_omega_z, "regularization": regularization,
            "voltage_bound_V": voltage_bound}
    return Waveform(duration / (n_samples - 1), volts, ids, labels, meta)


# --- filter -------------------------------------------------------------------

def apply_filter(waveform: Waveform, filt: FilterModel, max_ratio: float = 0.1) -> Waveform:
    """First-order RC low-pass, exact for piecewise-linear input.

    With ``a = exp(-Ts/tau)`` the update is the convex combination
    ``y[n+1] = a y[n] + b0 x[n] + b1 x[n+1]``, so the DC gain is 1 and the
    output never leaves the input range.  The filter starts charged to the
    first sample.  Requires ``Ts <= max_ratio * tau``; use
    :meth:`Waveform.resample` for coarser waveforms.
    """
    Ts, tau = waveform.sample_period, filt.tau
    if Ts > max_ratio * tau:
        raise FilterError(f"sample period {Ts:.3g} s is not << RC = {tau:.3g} s; resample to "
                          f"<= {max_ratio * tau:.3g} s first")
    rho = Ts / tau
    a = math.exp(-rho)
    b1 = 1 - (1 - a) / rho
    b0 = (1 - a) - b1
    x = waveform.voltages
    y = np.empty_like(x)
    y[0] = x[0]
    for n in range(len(x) - 1):
        y[n + 1] = a * y[n] + b0 * x[n] + b1 * x[n + 1]
    meta = dict(waveform.metadata)
    meta["filter_RC_s"] = tau
    return replace(waveform, voltages=y, metadata=meta)


# --- transport simulation -----------------------------------------------------

@njit(cache=True, nogil=True)
def _run_axial(x, v, t0, n_steps, dt, inv_m, xg0, ihx, dforce, frf, sched, s_t0, s_idt,
               gamma, stride, out_t, out_x, out_v):
    """1D velocity Verlet.  Force = -(sum_k V_k(t) dforce[k] + frf) at x (N)."""
    K = dforce.shape[0]
    G = frf.shape[0]
    S = sched.shape[0]
    V = np.empty(K)
    damp = math.exp(-0.5 * gamma * dt)
    t = t0
    n_out = 0
    for step in range(n_steps + 1):
        # voltages at t
        u = (t - s_t0) * s_idt
        if u <= 0.0:
            for k in range(K):
                V[k] = sched[0, k]
        elif u >= S - 1:
            for k in range(K):
                V[k] = sched[S - 1, k]
        else:
            i = int(u)
            w = u - i
            for k in range(K):
                V[k] = (1.0 - w) * sched[i, k] + w * sched[i + 1, k]
        g = (x - xg0) * ihx
        j = int(math.floor(g))
        if j < 0 or j > G - 2:
            return -n_out, t, x, v
        w = g - j
        f = (1.0 - w) * frf[j] + w * frf[j + 1]
        for k in range(K):
            f += V[k] * ((1.0 - w) * dforce[k, j] + w * dforce[k, j + 1])
        a_new = -f * inv_m
        if step > 0:
            v = (v + 0.5 * dt * a_new) * damp
        if step % stride == 0:
            out_t[n_out] = t
            out_x[n_out] = x
            out_v[n_out] = v
            n_out += 1
        if step == n_steps:
            break
        v = v * damp + 0.5 * dt * a_new
        x += dt * v
        t = t0 + (step + 1) * dt
    return n_out, t, x, v


@dataclass
class AxialModel:
    """Potential energy along the transport line as splines per electrode."""

    x: np.ndarray                 # fine grid (m)
    line_yz: np.ndarray
    electrode_ids: list
    dphi: np.ndarray              # (K, G) d phi_k / dx  (V/m per V)
    urf: CubicHermiteSpline       # pseudopotential (eV)
    phi: list                     # CubicSpline per electrode (V per V)
    species: IonSpecies

    def force_tables(self):
        q = self.species.charge
        return q * self.dphi, E_CHARGE * self.urf(self.x, 1)

    def potential(self, volts, x):
        """Potential energy (J) along the line for static voltages."""
        z = self.species.charge
        u = E_CHARGE * self.urf(x)
        for vk, sk in zip(volts, self.phi):
            u = u + z * vk * sk(x)
        return u

    def equilibrium(self, volts, x_guess):
        """Root of the tabulated force nearest ``x_guess`` and the curvature (J/m^2)."""
        dF, frf = self.force_tables()
        f = frf + np.asarray(volts) @ dF
        k = np.gradient(f, self.x)
        xg = float(x_guess)
        for _ in range(50):
            fi = np.interp(xg, self.x, f)
            ki = np.interp(xg, self.x, k)
            if ki <= 0:
                raise IonLostError(0.0, [xg, *self.line_yz])
            step = -fi / ki
            xg += step
            if abs(step) < 1e-16:
                break
        return xg, float(np.interp(xg, self.x, k))


def axial_model(bases: BasisSet, drive: DriveConfig, waveform: Waveform, line_yz=None,
                margin: float = 30e-6, hx: float = 0.05e-6) -> AxialModel:
    """Tabulate the electrode potentials along the transport line."""
    meta = waveform.metadata
    a = np.asarray(meta.get("zone_a_m", [0, 0, 0]), float)
    b = np.asarray(meta.get("zone_b_m", a), float)
    yz = np.asarray(line_yz if line_yz is not None else 0.5 * (a[1:] + b[1:]), float)
    mask = bases.mask
    lo, hi = min(a[0], b[0]) - margin, max(a[0], b[0]) + margin
    xs = mask.origin[0] + mask.spacing * np.arange(mask.shape[0])
    xs = xs[(xs >= lo - 2 * mask.spacing) & (xs <= hi + 2 * mask.spacing)]
    Urf = _RFPseudo(bases, drive)
    ids = waveform.electrode_ids
    fields = [bases[e].field for e in ids]
    vals = np.array([sample_many(fields, (x, *yz))[0] for x in xs])      # (n, K)
    urf = [Urf((x, *yz)) for x in xs]
    phi = [CubicSpline(xs, vals[:, k]) for k in range(len(ids))]
    us = CubicHermiteSpline(xs, [u[0] for u in urf], [u[1][0] for u in urf])
    xf = np.arange(lo, hi + hx / 2, hx)
    dphi = np.array([s(xf, 1) for s in phi])
    return AxialModel(xf, yz, list(ids), dphi, us, phi, drive.species)


@dataclass(frozen=True)
class TransportResult:
    quanta: float                 # motional quanta gained at the final axial frequency
    energy_gain: float            # J
    position_error: float         # m, mean position after the waveform minus zone B
    final_omega: float            # rad/s
    terminal_position: float      # m, at the end of the waveform
    max_lag: float                # m, largest distance behind the well path
    t: np.ndarray = field(repr=False, default=None)
    x: np.ndarray = field(repr=False, default=None)


def _oscillation_energy(t, x, omega, m):
    A = np.column_stack([np.cos(omega * t), np.sin(omega * t), np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(A, x - x.mean(), rcond=None)
    amp2 = coef[0] ** 2 + coef[1] ** 2
    return 0.5 * m * omega ** 2 * amp2


def simulate_transport(bases: BasisSet, drive: DriveConfig, waveform: Waveform, species: IonSpecies = None,
                       rng_seed=None, model: str = "axial", target_b=None, hold: float = None,
                       steps_per_period: int = 100, gamma: float = 0.0, roi_margin: float = 30e-6,
                       axial: AxialModel = None) -> TransportResult:
    """Integrate an ion carried by ``waveform`` (voltages linear between samples).

    ``model="axial"`` integrates the motion along the transport line in the
    pseudopotential plus static potential (transverse motion is stiff and
    not excited by a path on the trap axis); ``model="full"`` integrates the
    full 3D equation of motion including micromotion.  The gain is the
    energy of the residual oscillation fitted over ``hold`` seconds after
    the waveform ends, in quanta of the final axial frequency.
    """
    if species is not None and species != drive.species:
        drive = replace(drive, species=species)
    sp = drive.species
    if model == "axial":
        am = axial or axial_model(bases, drive, waveform)
        a_meta = waveform.metadata.get("zone_a_m")
        xa_guess = a_meta[0] if a_meta is not None else am.x[len(am.x) // 2]
        x0, k0 = am.equilibrium(waveform.voltages[0], xa_guess)
        b_meta = waveform.metadata.get("zone_b_m")
        xb_guess = b_meta[0] if b_meta is not None else x0
        xb, kb = am.equilibrium(waveform.voltages[-1], xb_guess)
        if target_b is not None:
            xb_target = float(np.asarray(target_b)[0])
        else:
            xb_target = b_meta[0] if b_meta is not None else xb
        omega_b = math.sqrt(kb / sp.mass)
        omega_a = math.sqrt(k0 / sp.mass)
        dt = 2 * math.pi / max(omega_a, omega_b) / steps_per_period
        hold = 40 * 2 * math.pi / omega_b if hold is None else hold
        dF, frf = am.force_tables()
        T = waveform.duration
        n1 = max(1, int(round(T / dt)))
        dt1 = T / n1 if T > 0 else dt
        stride1 = max(1, n1 // 2000)
        out_t = np.empty(n1 // stride1 + 2)
        out_x = np.empty_like(out_t)
        out_v = np.empty_like(out_t)
        sched = np.ascontiguousarray(waveform.voltages)
        s_idt = 1.0 / waveform.sample_period
        if T > 0:
            n, t, x, v = _run_axial(x0, 0.0, 0.0, n1, dt1, 1 / sp.mass, am.x[0], 1 / (am.x[1] - am.x[0]),
                                    dF, frf, sched, 0.0, s_idt, gamma, stride1, out_t, out_x, out_v)
            if n <= 0:
                raise IonLostError(t, [x, *am.line_yz])
        else:
            n, t, x, v = 1, 0.0, x0, 0.0
            out_t[0], out_x[0], out_v[0] = 0.0, x0, 0.0
        x_T = x
        n2 = int(round(hold / dt))
        h_t = np.empty(n2 + 1)
        h_x = np.empty(n2 + 1)
        h_v = np.empty(n2 + 1)
        final = np.ascontiguousarray(waveform.voltages[-1:])
        m2, t2, x2, v2 = _run_axial(x, v, t, n2, dt, 1 / sp.mass, am.x[0], 1 / (am.x[1] - am.x[0]),
                                    dF, frf, final, 0.0, 1.0, gamma, 1, h_t, h_x, h_v)
        if m2 <= 0:
            raise IonLostError(t2, [x2, *am.line_yz])
        E = _oscillation_energy(h_t, h_x, omega_b, sp.mass)
        quanta = E / (C.hbar * omega_b)
        tt = np.concatenate([out_t[:n], h_t[1:]])
        xx = np.concatenate([out_x[:n], h_x[1:]])
        lag = 0.0
        if a_meta is not None and b_meta is not None and T > 0:
            well = a_meta[0] + (b_meta[0] - a_meta[0]) * min_jerk(out_t[:n] / T)
            lag = float(np.max(np.abs(out_x[:n] - well)))
        return TransportResult(float(quanta), float(E), abs(float(h_x.mean()) - xb_target), omega_b,
                               x_T, lag, tt, xx)
    if model == "full":
        return _simulate_full(bases, drive, waveform, rng_seed, target_b, hold, gamma, roi_margin)
    raise ValueError(f"unknown transport model {model!r}")


def _simulate_full(bases, drive, waveform, rng_seed, target_b, hold, gamma, roi_margin):
    sp = drive.species
    a = np.asarray(waveform.metadata["zone_a_m"], float)
    b = np.asarray(waveform.metadata["zone_b_m"], float)
    lo = np.minimum(a, b) - roi_margin
    hi = np.maximum(a, b) + roi_margin
    d0 = drive.with_dc(dict(zip(waveform.electrode_ids, waveform.voltages[0])))
    fm = FieldModel.from_bases(bases, d0, (lo, hi), separate_dc=True)
    pos = {eid: i for i, eid in enumerate(fm.dc_ids)}
    n_terms = len(fm.terms)
    sched = np.zeros((waveform.n_samples, n_terms))
    for j, eid in enumerate(waveform.electrode_ids):
        sched[:, pos[eid]] = waveform.voltages[:, j]
    fm.const[:-1] = 0.0
    fm.set_schedule((waveform.times, sched))
    U0 = trap_fields(bases, d0).U
    r0 = find_minimum(U0, a)
    dB = drive.with_dc(dict(zip(waveform.electrode_ids, waveform.voltages[-1])))
    tfB = trap_fields(bases, dB)
    rB = find_minimum(tfB.U, b)
    saB = analyze_fields(tfB, rB)
    omega_b = float(saB.omega_mathieu[0])
    hold = 40 * 2 * math.pi / omega_b if hold is None else hold
    opt = SimOptions(duration=waveform.duration, gamma=gamma, rng_seed=rng_seed)
    tr1 = run_model(fm, IonState(r0), opt, energy=False)
    x_T = tr1.position[-1]
    opt2 = SimOptions(duration=hold, gamma=gamma, rng_seed=rng_seed, stride=1)
    tr2 = run_model(fm, IonState(tr1.position[-1], tr1.velocity[-1], tr1.t[-1]), opt2, energy=False)
    # secular axial oscillation: project on the axial axis, average out micromotion
    win = int(round(2 * np.pi / drive.Omega / tr2.dt))
    xa = ndimage.uniform_filter1d(tr2.position @ saB.axes[0], win, mode="nearest")
    E = _oscillation_energy(tr2.t, xa, omega_b, sp.mass)
    tgt = rB if target_b is None else np.asarray(target_b, float)
    mean_pos = ndimage.uniform_filter1d(tr2.position, win, axis=0, mode="nearest").mean(axis=0)
    return TransportResult(float(E / (C.hbar * omega_b)), float(E), float(np.linalg.norm(mean_pos - tgt)),
                           omega_b, float(x_T[0]), float("nan"), tr2.t, tr2.position[:, 0])
