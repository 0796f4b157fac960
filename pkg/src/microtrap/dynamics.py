"""Single-ion trajectories in the full time-dependent trap field.

The equation of motion

    m r'' = -q grad( sum_j c_j(t) phi_j(r) ) - m gamma r' + F_noise(t)

is integrated with velocity Verlet.  Each potential ``phi_j`` lives on a
(cropped) voxel grid; its gradient is precomputed by central differences and
interpolated trilinearly.  Coefficients are

    c_j(t) = const_j + amp_j cos(freq_j t + phase_j) + schedule_j(t)

which covers static DC sets, the RF drive, a tickle and piecewise-linear
transport waveforms with one kernel.  Damping is applied as an exact
exponential half step on both sides of the kick-drift-kick update, and the
noise force as a Gaussian velocity impulse per step.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy import ndimage, optimize, signal

from .analysis import (E_CHARGE, DriveConfig, SecularAnalysis, TrapFields, _pseudo, analyze_fields,
                       find_minimum, trap_fields)
from .fields import BasisSet, GridField, sample
from .geometry import VACUUM

log = logging.getLogger(__name__)

STEPS_PER_PERIOD = 200


class IonLostError(RuntimeError):
    def __init__(self, time, position, trajectory=None):
        super().__init__(f"ion lost at t = {time:.6g} s, r = {np.asarray(position)} m")
        self.time = time
        self.position = np.asarray(position)
        self.trajectory = trajectory


class TickleScanError(RuntimeError):
    def __init__(self, message, spectrum=None):
        super().__init__(message)
        self.spectrum = spectrum


class CompensationError(RuntimeError):
    pass


@dataclass(frozen=True)
class IonState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0


@dataclass(frozen=True)
class Tickle:
    """Sinusoidal voltage ``amplitude cos(frequency t)`` on one DC electrode
    (an electrode id, or directly a unit potential :class:`GridField`)."""

    electrode: object
    amplitude: float
    frequency: float
    phase: float = 0.0


@dataclass(frozen=True)
class SimOptions:
    duration: float
    dt: float | None = None              # default: RF period / 200
    gamma: float = 2 * np.pi * 1e3       # viscous damping, 1/s
    noise_force_psd: float = 0.0         # single-sided, N^2/Hz per axis
    tickle: Tickle | None = None
    rng_seed: int | None = None
    stride: int = 10

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.gamma < 0 or self.noise_force_psd < 0:
            raise ValueError("gamma and noise_force_psd must be >= 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def time_step(self, Omega):
        T = 2 * np.pi / Omega
        if self.dt is None:
            return T / STEPS_PER_PERIOD
        if self.dt > T / 100 * (1 + 1e-12):
            raise ValueError(f"dt = {self.dt:g} s exceeds RF period / 100 = {T / 100:g} s")
        return self.dt


@dataclass(frozen=True)
class EnergyReference:
    """Equilibrium, principal axes (rows) and frequencies used for the secular energy."""

    r0: np.ndarray
    axes: np.ndarray
    omega: np.ndarray
    mass: float

    @classmethod
    def from_analysis(cls, sa: SecularAnalysis, mass, mathieu=True):
        om = sa.omega_mathieu if mathieu else sa.omega
        om = np.where(np.isfinite(om), om, sa.omega)
        return cls(np.asarray(sa.r0), np.asarray(sa.axes), np.asarray(om), mass)

    def energy(self, r, v):
        dr = (np.asarray(r) - self.r0) @ self.axes.T
        dv = np.asarray(v) @ self.axes.T
        return 0.5 * self.mass * np.sum(dv ** 2 + (self.omega * dr) ** 2, axis=-1)

    def mode_energy(self, r, v, i):
        dr = (np.asarray(r) - self.r0) @ self.axes[i]
        dv = np.asarray(v) @ self.axes[i]
        return 0.5 * self.mass * (dv ** 2 + (self.omega[i] * dr) ** 2)


@dataclass
class Trajectory:
    t: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    energy: np.ndarray                  # secular energy, J
    reference: EnergyReference | None = None
    dt: float = 0.0

    def __len__(self):
        return len(self.t)

    def states(self):
        return [IonState(r, v, t) for t, r, v in zip(self.t, self.position, self.velocity)]

    def write_csv(self, path, header=""):
        with open(path, "w", newline="") as fh:
            fh.write(header)
            wr = csv.writer(fh)
            wr.writerow(["t_s", "x_m", "y_m", "z_m", "vx_m_s", "vy_m_s", "vz_m_s", "energy_J"])
            for t, r, v, e in zip(self.t, self.position, self.velocity, self.energy):
                wr.writerow([f"{t:.12e}"] + [f"{c:.12e}" for c in (*r, *v, e)])


# --- kernel -------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _coeffs(t, const, amp, freq, phase, sched, s_t0, s_idt, out):
    J = const.shape[0]
    for j in range(J):
        out[j] = const[j] + amp[j] * math.cos(freq[j] * t + phase[j])
    S = sched.shape[0]
    if S > 0:
        u = (t - s_t0) * s_idt
        if u <= 0.0:
            for j in range(J):
                out[j] += sched[0, j]
        elif u >= S - 1:
            for j in range(J):
                out[j] += sched[S - 1, j]
        else:
            k = int(u)
            w = u - k
            for j in range(J):
                out[j] += (1.0 - w) * sched[k, j] + w * sched[k + 1, j]


@njit(cache=True, nogil=True)
def _accel(r, t, qm, origin, ih, grads, vacuum, const, amp, freq, phase, sched, s_t0, s_idt,
           cbuf, a):
    """Acceleration at (r, t).  Returns False when r is outside the vacuum."""
    nx, ny, nz = vacuum.shape
    fx = (r[0] - origin[0]) * ih
    fy = (r[1] - origin[1]) * ih
    fz = (r[2] - origin[2]) * ih
    i = int(math.floor(fx))
    j = int(math.floor(fy))
    k = int(math.floor(fz))
    if i < 0 or j < 0 or k < 0 or i > nx - 2 or j > ny - 2 or k > nz - 2:
        return False
    if not vacuum[int(fx + 0.5), int(fy + 0.5), int(fz + 0.5)]:
        return False
    wx = fx - i
    wy = fy - j
    wz = fz - k
    _coeffs(t, const, amp, freq, phase, sched, s_t0, s_idt, cbuf)
    a[0] = 0.0
    a[1] = 0.0
    a[2] = 0.0
    for c in range(8):
        di = c & 1
        dj = (c >> 1) & 1
        dk = (c >> 2) & 1
        w = ((wx if di else 1.0 - wx) * (wy if dj else 1.0 - wy) * (wz if dk else 1.0 - wz))
        if w == 0.0:
            continue
        ii = i + di
        jj = j + dj
        kk = k + dk
        for f in range(grads.shape[0]):
            cw = cbuf[f] * w
            if cw == 0.0:
                continue
            a[0] += cw * grads[f, 0, ii, jj, kk]
            a[1] += cw * grads[f, 1, ii, jj, kk]
            a[2] += cw * grads[f, 2, ii, jj, kk]
    a[0] *= -qm
    a[1] *= -qm
    a[2] *= -qm
    return True


@njit(cache=True, nogil=True)
def _run(r, v, t0, n_steps, dt, qm, gamma, sigma_v, seed, origin, ih, grads, vacuum,
         const, amp, freq, phase, sched, s_t0, s_idt, stride, out_t, out_r, out_v):
    if seed >= 0:
        np.random.seed(seed)
    cbuf = np.empty(const.shape[0])
    a = np.empty(3)
    damp = math.exp(-0.5 * gamma * dt)
    t = t0
    if not _accel(r, t, qm, origin, ih, grads, vacuum, const, amp, freq, phase, sched, s_t0, s_idt,
                  cbuf, a):
        return 0, t
    out_t[0] = t
    for d in range(3):
        out_r[0, d] = r[d]
        out_v[0, d] = v[d]
    n_out = 1
    for step in range(1, n_steps + 1):
        for d in range(3):
            v[d] = v[d] * damp + 0.5 * dt * a[d]
            if sigma_v > 0.0:
                v[d] += sigma_v * np.random.standard_normal()
            r[d] += dt * v[d]
        t = t0 + step * dt
        if not _accel(r, t, qm, origin, ih, grads, vacuum, const, amp, freq, phase, sched, s_t0,
                      s_idt, cbuf, a):
            return -n_out, t
        for d in range(3):
            v[d] = (v[d] + 0.5 * dt * a[d]) * damp
        if step % stride == 0:
            out_t[n_out] = t
            for d in range(3):
                out_r[n_out, d] = r[d]
                out_v[n_out, d] = v[d]
            n_out += 1
    return n_out, t


# --- field model --------------------------------------------------------------

def _crop(f: GridField, lo, hi) -> GridField:
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    return GridField(np.array(f.values[sl]), f.origin + f.spacing * np.asarray(lo), f.spacing, None)


@dataclass(frozen=True)
class Term:
    """One potential and its coefficient ``const + amp cos(freq t + phase)``."""

    potential: GridField
    const: float = 0.0
    amp: float = 0.0
    freq: float = 0.0
    phase: float = 0.0


class FieldModel:
    """Potentials, their gradients and time-dependent coefficients on one grid.

    Parameters
    ----------
    terms : list of Term
        All potentials share origin, spacing and shape.
    vacuum : bool array, optional
        Voxels the ion may occupy (default: everywhere).
    drive : DriveConfig
        Supplies the species and the RF frequency used for time steps.
    schedule : (times, values)
        Optional piecewise-linear voltages added to the coefficients; ``times``
        uniformly spaced, ``values`` of shape ``(len(times), len(terms))``.
    rf_index, dc_indices
        Which terms form the unit RF potential and the static potential, for
        the secular energy reference.
    """

    def __init__(self, terms, drive: DriveConfig, vacuum=None, schedule=None, rf_index=None):
        if not terms:
            raise ValueError("at least one term is required")
        self.terms = list(terms)
        self.drive = drive
        f0 = self.terms[0].potential
        for tm in self.terms:
            if tm.potential.shape != f0.shape or tm.potential.spacing != f0.spacing:
                raise ValueError("all potentials must share one grid")
        self.origin = f0.origin.copy()
        self.spacing = f0.spacing
        self.shape = f0.shape
        self.vacuum = (np.ones(self.shape, bool) if vacuum is None else np.ascontiguousarray(vacuum, bool))
        self.grads = np.ascontiguousarray(
            np.stack([np.stack(np.gradient(tm.potential.values, self.spacing)) for tm in self.terms]))
        self.const = np.array([tm.const for tm in self.terms], float)
        self.amp = np.array([tm.amp for tm in self.terms], float)
        self.freq = np.array([tm.freq for tm in self.terms], float)
        self.phase = np.array([tm.phase for tm in self.terms], float)
        self.rf_index = rf_index
        self.set_schedule(schedule)

    def set_schedule(self, schedule):
        if schedule is None:
            self.sched = np.zeros((0, len(self.terms)))
            self.s_t0, self.s_idt = 0.0, 0.0
            return
        times, values = schedule
        times = np.asarray(times, float)
        values = np.ascontiguousarray(values, float)
        if values.shape != (len(times), len(self.terms)):
            raise ValueError("schedule values must have shape (n_times, n_terms)")
        if len(times) < 2:
            raise ValueError("schedule needs at least two samples")
        step = np.diff(times)
        if not np.allclose(step, step[0], rtol=1e-9):
            raise ValueError("schedule times must be uniformly spaced")
        self.sched = values
        self.s_t0, self.s_idt = float(times[0]), 1.0 / float(step[0])

    def with_terms(self, extra, schedule=None):
        return FieldModel(self.terms + list(extra), self.drive, self.vacuum, schedule, self.rf_index)

    @property
    def static_potential(self) -> GridField:
        f0 = self.terms[0].potential
        vals = sum(tm.const * tm.potential.values for tm in self.terms if tm.const != 0.0)
        return GridField(np.zeros(self.shape) + vals, f0.origin, f0.spacing, None)

    def trap_fields(self) -> TrapFields:
        f0 = self.terms[0].potential
        if self.rf_index is None:
            rf = GridField(np.zeros(self.shape), f0.origin, f0.spacing, None)
            drive = replace(self.drive, V0=0.0)
        else:
            rf = self.terms[self.rf_index].potential
            drive = self.drive
        U = _pseudo(rf, self.static_potential, drive)
        U.values[~self.vacuum] = np.inf
        return TrapFields(rf, self.static_potential, U, drive)

    def analysis(self, seed) -> SecularAnalysis:
        return analyze_fields(self.trap_fields(), seed)

    def reference(self, seed) -> EnergyReference:
        return EnergyReference.from_analysis(self.analysis(seed), self.drive.species.mass)

    # --- constructors ---

    @classmethod
    def from_potentials(cls, dc: GridField, rf: GridField | None, drive: DriveConfig, vacuum=None):
        """Static potential ``dc`` (V) and unit RF potential ``rf`` driven at ``V0 cos(Omega t)``."""
        terms = [Term(dc, const=1.0)]
        rf_index = None
        if rf is not None:
            terms.append(Term(rf, amp=drive.V0, freq=drive.Omega))
            rf_index = 1
        if vacuum is None and dc.mask is not None:
            vacuum = dc.mask.labels == VACUUM
        return cls(terms, drive, vacuum, rf_index=rf_index)

    @classmethod
    def from_bases(cls, bases: BasisSet, drive: DriveConfig, roi=None, stray_field=None,
                   separate_dc=False):
        """Model of a solved trap restricted to ``roi = (lo, hi)`` corners in metres
        (``None``: the whole domain).  With ``separate_dc`` every DC electrode is its
        own term (for scheduled waveforms); otherwise the static set is summed."""
        mask = bases.mask
        if roi is None:
            lo, hi = np.zeros(3, int), np.array(mask.shape)
        else:
            lo = np.floor((np.asarray(roi[0], float) - mask.origin) / mask.spacing).astype(int) - 1
            hi = np.ceil((np.asarray(roi[1], float) - mask.origin) / mask.spacing).astype(int) + 2
            lo = np.maximum(lo, 0)
            hi = np.minimum(hi, mask.shape)
        tf = trap_fields(bases, drive, stray_field)
        vac = (mask.labels == VACUUM)[tuple(slice(a, b) for a, b in zip(lo, hi))]
        rf = _crop(tf.rf, lo, hi)
        if separate_dc:
            terms = []
            for eid in bases.dc_ids:
                v = drive.dc_voltages.get(eid, 0.0)
                terms.append(Term(_crop(bases[eid].field, lo, hi), const=v))
            if stray_field is not None:
                x, y, z = rf.positions()
                E = np.asarray(stray_field, float)
                terms.append(Term(GridField(-(E[0] * x + E[1] * y + E[2] * z), rf.origin, rf.spacing),
                                  const=1.0))
            terms.append(Term(rf, amp=drive.V0, freq=drive.Omega))
            model = cls(terms, drive, vac, rf_index=len(terms) - 1)
            model.dc_ids = list(bases.dc_ids)
            return model
        return cls([Term(_crop(tf.dc, lo, hi), const=1.0), Term(rf, amp=drive.V0, freq=drive.Omega)],
                   drive, vac, rf_index=1)


def _default_roi(bases, r, half=40e-6):
    r = np.asarray(r, float)
    return r - half, r + half


def _tickle_term(bases, model: FieldModel, tickle: Tickle) -> Term:
    if isinstance(tickle.electrode, GridField):
        pot = tickle.electrode
    else:
        if bases is None:
            raise ValueError("an electrode-id tickle needs a BasisSet")
        eid = int(tickle.electrode)
        if eid not in bases.dc_ids:
            raise ValueError(f"tickle electrode {eid} is not a DC electrode")
        lo = np.round((model.origin - bases.mask.origin) / bases.mask.spacing).astype(int)
        pot = _crop(bases[eid].field, lo, lo + np.array(model.shape))
    if pot.shape != model.shape:
        raise ValueError("tickle potential does not match the model grid")
    return Term(pot, amp=tickle.amplitude, freq=tickle.frequency, phase=tickle.phase)


def _as_model(bases, drive, state0, roi, stray_field):
    if isinstance(bases, FieldModel):
        return bases, None
    if not isinstance(bases, BasisSet):
        raise TypeError("expected a BasisSet or FieldModel")
    if roi is None:
        roi = _default_roi(bases, state0.position)
    elif isinstance(roi, str) and roi == "full":
        roi = None
    return FieldModel.from_bases(bases, drive, roi, stray_field), bases


def _secular_energy(traj_r, traj_v, ref: EnergyReference | None, window: int):
    if ref is None:
        return np.full(len(traj_r), np.nan)
    if window > 1:
        traj_r = ndimage.uniform_filter1d(traj_r, window, axis=0, mode="nearest")
        traj_v = ndimage.uniform_filter1d(traj_v, window, axis=0, mode="nearest")
    return ref.energy(traj_r, traj_v)


def run_model(model: FieldModel, state0: IonState, options: SimOptions, reference=None,
              energy=True) -> Trajectory:
    """Integrate a prepared :class:`FieldModel` (tickle terms already included)."""
    drive = model.drive
    dt = options.time_step(drive.Omega)
    n_steps = int(round(options.duration / dt))
    if n_steps < 1:
        raise ValueError("duration shorter than one time step")
    n_out = n_steps // options.stride + 1
    out_t = np.empty(n_out)
    out_r = np.empty((n_out, 3))
    out_v = np.empty((n_out, 3))
    m = drive.species.mass
    qm = drive.species.charge / m
    # one-sided PSD S -> two-sided S/2 -> impulse variance (S/2) dt per step
    sigma_v = math.sqrt(options.noise_force_psd * dt / 2) / m
    seed = -1 if options.rng_seed is None else int(options.rng_seed) % (2 ** 32)
    if options.rng_seed is None and sigma_v > 0:
        seed = int(np.random.SeedSequence().generate_state(1)[0])
    r = np.array(state0.position, float)
    v = np.array(state0.velocity, float)
    n, t_end = _run(r, v, float(state0.time), n_steps, dt, qm, options.gamma, sigma_v, seed,
                    model.origin, 1.0 / model.spacing, model.grads, model.vacuum, model.const,
                    model.amp, model.freq, model.phase, model.sched, model.s_t0, model.s_idt,
                    options.stride, out_t, out_r, out_v)
    lost = n <= 0
    n = abs(n)
    if energy and reference is None:
        try:
            reference = model.reference(state0.position)
        except Exception as exc:  # energy reference is optional
            log.debug("no energy reference: %s", exc)
            reference = None
    window = max(1, int(round(2 * np.pi / drive.Omega / (dt * options.stride))))
    traj = Trajectory(out_t[:n], out_r[:n], out_v[:n],
                      _secular_energy(out_r[:n], out_v[:n], reference, window), reference, dt)
    if lost:
        raise IonLostError(t_end, r, traj)
    return traj


def integrate(bases, drive: DriveConfig, state0: IonState, options: SimOptions,
              reference: EnergyReference | None = None, roi=None, stray_field=None) -> Trajectory:
    """Integrate the ion from ``state0``.

    ``bases`` is a :class:`BasisSet` (fields cropped to ``roi``; default a
    box of +-40 um around the start, ``"full"`` for the whole domain) or a
    prepared :class:`FieldModel`.  Raises :class:`IonLostError` if the ion
    enters an electrode or leaves the grid.
    """
    model, bs = _as_model(bases, drive, state0, roi, stray_field)
    if reference is None and bs is not None:
        try:
            reference = EnergyReference.from_analysis(model.analysis(state0.position), drive.species.mass)
        except Exception as exc:
            log.debug("no energy reference: %s", exc)
    if options.tickle is not None:
        model = model.with_terms([_tickle_term(bs, model, options.tickle)])
    return run_model(model, state0, options, reference)


# --- tickle spectroscopy ------------------------------------------------------

@dataclass
class TickleSpectrum:
    freqs: np.ndarray            # Hz
    response: np.ndarray         # RMS displacement, m
    peaks: np.ndarray            # Hz
    peak_response: np.ndarray

    def write_csv(self, path, header=""):
        with open(path, "w", newline="") as fh:
            fh.write(header)
            wr = csv.writer(fh)
            wr.writerow(["freq_Hz", "response_m"])
            for f, r in zip(self.freqs, self.response):
                wr.writerow([f"{f:.9e}", f"{r:.9e}"])


def default_tickle_electrode(bases: BasisSet, sa: SecularAnalysis) -> int:
    """DC electrode whose field at the trap centre projects best onto all
    three principal axes (largest minimum direction cosine)."""
    best, score = None, -1.0
    for eid in bases.dc_ids:
        g = sample(bases[eid].field, sa.r0).gradient
        n = np.linalg.norm(g)
        if n == 0:
            continue
        s = float(np.min(np.abs(sa.axes @ g)) / n)
        if s > score:
            best, score = eid, s
    return best


def _rms_response(model, state0, options, f_hz, settle):
    """RMS of the displacement component at the tickle frequency.

    Lock-in detection keeps the micromotion of an imperfectly compensated
    ion (at Omega and its sidebands) out of the response.
    """
    opt = replace(options, duration=settle + options.duration)
    m = FieldModel.__new__(FieldModel)
    m.__dict__.update(model.__dict__)
    m.freq = model.freq.copy()
    w = 2 * np.pi * f_hz
    m.freq[-1] = w
    try:
        traj = run_model(m, state0, opt, energy=False)
    except IonLostError:
        return np.inf
    keep = traj.t >= state0.time + settle
    t = traj.t[keep]
    r = traj.position[keep]
    A = np.column_stack([np.cos(w * t), np.sin(w * t), np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(A, r, rcond=None)
    return float(np.sqrt(0.5 * np.sum(coef[:2] ** 2)))


def tickle_response(bases, drive, freqs_hz, options: SimOptions, state0=None, roi=None,
                    settle=None, threads=1, stray_field=None):
    """Steady-state RMS displacement for each tickle frequency (Hz).

    ``options.duration`` is the measurement window; the ion first settles
    for ``settle`` (default ``8 / gamma``).
    """
    if options.tickle is None:
        raise ValueError("options.tickle must name the electrode and amplitude")
    if not options.gamma > 0:
        raise ValueError("tickle spectroscopy needs damping gamma > 0")
    model, bs, state0 = _tickle_model(bases, drive, options, state0, roi, stray_field)
    settle = 8.0 / options.gamma if settle is None else settle
    freqs_hz = np.asarray(freqs_hz, float)

    def one(f):
        return _rms_response(model, state0, options, f, settle)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.array(list(pool.map(one, freqs_hz)))
    return np.array([one(f) for f in freqs_hz])


def _tickle_model(bases, drive, options, state0, roi, stray_field):
    if state0 is None:
        if isinstance(bases, FieldModel):
            r0 = find_minimum(bases.trap_fields().U)
        else:
            r0 = find_minimum(trap_fields(bases, drive, stray_field).U)
        state0 = IonState(r0)
    model, bs = _as_model(bases, drive, state0, roi, stray_field)
    model = model.with_terms([_tickle_term(bs, model, options.tickle)])
    return model, bs, state0


def tickle_scan(bases, drive, freq_range, n_points, options: SimOptions, state0=None, roi=None,
                floor=2.0, settle=None, threads=1, refine=True) -> TickleSpectrum:
    """Tickle spectrum on ``n_points`` log-spaced frequencies in ``freq_range`` (Hz).

    Local maxima that stand ``floor`` times above the surrounding minima are
    refined by a bounded scalar search between the neighbouring grid points.  Raises
    :class:`TickleScanError` (carrying the spectrum) when no peak is found.
    """
    lo, hi = freq_range
    if not 0 < lo < hi:
        raise ValueError("freq_range must satisfy 0 < lo < hi")
    if n_points < 3:
        raise ValueError("n_points must be >= 3")
    if options.tickle is None:
        raise ValueError("options.tickle must name the electrode and amplitude")
    if not options.gamma > 0:
        raise ValueError("tickle spectroscopy needs damping gamma > 0")
    model, bs, state0 = _tickle_model(bases, drive, options, state0, roi, None)
    settle = 8.0 / options.gamma if settle is None else settle
    freqs = np.geomspace(lo, hi, n_points)

    def resp(f):
        return _rms_response(model, state0, options, f, settle)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            response = np.array(list(pool.map(resp, freqs)))
    else:
        response = np.array([resp(f) for f in freqs])
    # prominence in log response: the peak must exceed ``floor`` times the
    # higher of the two surrounding minima
    idx, _ = signal.find_peaks(np.log(np.maximum(response, 1e-300)), prominence=np.log(floor))
    peaks, vals = [], []
    for i in idx:
        f_pk, v_pk = freqs[i], response[i]
        if refine:
            res = optimize.minimize_scalar(lambda f: -resp(f), bounds=(freqs[i - 1], freqs[i + 1]),
                                           method="bounded", options={"xatol": 1e-4 * freqs[i]})
            if -res.fun >= v_pk:
                f_pk, v_pk = float(res.x), float(-res.fun)
        peaks.append(f_pk)
        vals.append(v_pk)
    spec = TickleSpectrum(freqs, response, np.array(peaks), np.array(vals))
    if not peaks:
        raise TickleScanError(f"no resonance with contrast above {floor:g} in "
                              f"{lo:g}-{hi:g} Hz", spec)
    return spec


# --- micromotion compensation -------------------------------------------------

@dataclass(frozen=True)
class Compensation:
    adjustments: dict            # electrode id -> delta V
    residual_field: np.ndarray   # V/m at the RF null
    input_field: np.ndarray      # static field at the RF null before compensation
    rf_null: np.ndarray
    residual_micromotion: float  # m, amplitude at Omega
    condition: float


def rf_null(rf: GridField, r_guess, max_iter=30):
    """Point of vanishing RF field near ``r_guess``: Newton steps on the
    transverse (y, z) gradient of the fitted RF potential at fixed x."""
    r = np.array(r_guess, float)
    prev = None
    for _ in range(max_iter):
        s = sample(rf, r)
        step = -np.linalg.solve(s.hessian[1:, 1:], s.gradient[1:])
        n = np.linalg.norm(step)
        if n > rf.spacing:
            step *= rf.spacing / n
        r_new = r.copy()
        r_new[1:] += step
        if n < 1e-9 * rf.spacing:
            return r_new
        if prev is not None and np.linalg.norm(r_new - prev) < 1e-9 * rf.spacing:
            return 0.5 * (r + r_new)
        prev, r = r, r_new
    return r


def compensate_micromotion(bases: BasisSet, drive: DriveConfig, stray_field, comp_electrodes,
                           max_condition=1e6, r_guess=None) -> Compensation:
    """DC adjustments on ``comp_electrodes`` that minimise the static field at
    the RF null (least squares; minimum-norm when more electrodes than field
    components)."""
    comp = [int(e) for e in comp_electrodes]
    if len(comp) < 2:
        raise ValueError("need at least two compensation electrodes")
    for e in comp:
        if e not in bases.dc_ids:
            raise ValueError(f"electrode {e} is not a DC electrode")
    E_stray = np.zeros(3) if stray_field is None else np.asarray(stray_field, float)
    tf = trap_fields(bases, drive)
    r0 = find_minimum(tf.U, r_guess)
    null = rf_null(tf.rf, r0)
    E_in = -sample(tf.dc, null).gradient + E_stray
    A = np.column_stack([-sample(bases[e].field, null).gradient for e in comp])
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        raise CompensationError("a compensation electrode has no field at the RF null")
    sv = np.linalg.svd(A / norms, compute_uv=False)
    cond = float(sv[0] / sv[min(len(sv), 3) - 1]) if sv[min(len(sv), 3) - 1] > 0 else np.inf
    if cond > max_condition:
        raise CompensationError(f"compensation electrodes are degenerate (condition {cond:.3g})")
    dv, *_ = np.linalg.lstsq(A, -E_in, rcond=None)
    E_res = E_in + A @ dv
    # residual displacement from the RF null and the micromotion it drives
    sU = sample(tf.U, r0)
    sp = drive.species
    dr = np.linalg.solve(sU.hessian, sp.charge / E_CHARGE * E_res)
    mm = sp.charge * drive.V0 * np.linalg.norm(sample(tf.rf, r0).hessian @ dr) / (sp.mass * drive.Omega ** 2)
    return Compensation(dict(zip(comp, dv)), E_res, E_in, null, float(mm), cond)



def micromotion_amplitude(traj: Trajectory, Omega, t_start=None):
    """Amplitude vector of the component at ``Omega`` (least-squares fit with
    secular motion removed by a one-period running mean)."""
    keep = slice(None) if t_start is None else traj.t >= t_start
    t = traj.t[keep]
    r = traj.position[keep]
    window = max(1, int(round(2 * np.pi / Omega / (t[1] - t[0]))))
    r = r - ndimage.uniform_filter1d(r, window, axis=0, mode="nearest")
    c, s = np.cos(Omega * t), np.sin(Omega * t)
    A = np.column_stack([c, s])
    coef, *_ = np.linalg.lstsq(A, r, rcond=None)
    return np.sqrt(coef[0] ** 2 + coef[1] ** 2)
