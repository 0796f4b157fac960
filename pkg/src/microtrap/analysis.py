"""Pseudopotential, trap minimum, secular frequencies, Mathieu parameters and depth."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import constants as C
from scipy import ndimage, optimize

from .fields import BasisSet, GridField, SampleError, sample
from .geometry import VACUUM

log = logging.getLogger(__name__)

E_CHARGE = C.e


class UntrappedError(RuntimeError):
    pass


class SaddleError(RuntimeError):
    pass


@dataclass(frozen=True)
class IonSpecies:
    mass: float
    charge: float
    name: str = ""

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be > 0")
        if self.charge == 0:
            raise ValueError("charge must be non-zero")


CD111 = IonSpecies(111 * C.atomic_mass, C.e, "111Cd+")


@dataclass(frozen=True)
class DriveConfig:
    """RF amplitude ``V0`` (zero-to-peak), angular frequency ``Omega`` and the
    static voltages of the DC electrodes (``{electrode id: V}``, missing = 0)."""

    V0: float
    Omega: float
    dc_voltages: dict = field(default_factory=dict)
    species: IonSpecies = CD111

    def __post_init__(self):
        if self.V0 < 0:
            raise ValueError("V0 must be >= 0")
        if not self.Omega > 0:
            raise ValueError("Omega must be > 0")

    def dc_vector(self, n_electrodes, dc_ids) -> np.ndarray:
        v = np.zeros(n_electrodes)
        for eid, volts in self.dc_voltages.items():
            if int(eid) not in dc_ids:
                raise ValueError(f"electrode {eid} is not a DC electrode")
            v[int(eid)] = volts
        return v

    def with_dc(self, dc_voltages) -> "DriveConfig":
        return DriveConfig(self.V0, self.Omega, dict(dc_voltages), self.species)

    def scaled(self, V0=None, Omega=None, dc_scale=1.0) -> "DriveConfig":
        return DriveConfig(self.V0 if V0 is None else V0,
                           self.Omega if Omega is None else Omega,
                           {k: v * dc_scale for k, v in self.dc_voltages.items()},
                           self.species)


def zone_voltages(electrodes, center_segment, endcap=1.00, center=-0.33, other=0.0) -> dict:
    """DC voltages for a zone: endcaps on the neighbouring segments, ``center``
    on ``center_segment`` and ``other`` elsewhere."""
    out = {}
    for eid, lab in enumerate(electrodes):
        if lab.role != "dc":
            continue
        d = abs(lab.segment_index - center_segment)
        out[eid] = center if d == 0 else endcap if d == 1 else other
    return out


def paper_drive(electrodes, center_segment=1) -> DriveConfig:
    return DriveConfig(8.0, 2 * np.pi * 15.9e6, zone_voltages(electrodes, center_segment), CD111)


# --- pseudopotential ----------------------------------------------------------

@dataclass(eq=False)
class TrapFields:
    """The unit RF potential, static potential (V) and pseudopotential (eV)."""

    rf: GridField
    dc: GridField
    U: GridField
    drive: DriveConfig


def trap_fields(bases: BasisSet, drive: DriveConfig, stray_field=None) -> TrapFields:
    mask = bases.mask
    rf = bases.rf_field()
    dc = bases.superpose(drive.dc_vector(mask.n_electrodes, mask.dc_ids))
    if stray_field is not None:
        E = np.asarray(stray_field, float)
        x, y, z = dc.positions()
        dc = GridField(dc.values - (E[0] * x + E[1] * y + E[2] * z), dc.origin, dc.spacing, mask)
    return TrapFields(rf, dc, _pseudo(rf, dc, drive), drive)


def _pseudo(rf: GridField, dc: GridField, drive: DriveConfig) -> GridField:
    g = rf.gradient()
    g2 = np.einsum("i...,i...->...", g, g)
    sp = drive.species
    z = sp.charge / E_CHARGE
    # energy in eV: (q^2 V0^2 |grad phi|^2 / (4 m Omega^2) + q Phi_DC) / e
    U = (sp.charge ** 2 * drive.V0 ** 2 / (4 * sp.mass * drive.Omega ** 2) / E_CHARGE) * g2 + z * dc.values
    if rf.mask is not None:
        U[rf.mask.labels != VACUUM] = np.inf
    return GridField(U, rf.origin, rf.spacing, rf.mask)


def pseudopotential(bases: BasisSet, drive: DriveConfig, stray_field=None) -> GridField:
    """Time-averaged potential energy of the ion in eV (``inf`` inside electrodes)."""
    return trap_fields(bases, drive, stray_field).U


# --- minimum ------------------------------------------------------------------

_NEIGHBOURS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                        if (i, j, k) != (0, 0, 0)])


def _descend(U: GridField, start):
    vals = U.values
    idx = np.array(start)
    n = np.array(vals.shape)
    for _ in range(int(n.sum()) * 4):
        nb = idx + _NEIGHBOURS
        inside = np.all((nb >= 0) & (nb < n), axis=1)
        nb = nb[inside]
        nv = vals[tuple(nb.T)]
        k = int(np.argmin(nv))
        if not nv[k] < vals[tuple(idx)]:
            return tuple(int(i) for i in idx)
        idx = nb[k]
    raise UntrappedError("descent did not terminate")


def _near_obstacle(U: GridField, idx, margin):
    sl = tuple(slice(max(i - margin, 0), i + margin + 1) for i in idx)
    n = np.array(U.shape)
    if np.any(np.array(idx) - margin < 1) or np.any(np.array(idx) + margin > n - 2):
        return True
    if U.mask is not None and np.any(U.mask.labels[sl] != VACUUM):
        return True
    return not np.all(np.isfinite(U.values[sl]))


def find_minimum(U: GridField, seed=None, grad_tol: float | None = None, max_iter: int = 50):
    """Local minimum of ``U`` reached by grid descent from ``seed`` (default:
    domain centre), refined by Newton steps on local quadratic fits.

    ``grad_tol`` (eV/m) bounds ``|grad U|`` at the result.  The default is
    the gradient of a displacement of 5% of a voxel along the stiffest axis;
    the fits switch centre voxel across cell faces, so the gradient estimate
    is only continuous to about that level.

    Raises :class:`UntrappedError` when the descent ends on the domain
    boundary or against an electrode.
    """
    if seed is None:
        seed = U.origin + U.spacing * (np.array(U.shape) - 1) / 2
    start = np.floor((np.asarray(seed, float) - U.origin) / U.spacing + 0.5).astype(int)
    if np.any(start < 0) or np.any(start >= np.array(U.shape)) or not np.isfinite(U.values[tuple(start)]):
        raise UntrappedError(f"seed {seed} is not in vacuum")
    idx = _descend(U, tuple(start))
    if _near_obstacle(U, idx, 2):
        raise UntrappedError(f"potential decreases to the boundary or an electrode "
                             f"(descent ended at {U.origin + U.spacing * np.array(idx)})")
    r = U.origin + U.spacing * np.array(idx, float)
    prev = None
    for _ in range(max_iter):
        s = sample(U, r)
        w = np.linalg.eigvalsh(s.hessian)
        if np.any(w <= 0):
            raise SaddleError(f"Hessian at {r} is not positive definite: {w}")
        step = -np.linalg.solve(s.hessian, s.gradient)
        if np.linalg.norm(step) > U.spacing:
            step *= U.spacing / np.linalg.norm(step)
        r_new = r + step
        if np.linalg.norm(step) < 1e-6 * U.spacing:
            r = r_new
            break
        if prev is not None and np.linalg.norm(r_new - prev) < 1e-6 * U.spacing:
            # two-cycle across a cell face: take the midpoint
            r = 0.5 * (r + r_new)
            break
        prev, r = r, r_new
    s = sample(U, r)
    if grad_tol is None:
        grad_tol = 0.05 * U.spacing * float(np.max(np.abs(np.linalg.eigvalsh(s.hessian))))
    if np.linalg.norm(s.gradient) > grad_tol:
        raise UntrappedError(f"minimum refinement did not converge: |grad U| = "
                             f"{np.linalg.norm(s.gradient):.3g} eV/m > {grad_tol:.3g}")
    return r


# --- Mathieu ------------------------------------------------------------------

def _cf_tail(beta, a, q, sign, depth=40):
    acc = 0.0
    for n in range(depth, 0, -1):
        acc = q * q / ((beta + 2 * n * sign) ** 2 - a - acc)
    return acc


def mathieu_characteristic(beta, a, q):
    """``beta^2 - a - CF(+) - CF(-)``; zero at the characteristic exponent."""
    return beta * beta - a - _cf_tail(beta, a, q, +1) - _cf_tail(beta, a, q, -1)


def mathieu_beta(a: float, q: float) -> float:
    """Characteristic exponent ``beta`` of ``u'' + (a - 2 q cos 2 tau) u = 0``
    in (0, 1), or ``nan`` when the motion is unstable."""
    q = abs(q)
    if q == 0:
        return float(np.sqrt(a)) if 0 <= a < 1 else float("nan")
    eps = 1e-15
    f0 = mathieu_characteristic(eps, a, q)
    f1 = mathieu_characteristic(1 - eps, a, q)
    if not (f0 < 0 < f1):
        return float("nan")
    return float(optimize.brentq(mathieu_characteristic, eps, 1 - eps, args=(a, q),
                                 xtol=1e-14, rtol=4 * np.finfo(float).eps))


@dataclass(frozen=True)
class SecularAnalysis:
    r0: np.ndarray
    omega: np.ndarray            # pseudopotential estimates, rad/s
    axes: np.ndarray             # rows are unit vectors
    labels: tuple
    mathieu_q: np.ndarray
    mathieu_a: np.ndarray
    beta: np.ndarray
    stable: bool
    axis_tilts: np.ndarray       # deg out of the chip (x-y) plane, per axis
    q: float                     # larger transverse q
    hessian_U: np.ndarray        # eV/m^2
    hessian_rf: np.ndarray       # 1/m^2, unit RF potential
    hessian_dc: np.ndarray       # V/m^2
    Omega: float

    @property
    def axis_tilt(self) -> float:
        """Tilt of the transverse axis nearest the chip plane (deg)."""
        return float(min(self.axis_tilts[1], self.axis_tilts[2]))

    @property
    def omega_mathieu(self) -> np.ndarray:
        """Secular frequencies ``beta Omega / 2`` (rad/s)."""
        return self.beta * self.Omega / 2

    @property
    def frequencies_hz(self) -> np.ndarray:
        return self.omega / (2 * np.pi)

    def as_row(self) -> dict:
        row = {}
        for i, lab in enumerate(self.labels):
            row[f"f_{lab}_Hz"] = self.omega[i] / (2 * np.pi)
            row[f"f_{lab}_mathieu_Hz"] = self.omega_mathieu[i] / (2 * np.pi)
            row[f"q_{lab}"] = self.mathieu_q[i]
            row[f"a_{lab}"] = self.mathieu_a[i]
            row[f"beta_{lab}"] = self.beta[i]
            for c, ax in zip("xyz", self.axes[i]):
                row[f"axis_{lab}_{c}"] = ax
            row[f"tilt_{lab}_deg"] = self.axis_tilts[i]
        row["q"] = self.q
        row["axis_tilt_deg"] = self.axis_tilt
        row["stable"] = int(self.stable)
        for c, v in zip("xyz", self.r0):
            row[f"r0_{c}_m"] = v
        return row


def tilt_deg(v) -> float:
    v = np.asarray(v, float)
    return float(np.degrees(np.arcsin(min(1.0, abs(v[2]) / np.linalg.norm(v)))))


def analyze_fields(tf: TrapFields, seed=None) -> SecularAnalysis:
    drive, sp = tf.drive, tf.drive.species
    r0 = find_minimum(tf.U, seed)
    sU = sample(tf.U, r0)
    H_rf = sample(tf.rf, r0).hessian
    H_dc = sample(tf.dc, r0).hessian
    w, v = np.linalg.eigh(sU.hessian)
    if np.any(w <= 0):
        raise SaddleError(f"pseudopotential Hessian is indefinite at {r0}: {w}")
    axes = v.T
    axial = int(np.argmax(np.abs(axes[:, 0])))
    rest = sorted((i for i in range(3) if i != axial), key=lambda i: w[i])
    order = [axial] + rest
    axes, w = axes[order], w[order]
    axes = np.array([a if a[np.argmax(np.abs(a))] > 0 else -a for a in axes])
    omega = np.sqrt(sp.charge * w / sp.mass)
    scale = sp.charge / (sp.mass * drive.Omega ** 2)
    # per-axis q uses the RF gradient produced by a displacement along the axis,
    # which equals |eigenvalue| whenever the RF and pseudopotential axes coincide
    qv = np.array([2 * drive.V0 * scale * np.linalg.norm(H_rf @ a) for a in axes])
    av = np.array([4 * scale * (a @ H_dc @ a) for a in axes])
    beta = np.array([mathieu_beta(ai, qi) for ai, qi in zip(av, qv)])
    stable = bool(np.all(np.isfinite(beta)) and np.all((beta > 0) & (beta < 1)))
    tilts = np.array([tilt_deg(a) for a in axes])
    return SecularAnalysis(r0=r0, omega=omega, axes=axes, labels=("axial", "transverse1", "transverse2"),
                           mathieu_q=qv, mathieu_a=av, beta=beta, stable=stable, axis_tilts=tilts,
                           q=float(max(qv[1], qv[2])), hessian_U=sU.hessian, hessian_rf=H_rf,
                           hessian_dc=H_dc, Omega=drive.Omega)


def secular_analysis(bases: BasisSet, drive: DriveConfig, seed=None, stray_field=None) -> SecularAnalysis:
    return analyze_fields(trap_fields(bases, drive, stray_field), seed)


# --- depth --------------------------------------------------------------------

@dataclass(frozen=True)
class DepthResult:
    depth: float                 # eV
    saddle_position: np.ndarray
    escape_direction: np.ndarray
    escape_tilt_angle: float     # deg out of the chip plane
    minimum_value: float         # eV
    saddle_value: float          # eV


def _depth_region(U: GridField):
    region = np.isfinite(U.values)
    if U.mask is not None:
        region &= U.mask.labels == VACUUM
    region[[0, -1], :, :] = False
    region[:, [0, -1], :] = False
    region[:, :, [0, -1]] = False
    exits = np.zeros_like(region)
    exits[[1, -2], :, :] = True
    exits[:, [1, -2], :] = True
    exits[:, :, [1, -2]] = True
    return region, exits & region


def escape_level(values, region, exits, start):
    """Smallest grid level ``L`` such that the face-connected component of
    ``{values <= L}`` containing ``start`` reaches an exit voxel.

    Found by bisection over the sorted distinct levels with one flood fill per
    probe, so the answer is exactly a grid value.
    """
    v0 = values[start]
    levels = np.unique(values[region & (values >= v0)])

    def connects(level):
        lab, _ = ndimage.label(region & (values <= level))
        tag = lab[start]
        return tag != 0 and bool(np.any(lab[exits] == tag))

    if connects(levels[0]):
        return levels[0]
    lo, hi = 0, len(levels) - 1
    if not connects(levels[hi]):
        raise UntrappedError("no path to the boundary at any level")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if connects(levels[mid]):
            hi = mid
        else:
            lo = mid
    return levels[hi]


def trap_depth(U: GridField, r0) -> DepthResult:
    """Energy needed to leave the basin of ``r0`` for the domain boundary.

    Electrode voxels are impassable.  The saddle is the grid voxel at the
    escape level that joins the basin to the boundary.
    """
    region, exits = _depth_region(U)
    start = tuple(np.floor((np.asarray(r0, float) - U.origin) / U.spacing + 0.5).astype(int))
    if not region[start]:
        raise UntrappedError(f"r0 = {r0} is not in the vacuum region")
    try:
        u_min = sample(U, r0).value
    except SampleError:
        u_min = float(U.values[start])
    u_min = min(u_min, float(U.values[start]))
    level = escape_level(U.values, region, exits, start)
    if level <= U.values[start]:
        sad_idx = start
    else:
        lab, _ = ndimage.label(region & (U.values < level))
        basin = lab == lab[start]
        grown = ndimage.binary_dilation(basin, structure=ndimage.generate_binary_structure(3, 1))
        # only level voxels on the far side that still reach an exit, not mere ties
        lab2, _ = ndimage.label(region & (U.values <= level) & ~basin)
        tags = np.unique(lab2[exits & (lab2 > 0)])
        cand = np.argwhere(grown & (U.values == level) & np.isin(lab2, tags))
        if len(cand) == 0:
            cand = np.argwhere(grown & region & (U.values == level))
        pos = U.origin + U.spacing * cand
        sad_idx = tuple(cand[int(np.argmin(np.linalg.norm(pos - r0, axis=1)))])
    saddle = U.origin + U.spacing * np.array(sad_idx, float)
    d = saddle - np.asarray(r0, float)
    n = np.linalg.norm(d)
    direction = d / n if n > 0 else np.zeros(3)
    depth = max(float(level) - u_min, 0.0)
    return DepthResult(depth, saddle, direction, tilt_deg(direction) if n > 0 else 0.0,
                       u_min, float(level))
