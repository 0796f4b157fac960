"""Finite-difference Laplace solves on a :class:`~microtrap.geometry.VoxelMask`.

Two methods share one discretisation (7-point Laplacian on voxel centres,
Dirichlet values on electrode and boundary voxels).  When the mask carries
the electrode boxes, a link from a vacuum voxel to an electrode voxel whose
surface lies a fraction ``theta`` of a voxel away gets weight ``1 / theta``
(a symmetric cut-cell treatment, second order in the solution).  Without it
every surface would sit at the nearest electrode voxel centre, which moves
thin gaps by up to a voxel and makes the error first order in the spacing.

``"sor"``
    red-black successive over-relaxation.
``"mg"``
    conjugate gradients preconditioned by a symmetric geometric multigrid
    V-cycle with red-black Gauss-Seidel smoothing.  Much faster on
    production grids; converges to the same discrete solution.

Both finish with a projection onto the Dirichlet value range followed by
plain Gauss-Seidel sweeps, so the discrete maximum principle holds exactly.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..geometry import ELECTRODE_OFFSET, VACUUM, VoxelMask, index_ranges
from . import _kernels as K
from .sampling import GridField

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
DEFAULT_OMEGA_SOR = 1.9
# surfaces closer than this fraction of a voxel are treated as sitting at this distance
THETA_MIN = 0.05


class SolverError(RuntimeError):
    def __init__(self, message, residual_history=()):
        super().__init__(message)
        self.residual_history = list(residual_history)


@dataclass(eq=False)
class PotentialBasis:
    """Unit-voltage potential of one electrode, all others grounded."""

    electrode_id: int
    values: np.ndarray
    mask: VoxelMask
    residual: float
    iterations: int
    residual_history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def label(self):
        return self.mask.electrodes[self.electrode_id]

    @property
    def field(self) -> GridField:
        return GridField(self.values, self.mask.origin, self.mask.spacing, self.mask)


@dataclass(eq=False)
class CutCells:
    """Reweighted vacuum-to-electrode links of one mask.

    ``cut`` maps each voxel to its row in ``D`` (or -1 for the plain
    stencil).  Link ``l`` joins row ``owner[l]`` to the electrode voxel with
    flat index ``neighbor[l]`` and adds ``excess[l] = 1 / theta - 1`` to the
    unit weight.
    """

    cut: np.ndarray
    D: np.ndarray
    owner: np.ndarray
    neighbor: np.ndarray
    excess: np.ndarray

    @classmethod
    def plain(cls, shape) -> "CutCells":
        empty = np.zeros(0)
        return cls(np.full(shape, -1, np.int32), np.full(1, 6.0), np.zeros(0, np.intp),
                   np.zeros(0, np.intp), empty)

    @classmethod
    def from_mask(cls, mask: VoxelMask, theta_min: float = THETA_MIN) -> "CutCells":
        if not mask.solids:
            return cls.plain(mask.shape)
        h, origin, shape, labels = mask.spacing, mask.origin, mask.shape, mask.labels
        strides = np.array([shape[1] * shape[2], shape[2], 1])
        owners, neighbors, excess = [], [], []
        for box in mask.solids:
            rng = index_ranges(box, origin, h, shape)
            if any(i1 < i0 for i0, i1 in rng):
                continue
            for ax in range(3):
                for side in (-1, 1):
                    j = rng[ax][0] - 1 if side < 0 else rng[ax][1] + 1
                    if not 1 <= j <= shape[ax] - 2:
                        continue
                    c = origin[ax] + j * h
                    theta = (box.lo[ax] - c) / h if side < 0 else (c - box.hi[ax]) / h
                    w1 = 1.0 / min(max(theta, theta_min), 1.0) - 1.0
                    if w1 <= 1e-12:
                        continue
                    sl = [slice(i0, i1 + 1) for i0, i1 in rng]
                    sl[ax] = slice(j, j + 1)
                    idx = np.argwhere(labels[tuple(sl)] == VACUUM) + [s.start for s in sl]
                    flat = idx @ strides
                    owners.append(flat)
                    neighbors.append(flat - side * strides[ax])
                    excess.append(np.full(len(flat), w1))
        if not owners:
            return cls.plain(shape)
        flat = np.concatenate(owners)
        rows, owner = np.unique(flat, return_inverse=True)
        excess = np.concatenate(excess)
        cut = np.full(shape, -1, np.int32)
        cut.ravel()[rows] = np.arange(len(rows), dtype=np.int32)
        D = 6.0 + np.bincount(owner, excess, minlength=len(rows))
        return cls(cut, D, owner, np.concatenate(neighbors), excess)

    def dirichlet_terms(self, phi: np.ndarray) -> np.ndarray:
        """``E`` for Dirichlet data held in ``phi``."""
        if len(self.owner) == 0:
            return np.zeros(1)
        return np.bincount(self.owner, self.excess * phi.ravel()[self.neighbor], minlength=len(self.D))


class _Multigrid:
    """Symmetric V-cycle for ``(d x - sum nb) / h2 = b`` with zero Dirichlet data.

    Only the finest level carries the cut-cell weights.  Coarse levels use the
    plain stencil, which keeps the cycle symmetric positive definite and is
    enough for a preconditioner.
    """

    def __init__(self, fixed: np.ndarray, cells: CutCells | None = None, nu: int = 2, coarsest: int = 6):
        self.fixed = [np.ascontiguousarray(fixed)]
        while min(self.fixed[-1].shape) >= 2 * coarsest:
            f = self.fixed[-1]
            c = np.empty(tuple((n + 1) // 2 for n in f.shape), dtype=np.bool_)
            K.coarsen_fixed(f, c)
            self.fixed.append(c)
        self.cells = [cells or CutCells.plain(fixed.shape)] + [CutCells.plain(f.shape) for f in self.fixed[1:]]
        # constant prolongation with averaging restriction doubles h^2 per level
        self.h2 = [2.0 ** lvl for lvl in range(len(self.fixed))]
        self.x = [None] + [np.zeros(f.shape) for f in self.fixed[1:]]
        self.b = [None] + [np.zeros(f.shape) for f in self.fixed[1:]]
        self.r = [np.zeros(f.shape) for f in self.fixed]
        self.nu = nu

    @property
    def levels(self):
        return len(self.fixed)

    def _smooth(self, lvl, x, b, order):
        fx, h2, cc = self.fixed[lvl], self.h2[lvl], self.cells[lvl]
        for _ in range(self.nu if lvl < self.levels - 1 else 16):
            for color in order:
                K.gs_sweep_rhs(x, b, fx, cc.cut, cc.D, color, h2)

    def _cycle(self, lvl, x, b):
        x[...] = 0.0
        self._smooth(lvl, x, b, (0, 1))
        if lvl < self.levels - 1:
            r = self.r[lvl]
            cc = self.cells[lvl]
            K.residual_rhs(x, b, self.fixed[lvl], cc.cut, cc.D, self.h2[lvl], r)
            K.restrict(r, self.b[lvl + 1])
            self._cycle(lvl + 1, self.x[lvl + 1], self.b[lvl + 1])
            K.prolong_add(self.x[lvl + 1], x, self.fixed[lvl])
        self._smooth(lvl, x, b, (1, 0))

    def precondition(self, r, z):
        self._cycle(0, z, r)


def _dirichlet_values(mask: VoxelMask, voltages: np.ndarray) -> np.ndarray:
    """Initial array: electrode voltages on electrode voxels, 0 elsewhere."""
    lut = np.zeros(ELECTRODE_OFFSET + mask.n_electrodes)
    lut[ELECTRODE_OFFSET:] = voltages
    return lut[mask.labels]


def _finish(phi, fixed, cc, E, lo, hi, tol, work, history, max_sweeps=2000):
    """Project onto [lo, hi] then relax with omega = 1.  Every update is a
    convex combination of neighbours and Dirichlet data, so the bounds hold."""
    K.clip_free(phi, fixed, lo, hi)
    sweeps = 0
    while True:
        for color in (0, 1):
            K.sor_sweep(phi, fixed, cc.cut, cc.D, E, color, 1.0)
        sweeps += 1
        res = K.laplace_residual(phi, fixed, cc.cut, cc.D, E, work)
        if sweeps >= 2 and res < tol:
            break
        if sweeps >= max_sweeps:
            break
    history.append(res)
    return res, sweeps


def _solve_sor(phi, fixed, cc, E, tol, omega, max_iter, check_every=10):
    work = np.empty_like(phi)
    history = []
    for it in range(1, max_iter + 1):
        K.sor_sweep(phi, fixed, cc.cut, cc.D, E, 0, omega)
        K.sor_sweep(phi, fixed, cc.cut, cc.D, E, 1, omega)
        if it % check_every == 0:
            res = K.laplace_residual(phi, fixed, cc.cut, cc.D, E, work)
            history.append(res)
            if res < tol:
                return it, history, work
    raise SolverError(f"SOR did not reach tol={tol:g} in {max_iter} iterations "
                      f"(last residual {history[-1] if history else float('nan'):.3g})", history)


def _solve_pcg(phi, fixed, cc, E, tol, max_iter, mg: _Multigrid):
    r = np.empty_like(phi)
    res = K.laplace_residual(phi, fixed, cc.cut, cc.D, E, r)   # r = b - A phi, A = d - sum nb
    history = [res]
    if res < tol:
        return 0, history, r
    z = np.zeros_like(phi)
    mg.precondition(r, z)
    p = z.copy()
    q = np.empty_like(phi)
    rz = K.dot_free(r, z, fixed)
    target = 0.1 * tol  # leave margin for the bound projection that follows
    for it in range(1, max_iter + 1):
        K.apply_operator(p, fixed, cc.cut, cc.D, q)
        alpha = rz / K.dot_free(p, q, fixed)
        K.axpy(alpha, p, phi)
        K.axpy(-alpha, q, r)
        res = float(np.max(np.abs(r))) / 6.0   # d >= 6, so this bounds the scaled residual
        history.append(res)
        if res < target:
            # confirm with the true residual
            true_res = K.laplace_residual(phi, fixed, cc.cut, cc.D, E, q)
            history[-1] = true_res
            if true_res < target:
                return it, history, q
            r[...] = q
        mg.precondition(r, z)
        rz_new = K.dot_free(r, z, fixed)
        K.xpby(z, rz_new / rz, p)
        rz = rz_new
    raise SolverError(f"MG-PCG did not reach tol={tol:g} in {max_iter} iterations "
                      f"(last residual {history[-1]:.3g})", history)


def solve_dirichlet(mask: VoxelMask, voltages, tol: float = DEFAULT_TOL, method: str = "mg",
                    omega: float = DEFAULT_OMEGA_SOR, max_iter: int | None = None,
                    cut_cells: bool = True, _mg: _Multigrid | None = None, _cells: CutCells | None = None):
    """Solve Laplace's equation with the given electrode voltages (boundary at 0 V).

    With ``cut_cells`` (default) and a mask that carries its electrode boxes,
    surfaces between voxel centres are placed exactly; otherwise each surface
    sits on the outermost electrode voxel centres.

    Returns ``(values, residual, iterations, history)``.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    voltages = np.asarray(voltages, dtype=float)
    if voltages.shape != (mask.n_electrodes,):
        raise ValueError(f"expected {mask.n_electrodes} voltages, got shape {voltages.shape}")
    fixed = np.ascontiguousarray(mask.fixed)
    phi = _dirichlet_values(mask, voltages)
    lo, hi = min(0.0, voltages.min()), max(0.0, voltages.max())
    if lo == hi:
        return phi, 0.0, 0, [0.0]
    if method not in ("sor", "mg"):
        raise ValueError(f"unknown method {method!r}")
    cc = _cells or (CutCells.from_mask(mask) if cut_cells else CutCells.plain(mask.shape))
    E = cc.dirichlet_terms(phi)
    # scale tolerance to the Dirichlet data range
    tol_abs = tol * (hi - lo)
    if method == "sor":
        it, history, work = _solve_sor(phi, fixed, cc, E, tol_abs, omega, max_iter or 200_000)
    else:
        mg = _mg or _Multigrid(fixed, cc)
        it, history, work = _solve_pcg(phi, fixed, cc, E, tol_abs, max_iter or 500, mg)
    res, sweeps = _finish(phi, fixed, cc, E, lo, hi, tol_abs, work, history)
    if res >= tol_abs:
        raise SolverError(f"residual {res:.3g} above tol after bound projection", history)
    return phi, res / (hi - lo), it + sweeps, history


def solve_basis(mask: VoxelMask, electrode_id: int, tol: float = DEFAULT_TOL,
                method: str = "mg", **kwargs) -> PotentialBasis:
    if not 0 <= electrode_id < mask.n_electrodes:
        raise KeyError(f"electrode {electrode_id} not in mask")
    v = np.zeros(mask.n_electrodes)
    v[electrode_id] = 1.0
    t0 = time.perf_counter()
    phi, res, it, hist = solve_dirichlet(mask, v, tol=tol, method=method, **kwargs)
    log.info("basis %d (%s): %d iterations, residual %.2e, %.1f s", electrode_id,
             mask.electrodes[electrode_id].name, it, res, time.perf_counter() - t0)
    return PotentialBasis(electrode_id, phi, mask, res, it, hist)


def iter_bases(mask: VoxelMask, tol: float = DEFAULT_TOL, method: str = "mg", electrode_ids=None,
               **kwargs):
    """Solve the bases one at a time, yielding each as soon as it is done.

    The multigrid hierarchy is shared between electrodes.  Useful on fine
    grids where all bases do not fit in memory at once.
    """
    ids = list(range(mask.n_electrodes)) if electrode_ids is None else list(electrode_ids)
    cells = CutCells.from_mask(mask) if kwargs.pop("cut_cells", True) else CutCells.plain(mask.shape)
    kwargs["_cells"] = cells
    if method == "mg":
        kwargs["_mg"] = _Multigrid(np.ascontiguousarray(mask.fixed), cells)
    for eid in ids:
        yield solve_basis(mask, eid, tol=tol, method=method, **kwargs)


def solve_all(mask: VoxelMask, tol: float = DEFAULT_TOL, method: str = "mg",
              electrode_ids=None, threads: int = 1, **kwargs) -> "BasisSet":
    """Solve every basis (``threads`` electrodes in parallel)."""
    ids = list(range(mask.n_electrodes)) if electrode_ids is None else list(electrode_ids)
    if threads <= 1:
        return BasisSet(mask, iter_bases(mask, tol, method, ids, **kwargs))
    if kwargs.pop("cut_cells", True):
        kwargs["_cells"] = CutCells.from_mask(mask)
    else:
        kwargs["_cells"] = CutCells.plain(mask.shape)
    # work arrays are per hierarchy, so each task builds its own
    with ThreadPoolExecutor(max_workers=threads) as pool:
        bases = list(pool.map(lambda eid: solve_basis(mask, eid, tol=tol, method=method, **kwargs), ids))
    return BasisSet(mask, bases)


class BasisSet:
    """Solved bases for (a subset of) the electrodes of one mask."""

    def __init__(self, mask: VoxelMask, bases):
        self.mask = mask
        self._bases = {b.electrode_id: b for b in bases}

    def __getitem__(self, eid) -> PotentialBasis:
        return self._bases[eid]

    def __iter__(self):
        return iter(self._bases[k] for k in sorted(self._bases))

    def __len__(self):
        return len(self._bases)

    @property
    def ids(self):
        return sorted(self._bases)

    @property
    def rf_ids(self):
        return [i for i in self.mask.rf_ids if i in self._bases]

    @property
    def dc_ids(self):
        return [i for i in self.mask.dc_ids if i in self._bases]

    @property
    def labels(self):
        return self.mask.electrodes

    def superpose(self, voltages) -> GridField:
        return superpose(self, voltages)

    def rf_field(self) -> GridField:
        """Unit-amplitude potential of all RF electrodes together."""
        missing = set(self.mask.rf_ids) - set(self._bases)
        if missing:
            raise KeyError(f"missing RF bases {sorted(missing)}")
        return superpose(self, {i: 1.0 for i in self.mask.rf_ids})

    def dc_field(self, dc_voltages) -> GridField:
        return superpose(self, dc_voltages)


def superpose(bases: BasisSet, voltages) -> GridField:
    """``sum_i V_i phi_i``.  ``voltages`` is a mapping ``id -> V`` or a full
    sequence indexed by electrode id."""
    if isinstance(voltages, dict):
        items = voltages.items()
    else:
        voltages = list(voltages)
        if len(voltages) != len(bases):
            raise ValueError(f"{len(voltages)} voltages for {len(bases)} bases")
        items = zip(bases.ids, voltages)
    mask = bases.mask
    out = np.zeros(mask.shape)
    for eid, v in items:
        if eid not in bases.ids:
            raise KeyError(f"no basis for electrode {eid}")
        if v != 0.0:
            out += float(v) * bases[eid].values
    return GridField(out, mask.origin, mask.spacing, mask)
