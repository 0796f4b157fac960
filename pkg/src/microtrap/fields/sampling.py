"""Scalar grid fields and derivative estimates by local quadratic least squares."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..geometry import VACUUM, write_grid, read_grid

HALF = 2  # 5^3 neighbourhood
_SIGMA = 1.5  # Gaussian weight width in voxels


class SampleError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSample:
    position: np.ndarray
    value: float
    gradient: np.ndarray
    hessian: np.ndarray


def _design(offsets):
    """Quadratic design matrix for offsets (in voxels)."""
    dx, dy, dz = offsets.T
    return np.column_stack([
        np.ones_like(dx), dx, dy, dz,
        0.5 * dx * dx, 0.5 * dy * dy, 0.5 * dz * dz, dx * dy, dx * dz, dy * dz,
    ])


_STENCIL = np.array([(i, j, k) for i in range(-HALF, HALF + 1)
                     for j in range(-HALF, HALF + 1)
                     for k in range(-HALF, HALF + 1)], dtype=float)


def _weighted_pinv(offsets, valid=None):
    A = _design(offsets)
    w = np.exp(-np.sum(offsets ** 2, axis=1) / (2 * _SIGMA ** 2))
    if valid is not None:
        w = w * valid
    sw = np.sqrt(w)
    return np.linalg.pinv(A * sw[:, None]) * sw[None, :]


@lru_cache(maxsize=4096)
def _cached_pinv(frac):
    return _weighted_pinv(_STENCIL - np.array(frac))


def _unpack(coef, h):
    g = coef[1:4] / h
    H = np.array([[coef[4], coef[7], coef[8]],
                  [coef[7], coef[5], coef[9]],
                  [coef[8], coef[9], coef[6]]]) / h ** 2
    return coef[0], g, H


class GridField:
    """Scalar field on voxel centres ``origin + spacing * index``."""

    def __init__(self, values, origin, spacing, mask=None):
        self.values = np.asarray(values)
        self.origin = np.asarray(origin, dtype=float)
        self.spacing = float(spacing)
        self.mask = mask
        if mask is not None and mask.shape != self.values.shape:
            raise ValueError("field and mask shapes differ")

    @property
    def shape(self):
        return self.values.shape

    def __add__(self, other):
        if isinstance(other, GridField):
            return GridField(self.values + other.values, self.origin, self.spacing, self.mask)
        return GridField(self.values + other, self.origin, self.spacing, self.mask)

    def __mul__(self, c):
        return GridField(self.values * c, self.origin, self.spacing, self.mask)

    __rmul__ = __mul__

    def coords(self, axis):
        return self.origin[axis] + self.spacing * np.arange(self.shape[axis])

    def positions(self):
        """Voxel-centre coordinate arrays (broadcastable)."""
        x, y, z = (self.coords(a) for a in range(3))
        return x[:, None, None], y[None, :, None], z[None, None, :]

    def gradient(self) -> np.ndarray:
        """Central-difference gradient, shape ``(3, nx, ny, nz)``."""
        return np.stack(np.gradient(self.values, self.spacing))

    def sample(self, r) -> FieldSample:
        return sample(self, r)

    def save(self, path):
        write_grid(path, self.origin, self.spacing, self.values.astype("<f8"))

    @classmethod
    def load(cls, path, mask=None):
        origin, spacing, data = read_grid(path, "<f8")
        return cls(data, origin, spacing, mask)

    def line_scan(self, start, stop, n):
        """Values along a straight segment, from quadratic fits."""
        pts = np.linspace(np.asarray(start, float), np.asarray(stop, float), n)
        return pts, np.array([sample(self, p).value for p in pts])

    def write_line_csv(self, path, start, stop, n, header=""):
        pts, vals = self.line_scan(start, stop, n)
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header)
            wr = csv.writer(fh)
            wr.writerow(["x_m", "y_m", "z_m", "value"])
            for p, v in zip(pts, vals):
                wr.writerow([f"{p[0]:.9e}", f"{p[1]:.9e}", f"{p[2]:.9e}", f"{v:.12e}"])


def _corners(field: GridField, r):
    """The 8 voxels around ``r`` with trilinear weights and fractional offsets."""
    r = np.asarray(r, dtype=float)
    u = (r - field.origin) / field.spacing
    c0 = np.floor(u).astype(int)
    n = np.array(field.shape)
    if np.any(c0 - HALF < 1) or np.any(c0 + 1 + HALF > n - 2):
        raise SampleError(f"point {r} is closer than {HALF} voxels to the domain boundary")
    w1 = u - c0
    out = []
    for d in np.ndindex(2, 2, 2):
        d = np.array(d)
        w = float(np.prod(np.where(d == 1, w1, 1 - w1)))
        if w <= 1e-14:
            continue
        c = c0 + d
        frac = tuple(np.round(u - c, 12))
        sl = tuple(slice(ci - HALF, ci + HALF + 1) for ci in c)
        out.append((w, frac, sl))
    return u, out


def _fit(vals, frac, valid_sl=None):
    ok = np.isfinite(vals)
    if valid_sl is not None:
        ok &= valid_sl
    if ok.all():
        return _cached_pinv(frac) @ vals
    if ok.sum() < 20:
        return None
    P = _weighted_pinv(_STENCIL - np.array(frac), ok.astype(float))
    return P @ np.where(ok, vals, 0.0)


def sample(field: GridField, r, valid=None) -> FieldSample:
    """Value, gradient and Hessian at ``r``.

    Gaussian-weighted quadratic least-squares fits over the 5x5x5 voxels
    around each of the 8 voxel centres enclosing ``r`` are blended with
    trilinear weights.  Exact for quadratic fields and continuous in ``r``.
    Voxels with non-finite values (e.g. electrode interiors of a
    pseudopotential) are excluded from the fits.
    """
    u, corners = _corners(field, r)
    mask = field.mask
    if mask is not None and mask.labels[tuple(np.floor(u + 0.5).astype(int))] != VACUUM:
        raise SampleError(f"point {r} is not in vacuum")
    coef = np.zeros(10)
    wsum = 0.0
    for w, frac, sl in corners:
        cf = _fit(field.values[sl].reshape(-1), frac,
                  None if valid is None else valid[sl].reshape(-1))
        if cf is None:
            continue
        coef += w * cf
        wsum += w
    if wsum < 0.5:
        raise SampleError(f"too few usable voxels around {r}")
    v, g, H = _unpack(coef / wsum, field.spacing)
    return FieldSample(np.asarray(r, float), float(v), g, H)


def sample_many(fields, r):
    """Fit several fields (all values finite) at the same point.

    Returns arrays ``values (n,)``, ``gradients (n, 3)``, ``hessians (n, 3, 3)``.
    """
    fields = list(fields)
    _, corners = _corners(fields[0], r)
    coef = 0.0
    for w, frac, sl in corners:
        block = np.stack([f.values[sl].reshape(-1) for f in fields], axis=1)
        coef = coef + w * (_cached_pinv(frac) @ block).T
    h = fields[0].spacing
    out_v, out_g, out_H = [], [], []
    for cf in np.atleast_2d(coef):
        v, g, H = _unpack(cf, h)
        out_v.append(v)
        out_g.append(g)
        out_H.append(H)
    return np.array(out_v), np.array(out_g), np.array(out_H)
