"""Parametric two-layer segmented cantilever trap and its voxelization.

Coordinates: ``x`` runs along the trap axis, ``y`` is the in-plane
transverse direction (north is ``+y``) and ``z`` is normal to the chip.
The two electrode layers sit symmetrically about ``z = 0``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

LAYERS = ("top", "bottom")
SIDES = ("north", "south")

VACUUM = 0
BOUNDARY = 1
ELECTRODE_OFFSET = 2


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryParams:
    """Trap dimensions in metres.

    ``domain`` is ``((xmin, xmax), (ymin, ymax), (zmin, zmax))``; when left as
    ``None`` the smallest box with ``clearance`` (default ``s``) around the
    electrodes is used, rounded outward to whole micrometres.
    """

    s: float = 60e-6
    h: float = 4e-6
    t: float = 2.3e-6
    w: float = 130e-6
    g: float = 25e-6
    n_segments: int = 4
    undercut: float = 15e-6
    cantilever_length: float = 120e-6
    domain: tuple | None = None
    boundary_condition: str = "grounded_box"
    # carried for provenance only, the solver treats electrodes as perfect conductors
    doping_per_m3: float = 3e24

    def __post_init__(self):
        for name in ("s", "h", "t", "w", "cantilever_length"):
            if not getattr(self, name) > 0:
                raise GeometryError(f"{name} must be > 0, got {getattr(self, name)!r}")
        if self.g < 0:
            raise GeometryError(f"g must be >= 0, got {self.g!r}")
        if self.undercut < 0:
            raise GeometryError("undercut must be >= 0")
        if int(self.n_segments) != self.n_segments or self.n_segments < 1:
            raise GeometryError(f"n_segments must be a positive integer, got {self.n_segments!r}")
        if self.n_segments > 1 and self.g == 0:
            raise GeometryError("g = 0 shorts adjacent segments; only allowed for n_segments = 1")
        if self.boundary_condition != "grounded_box":
            raise GeometryError(f"unsupported boundary condition {self.boundary_condition!r}")
        if self.domain is None:
            object.__setattr__(self, "domain", self._default_domain())
        else:
            dom = tuple((float(lo), float(hi)) for lo, hi in self.domain)
            if len(dom) != 3 or any(hi <= lo for lo, hi in dom):
                raise GeometryError(f"bad domain {self.domain!r}")
            object.__setattr__(self, "domain", dom)
        self._check_clearance()

    @property
    def pitch(self) -> float:
        return self.w + self.g

    @property
    def axial_extent(self) -> float:
        return self.n_segments * self.w + (self.n_segments - 1) * self.g

    def electrode_extent(self):
        """Bounding box of all electrodes as ``(lo, hi)`` arrays."""
        half_x = self.axial_extent / 2
        half_y = self.s / 2 + self.cantilever_length
        half_z = self.h / 2 + self.t
        hi = np.array([half_x, half_y, half_z])
        return -hi, hi

    def _default_domain(self, clearance=None):
        clearance = self.s if clearance is None else clearance
        lo, hi = self.electrode_extent()
        um = 1e-6
        half = np.ceil((hi + clearance) / um - 1e-9) * um
        # even number of micrometres keeps 1 and 2 um grids symmetric about 0
        half = np.where(np.round(half / um) % 2 == 1, half + um, half)
        return tuple((-float(v), float(v)) for v in half)

    def _check_clearance(self):
        lo, hi = self.electrode_extent()
        dom = np.array(self.domain)
        tol = 1e-12
        if np.any(dom[:, 0] > lo - self.s + tol) or np.any(dom[:, 1] < hi + self.s - tol):
            raise GeometryError(
                "domain must contain all electrodes with at least s clearance on every side"
            )

    def segment_center(self, k: int) -> float:
        return (k - (self.n_segments - 1) / 2) * self.pitch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = [list(p) for p in self.domain]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeometryParams":
        """Build from a config mapping with unit-suffixed SI keys (``s_m``...)."""
        keymap = {
            "s_m": "s", "h_m": "h", "t_m": "t", "w_m": "w", "g_m": "g",
            "n_segments": "n_segments", "undercut_m": "undercut",
            "cantilever_length_m": "cantilever_length", "domain_m": "domain",
            "boundary_condition": "boundary_condition", "doping_per_m3": "doping_per_m3",
        }
        kwargs = {}
        for key, value in d.items():
            if key not in keymap:
                raise GeometryError(f"unknown geometry key {key!r}")
            kwargs[keymap[key]] = value
        return cls(**kwargs)


@dataclass(frozen=True, order=True)
class ElectrodeLabel:
    segment_index: int
    layer: str
    side: str
    role: str

    @property
    def name(self) -> str:
        return f"seg{self.segment_index}-{self.layer}-{self.side}"


def electrode_id(segment: int, layer: str, side: str) -> int:
    return 4 * segment + 2 * LAYERS.index(layer) + SIDES.index(side)


def is_rf(layer: str, side: str) -> bool:
    # diagonal pattern: top on the north side, bottom on the south side
    return (layer, side) in (("top", "north"), ("bottom", "south"))


@dataclass(frozen=True)
class Box:
    """Axis-aligned solid with closed bounds."""

    lo: tuple
    hi: tuple

    def contains(self, points: np.ndarray, eps: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        lo = np.asarray(self.lo) - eps
        hi = np.asarray(self.hi) + eps
        return np.all((p >= lo) & (p <= hi), axis=-1)

    def intersects(self, other: "Box") -> bool:
        """True when the interiors overlap."""
        return all(a_lo < b_hi and b_lo < a_hi for a_lo, a_hi, b_lo, b_hi
                   in zip(self.lo, self.hi, other.lo, other.hi))


def build_trap(params: GeometryParams) -> list[tuple[ElectrodeLabel, Box]]:
    """Electrode solids ordered by electrode id (``4*segment + 2*layer + side``)."""
    out = []
    s2, h2 = params.s / 2, params.h / 2
    for k in range(params.n_segments):
        xc = params.segment_center(k)
        x_lo, x_hi = xc - params.w / 2, xc + params.w / 2
        for layer in LAYERS:
            z_lo, z_hi = (h2, h2 + params.t) if layer == "top" else (-h2 - params.t, -h2)
            for side in SIDES:
                if side == "north":
                    y_lo, y_hi = s2, s2 + params.cantilever_length
                else:
                    y_lo, y_hi = -s2 - params.cantilever_length, -s2
                role = "rf" if is_rf(layer, side) else "dc"
                label = ElectrodeLabel(k, layer, side, role)
                out.append((label, Box((x_lo, y_lo, z_lo), (x_hi, y_hi, z_hi))))
    boxes = [b for _, b in out]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if boxes[i].intersects(boxes[j]):
                raise GeometryError(f"electrodes {out[i][0].name} and {out[j][0].name} overlap")
    dom = np.array(params.domain)
    for label, b in out:
        if np.any(np.array(b.lo) < dom[:, 0]) or np.any(np.array(b.hi) > dom[:, 1]):
            raise GeometryError(f"electrode {label.name} lies outside the domain")
    return out


@dataclass(frozen=True)
class GridSpec:
    spacing: float
    domain: tuple

    @classmethod
    def for_params(cls, params: GeometryParams, spacing: float = 2e-6) -> "GridSpec":
        return cls(spacing, params.domain)

    @property
    def shape(self) -> tuple:
        return tuple(int(round((hi - lo) / self.spacing)) for lo, hi in self.domain)

    @property
    def origin(self) -> np.ndarray:
        """Centre of voxel (0, 0, 0)."""
        return np.array([lo for lo, _ in self.domain]) + self.spacing / 2


@dataclass(frozen=True, eq=False)
class VoxelMask:
    """Labelled voxel grid; ``labels`` is uint16 with 0 vacuum, 1 boundary,
    ``2 + id`` for electrode ``id``.  ``origin`` is the centre of voxel 0.

    ``solids`` optionally holds the exact :class:`Box` of each electrode.  The
    solver uses it to place electrode surfaces between voxel centres.
    """

    origin: np.ndarray
    spacing: float
    labels: np.ndarray
    electrodes: tuple = field(default=())
    solids: tuple = field(default=())

    def __post_init__(self):
        self.labels.setflags(write=False)

    @property
    def shape(self):
        return self.labels.shape

    @property
    def n_electrodes(self) -> int:
        return len(self.electrodes)

    def coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing * np.arange(self.shape[axis])

    def position(self, index) -> np.ndarray:
        return self.origin + self.spacing * np.asarray(index, dtype=float)

    def index_of(self, r) -> tuple:
        """Index of the voxel containing point ``r``."""
        idx = np.floor((np.asarray(r, float) - self.origin) / self.spacing + 0.5).astype(int)
        return tuple(int(i) for i in idx)

    def electrode_voxels(self, eid: int) -> np.ndarray:
        return self.labels == ELECTRODE_OFFSET + eid

    @property
    def fixed(self) -> np.ndarray:
        return self.labels != VACUUM

    @property
    def rf_ids(self) -> list[int]:
        return [i for i, lab in enumerate(self.electrodes) if lab.role == "rf"]

    @property
    def dc_ids(self) -> list[int]:
        return [i for i, lab in enumerate(self.electrodes) if lab.role == "dc"]

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(np.asarray(self.shape, "<i4").tobytes())
        h.update(np.asarray(self.origin, "<f8").tobytes())
        h.update(np.float64(self.spacing).tobytes())
        h.update(np.ascontiguousarray(self.labels, "<u2").tobytes())
        for b in self.solids:
            h.update(np.asarray([b.lo, b.hi], "<f8").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        write_grid(path, self.origin, self.spacing, self.labels.astype("<u2"))

    @classmethod
    def load(cls, path, electrodes=(), solids=()) -> "VoxelMask":
        origin, spacing, data = read_grid(path, "<u2")
        return cls(origin, spacing, data, tuple(electrodes), tuple(solids))


def index_ranges(box: Box, origin, spacing: float, shape) -> list[tuple[int, int]]:
    """Inclusive voxel index range ``(i0, i1)`` per axis whose centres lie in
    ``box`` (closed bounds), clipped to the grid.  Empty when ``i1 < i0``."""
    eps = 1e-9 * spacing
    out = []
    for ax in range(3):
        i0 = int(np.ceil((box.lo[ax] - eps - origin[ax]) / spacing))
        i1 = int(np.floor((box.hi[ax] + eps - origin[ax]) / spacing))
        out.append((max(i0, 0), min(i1, shape[ax] - 1)))
    return out


def voxelize(solids: Sequence[tuple[ElectrodeLabel, Box]], grid: GridSpec) -> VoxelMask:
    """Label voxels whose centres lie inside a solid (closed bounds)."""
    h = grid.spacing
    shape = grid.shape
    origin = grid.origin
    labels = np.zeros(shape, dtype=np.uint16)
    min_thickness = min(min(np.subtract(b.hi, b.lo)) for _, b in solids)
    if h > min_thickness * (1 + 1e-9):
        raise GeometryError(f"spacing {h:g} exceeds the thinnest electrode dimension {min_thickness:g}")
    for eid, (label, box) in enumerate(solids):
        sl = tuple(slice(i0, i1 + 1) for i0, i1 in index_ranges(box, origin, h, shape))
        region = labels[sl]
        if region.size == 0:
            raise GeometryError(f"electrode {label.name} captured zero voxels")
        if np.any(region != VACUUM):
            raise GeometryError(f"electrode {label.name} overlaps another electrode on the grid")
        region[...] = ELECTRODE_OFFSET + eid
    shell = np.ones(shape, dtype=bool)
    shell[1:-1, 1:-1, 1:-1] = False
    if np.any(labels[shell] != VACUUM):
        raise GeometryError("electrode voxels reach the outer boundary shell")
    labels[shell] = BOUNDARY
    return VoxelMask(origin, h, labels, tuple(lab for lab, _ in solids), tuple(b for _, b in solids))


def paper_mask(spacing: float = 2e-6, params: GeometryParams | None = None) -> VoxelMask:
    params = params or GeometryParams()
    return voxelize(build_trap(params), GridSpec.for_params(params, spacing))


# --- binary grid format -------------------------------------------------------
# little endian: 3 x int32 dims, 3 x float64 origin, float64 spacing, row-major payload

_HEADER = struct.Struct("<3i3dd")


def write_grid(path, origin, spacing, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*data.shape, *map(float, origin), float(spacing)))
        fh.write(data.tobytes(order="C"))


def read_grid(path, dtype: str, mmap: bool = False):
    """Read a grid file; with ``mmap`` the payload is a read-only memory map."""
    with open(path, "rb") as fh:
        nx, ny, nz, ox, oy, oz, h = _HEADER.unpack(fh.read(_HEADER.size))
    n = nx * ny * nz
    size = (Path(path).stat().st_size - _HEADER.size) // np.dtype(dtype).itemsize
    if size != n:
        raise ValueError(f"{path}: payload has {size} values, header says {n}")
    if mmap:
        data = np.memmap(path, dtype=dtype, mode="r", offset=_HEADER.size, shape=(nx, ny, nz))
    else:
        data = np.fromfile(path, dtype=dtype, offset=_HEADER.size).reshape(nx, ny, nz)
    return np.array([ox, oy, oz]), h, data


def load_params(path) -> GeometryParams:
    return GeometryParams.from_dict(json.loads(Path(path).read_text()))
