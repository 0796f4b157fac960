import numpy as np
import pytest

from microtrap.geometry import (BOUNDARY, ELECTRODE_OFFSET, VACUUM, Box, ElectrodeLabel, GeometryError,
                                GeometryParams, GridSpec, VoxelMask, build_trap, electrode_id,
                                paper_mask, read_grid, voxelize, write_grid)


def brute_force_labels(solids, grid):
    """Point-in-solid test of every voxel centre, independent of the slicing in voxelize."""
    axes = [grid.origin[a] + grid.spacing * np.arange(n) for a, n in enumerate(grid.shape)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    labels = np.zeros(grid.shape, np.uint16)
    for eid, (_, box) in enumerate(solids):
        labels[box.contains(pts, eps=1e-9 * grid.spacing)] = ELECTRODE_OFFSET + eid
    shell = np.ones(grid.shape, bool)
    shell[1:-1, 1:-1, 1:-1] = False
    labels[shell] = BOUNDARY
    return labels


def test_paper_electrode_count_and_extent():
    p = GeometryParams()
    solids = build_trap(p)
    assert len(solids) == 16
    assert p.axial_extent == pytest.approx(595e-6)
    xs = [b.lo[0] for _, b in solids] + [b.hi[0] for _, b in solids]
    assert max(xs) - min(xs) == pytest.approx(595e-6)


def test_seven_segments():
    assert len(build_trap(GeometryParams(n_segments=7))) == 28


def test_single_segment_without_gap():
    solids = build_trap(GeometryParams(g=0.0, n_segments=1))
    assert len(solids) == 4
    assert {lab.role for lab, _ in solids} == {"rf", "dc"}


def test_zero_gap_with_several_segments_rejected():
    with pytest.raises(GeometryError):
        GeometryParams(g=0.0, n_segments=2)


@pytest.mark.parametrize("kw", [dict(s=0.0), dict(w=-1e-6), dict(n_segments=0), dict(g=-1e-6),
                                dict(boundary_condition="periodic")])
def test_invalid_params(kw):
    with pytest.raises(GeometryError):
        GeometryParams(**kw)


def test_domain_without_clearance_rejected():
    # a 700 x 300 x 200 um box leaves less than s around the 595 um electrode stack
    dom = ((-350e-6, 350e-6), (-150e-6, 150e-6), (-100e-6, 100e-6))
    with pytest.raises(GeometryError):
        GeometryParams(domain=dom)


def test_electrode_ids_and_rf_pattern():
    solids = build_trap(GeometryParams())
    for eid, (lab, _) in enumerate(solids):
        assert electrode_id(lab.segment_index, lab.layer, lab.side) == eid
    rf = [eid for eid, (lab, _) in enumerate(solids) if lab.role == "rf"]
    assert rf == [0, 3, 4, 7, 8, 11, 12, 15]


def test_voxelize_matches_point_scan(small_params):
    solids = build_trap(small_params)
    grid = GridSpec.for_params(small_params, 2e-6)
    mask = voxelize(solids, grid)
    np.testing.assert_array_equal(mask.labels, brute_force_labels(solids, grid))
    for eid in range(len(solids)):
        assert mask.electrode_voxels(eid).sum() > 0


def test_paper_mask_gap_width():
    mask = paper_mask(2e-6)
    p = GeometryParams()
    assert mask.shape == (358, 210, 66)
    assert set(np.unique(mask.labels)) == {VACUUM, BOUNDARY} | {ELECTRODE_OFFSET + i for i in range(16)}
    # across the gap at a zone centre, in the top electrode layer
    ix, _, iz = mask.index_of((p.segment_center(1), 0.0, p.h / 2 + p.t / 2))
    row = mask.labels[ix, :, iz]
    elec = np.flatnonzero(row >= ELECTRODE_OFFSET)
    inner = elec[elec < mask.shape[1] // 2].max(), elec[elec > mask.shape[1] // 2].min()
    gap = inner[1] - inner[0] - 1
    assert np.all(row[inner[0] + 1:inner[1]] == VACUUM)
    assert gap == pytest.approx(p.s / 2e-6, abs=1)


def test_unit_cube_on_voxel_centre():
    h = 1e-6
    grid = GridSpec(h, ((-5e-6, 5e-6),) * 3)
    c = grid.origin + 5 * h
    box = Box(tuple(c - h / 2), tuple(c + h / 2))
    mask = voxelize([(ElectrodeLabel(0, "top", "north", "dc"), box)], grid)
    assert mask.electrode_voxels(0).sum() == 1


def test_refinement_scales_counts_by_eight():
    coarse, fine = paper_mask(2e-6), paper_mask(1e-6)
    for eid in range(16):
        ratio = fine.electrode_voxels(eid).sum() / coarse.electrode_voxels(eid).sum()
        assert ratio == pytest.approx(8.0, rel=0.05)


def test_mirror_symmetry():
    mask = paper_mask(2e-6)
    flipped = mask.labels[:, ::-1, ::-1]
    # (k, top, north) <-> (k, bottom, south) and (k, top, south) <-> (k, bottom, north)
    swap = {eid: 4 * (eid // 4) + 3 - eid % 4 for eid in range(16)}
    mapped = mask.labels.copy()
    for a, b in swap.items():
        mapped[mask.labels == ELECTRODE_OFFSET + a] = ELECTRODE_OFFSET + b
    np.testing.assert_array_equal(mapped, flipped)


def test_spacing_coarser_than_electrode_rejected():
    with pytest.raises(GeometryError):
        paper_mask(4e-6)


def test_grid_file_round_trip(tmp_path, rng):
    data = rng.normal(size=(4, 5, 6))
    p = tmp_path / "a.grid"
    write_grid(p, (1.0, 2.0, 3.0), 0.5, data)
    for mm in (False, True):
        origin, h, out = read_grid(p, "<f8", mmap=mm)
        np.testing.assert_array_equal(origin, [1.0, 2.0, 3.0])
        assert h == 0.5
        np.testing.assert_array_equal(np.asarray(out), data)


def test_grid_file_size_check(tmp_path):
    p = tmp_path / "b.grid"
    write_grid(p, (0, 0, 0), 1.0, np.zeros((2, 2, 2)))
    with open(p, "ab") as fh:
        fh.write(b"\0" * 8)
    with pytest.raises(ValueError):
        read_grid(p, "<f8")


def test_mask_save_load(tmp_path, small_mask):
    p = tmp_path / "m.grid"
    small_mask.save(p)
    back = VoxelMask.load(p, small_mask.electrodes, small_mask.solids)
    assert back.digest() == small_mask.digest()
