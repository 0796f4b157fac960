import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microtrap import reproduce as R
from microtrap.fields import (GridField, SampleError, SolverError, iter_bases, sample, sample_many,
                              solve_basis, solve_dirichlet, superpose)
from microtrap.geometry import VACUUM, Box, ElectrodeLabel, GridSpec, voxelize


def grid_field(fn, n=21, h=1e-6, mask=None):
    origin = -h * (n // 2) * np.ones(3)
    x = origin[0] + h * np.arange(n)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    return GridField(fn(X, Y, Z), origin, h, mask)


# --- sampling ---------------------------------------------------------------

def test_sample_saddle_quadratic():
    f = grid_field(lambda x, y, z: (x ** 2 - y ** 2) / 1e-12)
    s = sample(f, (0.3e-6, -0.7e-6, 0.2e-6))
    np.testing.assert_allclose(s.hessian, np.diag([2, -2, 0]) / 1e-12, atol=1e-6 / 1e-12)
    np.testing.assert_allclose(s.gradient, [0.6e-6 / 1e-12, 1.4e-6 / 1e-12, 0], rtol=1e-9, atol=1e-3)


def test_sample_constant():
    s = sample(grid_field(lambda x, y, z: 3.5 + 0 * x), (0.1e-6, 0.2e-6, -0.4e-6))
    assert s.value == pytest.approx(3.5)
    np.testing.assert_allclose(s.gradient, 0, atol=1e-6)
    np.testing.assert_allclose(s.hessian, 0, atol=1e-1)


coef = st.floats(-2, 2, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.lists(coef, min_size=10, max_size=10), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_sample_exact_for_quadratics(c, r):
    h = 1e-6

    def fn(x, y, z):
        x, y, z = x / h, y / h, z / h
        return (c[0] + c[1] * x + c[2] * y + c[3] * z + c[4] * x * x + c[5] * y * y + c[6] * z * z
                + c[7] * x * y + c[8] * x * z + c[9] * y * z)

    r = np.array(r) * h
    s = sample(grid_field(fn), r)
    x, y, z = r / h
    g = np.array([c[1] + 2 * c[4] * x + c[7] * y + c[8] * z,
                  c[2] + 2 * c[5] * y + c[7] * x + c[9] * z,
                  c[3] + 2 * c[6] * z + c[8] * x + c[9] * y]) / h
    H = np.array([[2 * c[4], c[7], c[8]], [c[7], 2 * c[5], c[9]], [c[8], c[9], 2 * c[6]]]) / h ** 2
    assert s.value == pytest.approx(fn(*r), abs=1e-9)
    np.testing.assert_allclose(s.gradient, g, atol=1e-8 / h)
    np.testing.assert_allclose(s.hessian, H, atol=1e-8 / h ** 2)
    np.testing.assert_allclose(s.hessian, s.hessian.T)


def test_sample_is_continuous_across_voxel_faces():
    f = grid_field(lambda x, y, z: np.sin(x / 3e-6) * np.cos(y / 4e-6) * np.exp(z / 5e-6))
    for x in (0.0, 0.5e-6):
        a = sample(f, (x - 1e-16, 0.2e-6, 0.1e-6))
        b = sample(f, (x + 1e-16, 0.2e-6, 0.1e-6))
        assert abs(a.value - b.value) < 1e-9
    np.testing.assert_allclose(a.hessian, b.hessian, rtol=1e-5)


def test_sample_many_matches_sample():
    fs = [grid_field(lambda x, y, z, k=k: np.cos(k * x / 4e-6 + y / 5e-6) + z / 1e-6) for k in range(3)]
    r = (0.4e-6, -1.1e-6, 0.3e-6)
    v, g, H = sample_many(fs, r)
    for i, f in enumerate(fs):
        s = sample(f, r)
        assert v[i] == pytest.approx(s.value)
        np.testing.assert_allclose(g[i], s.gradient, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(H[i], s.hessian, rtol=1e-9, atol=1e-3)


def test_sample_rejects_electrode_point(small_bases):
    f = small_bases[0].field
    lab = small_bases.mask.labels
    idx = np.argwhere(lab == lab.max())[0]
    with pytest.raises(SampleError):
        sample(f, small_bases.mask.position(idx))


# --- solver -----------------------------------------------------------------

def test_parallel_plate_linear():
    assert R.parallel_plate_error(1e-7) < 0.01


def offset_plates():
    """Wide plates whose inner faces (z = 3.6 and 17.6) fall between voxel centres."""
    solids = [(ElectrodeLabel(0, "bottom", "plate", "dc"), Box((1, 1, 2.3), (199, 199, 3.6))),
              (ElectrodeLabel(0, "top", "plate", "dc"), Box((1, 1, 17.6), (199, 199, 19.0)))]
    return voxelize(solids, GridSpec(1.0, ((0, 200), (0, 200), (0, 23))))


@pytest.mark.parametrize("method", ["mg", "sor"])
def test_cut_cells_place_surfaces_between_centres(method):
    m = offset_plates()
    z = m.coords(2)
    gap = (z > 3.6) & (z < 17.6)
    exact = 1 - (z[gap] - 3.6) / 14.0
    phi, *_ = solve_dirichlet(m, [1.0, 0.0], tol=1e-10, method=method)
    # the linear profile is reproduced exactly by the reweighted links
    assert np.abs(phi[100, 100, gap] - exact).max() < 1e-6
    plain, *_ = solve_dirichlet(m, [1.0, 0.0], tol=1e-10, method=method, cut_cells=False)
    # surfaces on the voxel centres widen the gap by almost a voxel
    assert np.abs(plain[100, 100, gap] - exact).max() > 0.03
    assert phi.min() >= 0 and phi.max() <= 1


def test_maximum_principle(small_bases):
    assert R.maximum_principle_ok(small_bases)


def test_center_values_bounded(small_bases):
    vals = R.center_values(small_bases)
    assert np.all((vals > 0) & (vals < 1))
    assert vals.sum() < 1


def test_superposition_matches_direct_solve(small_bases, rng):
    tol = 1e-7
    volts = rng.uniform(-2, 2, small_bases.mask.n_electrodes)
    assert R.superposition_error(small_bases, list(volts), tol) <= 10 * tol


def test_linearity(small_bases):
    m = small_bases.mask
    v = np.zeros(m.n_electrodes)
    v[5] = 1.0
    a, *_ = solve_dirichlet(m, v, tol=1e-9)
    b, *_ = solve_dirichlet(m, 2.5 * v, tol=1e-9)
    np.testing.assert_allclose(b, 2.5 * a, atol=1e-7)


def test_zero_voltages_zero_field(small_mask):
    phi, res, it, _ = solve_dirichlet(small_mask, np.zeros(small_mask.n_electrodes))
    assert not phi.any() and res == 0


def test_symmetry_of_bases(small_bases):
    # (k, top, north) under (y, z) -> (-y, -z) is (k, bottom, south)
    n = small_bases.mask.n_electrodes
    for eid in range(n):
        partner = 4 * (eid // 4) + 3 - eid % 4
        a = np.asarray(small_bases[eid].values)
        b = np.asarray(small_bases[partner].values)[:, ::-1, ::-1]
        assert np.max(np.abs(a - b)) < 1e-5


def test_sor_and_multigrid_agree(small_mask):
    a = solve_basis(small_mask, 2, tol=1e-8, method="mg").values
    b = solve_basis(small_mask, 2, tol=1e-8, method="sor").values
    assert np.max(np.abs(a - b)) < 1e-5


def test_nonconvergence_carries_history(small_mask):
    v = np.zeros(small_mask.n_electrodes)
    v[0] = 1.0
    with pytest.raises(SolverError) as exc:
        solve_dirichlet(small_mask, v, tol=1e-12, method="sor", max_iter=20)
    assert len(exc.value.residual_history) > 0


def test_bad_inputs(small_mask):
    with pytest.raises(ValueError):
        solve_dirichlet(small_mask, np.ones(3))
    with pytest.raises(ValueError):
        solve_dirichlet(small_mask, np.ones(small_mask.n_electrodes), tol=0)
    with pytest.raises(KeyError):
        solve_basis(small_mask, 99)


def test_laplacian_trace_small(small_bases):
    vac = small_bases.mask.labels == VACUUM
    f = small_bases[1].field
    r = (0.0, 0.0, 0.0)
    assert vac[small_bases.mask.index_of(r)]
    H = sample(f, r).hessian
    assert abs(np.trace(H)) < 0.05 * np.max(np.abs(np.linalg.eigvalsh(H)))


def test_iter_bases_streams_same_solution(small_mask, small_bases):
    first = next(iter_bases(small_mask, 1e-7))
    np.testing.assert_allclose(first.values, small_bases[0].values, atol=1e-6)


def test_superpose_sequence_and_mapping(small_bases):
    n = small_bases.mask.n_electrodes
    v = np.arange(n, dtype=float)
    a = superpose(small_bases, v).values
    b = superpose(small_bases, {i: float(i) for i in range(n)}).values
    np.testing.assert_allclose(a, b)
    with pytest.raises(ValueError):
        superpose(small_bases, [1.0])


def test_paper_axial_single_minimum(bases, drive):
    """Static potential along the axis has one interior minimum inside the active zone."""
    dc = bases.dc_field(drive.dc_voltages)
    xc = -77.5e-6
    pts, vals = dc.line_scan((xc - 150e-6, 0, 0), (xc + 150e-6, 0, 0), 301)
    i = np.argmin(vals)
    assert abs(pts[i, 0] - xc) < 3e-6
    d = np.diff(vals)
    assert np.all(d[:i - 1] < 0) and np.all(d[i + 1:] > 0)
