"""Compiled stencil kernels on cell-centred grids.

All kernels skip the outermost shell, which is always Dirichlet.  ``fixed``
marks Dirichlet voxels; free voxels obey the 7-point Laplacian.  Voxels next
to an electrode surface that lies between voxel centres carry an index
``n = cut[i, j, k] >= 0`` into ``D`` (diagonal, the sum of link weights) and
``E`` (Dirichlet data reached through the reweighted links beyond the plain
neighbour sum).  ``cut < 0`` means the plain stencil with diagonal 6.
"""
import numba as nb

_opts = dict(cache=True, nogil=True, fastmath=False)


@nb.njit(**_opts)
def sor_sweep(phi, fixed, cut, D, E, color, omega):
    nx, ny, nz = phi.shape
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            k0 = 1 + ((i + j + 1 + color) & 1)
            for k in range(k0, nz - 1, 2):
                if fixed[i, j, k]:
                    continue
                s = (phi[i - 1, j, k] + phi[i + 1, j, k] + phi[i, j - 1, k]
                     + phi[i, j + 1, k] + phi[i, j, k - 1] + phi[i, j, k + 1])
                n = cut[i, j, k]
                if n < 0:
                    t = s / 6.0
                else:
                    t = (s + E[n]) / D[n]
                phi[i, j, k] += omega * (t - phi[i, j, k])


@nb.njit(**_opts)
def gs_sweep_rhs(x, b, fixed, cut, D, color, h2):
    """Gauss-Seidel on ``(d x - sum nb) / h2 = b`` for one colour."""
    nx, ny, nz = x.shape
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            k0 = 1 + ((i + j + 1 + color) & 1)
            for k in range(k0, nz - 1, 2):
                if fixed[i, j, k]:
                    continue
                s = (x[i - 1, j, k] + x[i + 1, j, k] + x[i, j - 1, k]
                     + x[i, j + 1, k] + x[i, j, k - 1] + x[i, j, k + 1])
                n = cut[i, j, k]
                d = 6.0 if n < 0 else D[n]
                x[i, j, k] = (s + h2 * b[i, j, k]) / d


@nb.njit(**_opts)
def laplace_residual(phi, fixed, cut, D, E, out):
    """``out = sum nb + e - d phi`` on free voxels, 0 elsewhere.

    Returns the largest residual relative to the diagonal, ``max |out| / d``.
    """
    nx, ny, nz = phi.shape
    rmax = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if fixed[i, j, k] or i == 0 or j == 0 or k == 0 or i == nx - 1 or j == ny - 1 or k == nz - 1:
                    out[i, j, k] = 0.0
                    continue
                s = (phi[i - 1, j, k] + phi[i + 1, j, k] + phi[i, j - 1, k]
                     + phi[i, j + 1, k] + phi[i, j, k - 1] + phi[i, j, k + 1])
                n = cut[i, j, k]
                if n < 0:
                    d = 6.0
                else:
                    d = D[n]
                    s += E[n]
                r = s - d * phi[i, j, k]
                out[i, j, k] = r
                a = abs(r) / d
                if a > rmax:
                    rmax = a
    return rmax


@nb.njit(**_opts)
def apply_operator(x, fixed, cut, D, out):
    """``out = d x - sum nb`` on free voxels (x is zero on fixed voxels)."""
    nx, ny, nz = x.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if fixed[i, j, k] or i == 0 or j == 0 or k == 0 or i == nx - 1 or j == ny - 1 or k == nz - 1:
                    out[i, j, k] = 0.0
                    continue
                s = (x[i - 1, j, k] + x[i + 1, j, k] + x[i, j - 1, k]
                     + x[i, j + 1, k] + x[i, j, k - 1] + x[i, j, k + 1])
                n = cut[i, j, k]
                d = 6.0 if n < 0 else D[n]
                out[i, j, k] = d * x[i, j, k] - s


@nb.njit(**_opts)
def residual_rhs(x, b, fixed, cut, D, h2, out):
    nx, ny, nz = x.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if fixed[i, j, k] or i == 0 or j == 0 or k == 0 or i == nx - 1 or j == ny - 1 or k == nz - 1:
                    out[i, j, k] = 0.0
                    continue
                s = (x[i - 1, j, k] + x[i + 1, j, k] + x[i, j - 1, k]
                     + x[i, j + 1, k] + x[i, j, k - 1] + x[i, j, k + 1])
                n = cut[i, j, k]
                d = 6.0 if n < 0 else D[n]
                out[i, j, k] = b[i, j, k] - (d * x[i, j, k] - s) / h2


@nb.njit(**_opts)
def restrict(fine, coarse):
    """Sum of the (up to) eight children divided by eight."""
    coarse[:] = 0.0
    nx, ny, nz = fine.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                coarse[i >> 1, j >> 1, k >> 1] += fine[i, j, k]
    coarse *= 0.125


@nb.njit(**_opts)
def prolong_add(coarse, fine, fixed):
    nx, ny, nz = fine.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if not fixed[i, j, k]:
                    fine[i, j, k] += coarse[i >> 1, j >> 1, k >> 1]


@nb.njit(**_opts)
def coarsen_fixed(fine, coarse):
    coarse[:] = False
    nx, ny, nz = fine.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if fine[i, j, k]:
                    coarse[i >> 1, j >> 1, k >> 1] = True
    cx, cy, cz = coarse.shape
    for i in range(cx):
        for j in range(cy):
            for k in range(cz):
                if i == 0 or j == 0 or k == 0 or i == cx - 1 or j == cy - 1 or k == cz - 1:
                    coarse[i, j, k] = True


@nb.njit(**_opts)
def dot_free(a, b, fixed):
    acc = 0.0
    nx, ny, nz = a.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if not fixed[i, j, k]:
                    acc += a[i, j, k] * b[i, j, k]
    return acc


@nb.njit(**_opts)
def axpy(alpha, x, y):
    """y += alpha x (in place)."""
    fx = x.ravel()
    fy = y.ravel()
    for n in range(fx.size):
        fy[n] += alpha * fx[n]


@nb.njit(**_opts)
def xpby(x, beta, y):
    """y = x + beta y (in place)."""
    fx = x.ravel()
    fy = y.ravel()
    for n in range(fx.size):
        fy[n] = fx[n] + beta * fy[n]


@nb.njit(**_opts)
def clip_free(phi, fixed, lo, hi):
    nx, ny, nz = phi.shape
    n = 0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if fixed[i, j, k]:
                    continue
                v = phi[i, j, k]
                if v < lo:
                    phi[i, j, k] = lo
                    n += 1
                elif v > hi:
                    phi[i, j, k] = hi
                    n += 1
    return n
