"""Hot numeric kernels: clamped box sums and gradient magnitude on 3D grids.

Two interchangeable backends:

* numba ``@njit`` loops (default when numba imports cleanly), and
* a pure-numpy fallback built from shifted-slice accumulation.

Set ``PLEXFED_NO_NUMBA=1`` to force the numpy path. Both backends accumulate
in the same per-voxel order, so their float64 outputs are bit-identical —
``benchmarks/bench_kernels.py`` checks this and times them against each other.

Window semantics: a cubic window of radius ``r`` with edge clamping, i.e.
out-of-range indices are clamped to the grid boundary, so every window holds
exactly ``(2r+1)**3`` samples (boundary voxels are sampled repeatedly at the
edges). Gradients are central differences with the same index clamping.
"""

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False


def _numba_disabled() -> bool:
    return os.environ.get("PLEXFED_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")


USE_NUMBA = _HAVE_NUMBA and not _numba_disabled()


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------
def _boxsum_axis_numpy(a: np.ndarray, r: int, axis: int) -> np.ndarray:
    """Sum over a clamped window of size 2r+1 along one axis.

    Accumulates window offsets in ascending order; the numba twin does the
    same per voxel, which keeps the two backends bit-identical.
    """
    n = a.shape[axis]
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    padded = np.pad(a, pad, mode="edge")
    out = np.zeros_like(a)
    index = [slice(None)] * a.ndim
    for d in range(2 * r + 1):
        index[axis] = slice(d, d + n)
        out += padded[tuple(index)]
    return out


def box_sums_numpy(vol: np.ndarray, r: int) -> np.ndarray:
    """Separable clamped box sum over a cubic window of radius r."""
    out = np.ascontiguousarray(vol, dtype=np.float64)
    for axis in range(3):
        out = _boxsum_axis_numpy(out, r, axis)
    return out


def gradient_magnitude_numpy(vol: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude with index clamping at edges."""
    a = np.ascontiguousarray(vol, dtype=np.float64)
    p = np.pad(a, 1, mode="edge")
    gx = (p[2:, 1:-1, 1:-1] - p[:-2, 1:-1, 1:-1]) * 0.5
    gy = (p[1:-1, 2:, 1:-1] - p[1:-1, :-2, 1:-1]) * 0.5
    gz = (p[1:-1, 1:-1, 2:] - p[1:-1, 1:-1, :-2]) * 0.5
    return np.sqrt(gx * gx + gy * gy + gz * gz)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------
if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _boxsum_axis0_nb(a, r):
        nx, ny, nz = a.shape
        out = np.zeros_like(a)
        for d in range(-r, r + 1):
            for x in range(nx):
                xi = x + d
                if xi < 0:
                    xi = 0
                elif xi >= nx:
                    xi = nx - 1
                for y in range(ny):
                    for z in range(nz):
                        out[x, y, z] += a[xi, y, z]
        return out

    @numba.njit(cache=True)
    def _boxsum_axis1_nb(a, r):
        nx, ny, nz = a.shape
        out = np.zeros_like(a)
        for d in range(-r, r + 1):
            for x in range(nx):
                for y in range(ny):
                    yi = y + d
                    if yi < 0:
                        yi = 0
                    elif yi >= ny:
                        yi = ny - 1
                    for z in range(nz):
                        out[x, y, z] += a[x, yi, z]
        return out

    @numba.njit(cache=True)
    def _boxsum_axis2_nb(a, r):
        nx, ny, nz = a.shape
        out = np.zeros_like(a)
        for d in range(-r, r + 1):
            for x in range(nx):
                for y in range(ny):
                    for z in range(nz):
                        zi = z + d
                        if zi < 0:
                            zi = 0
                        elif zi >= nz:
                            zi = nz - 1
                        out[x, y, z] += a[x, y, zi]
        return out

    @numba.njit(cache=True)
    def _gradient_magnitude_nb(a):
        nx, ny, nz = a.shape
        out = np.empty_like(a)
        for x in range(nx):
            xp = x + 1 if x + 1 < nx else nx - 1
            xm = x - 1 if x - 1 >= 0 else 0
            for y in range(ny):
                yp = y + 1 if y + 1 < ny else ny - 1
                ym = y - 1 if y - 1 >= 0 else 0
                for z in range(nz):
                    zp = z + 1 if z + 1 < nz else nz - 1
                    zm = z - 1 if z - 1 >= 0 else 0
                    gx = (a[xp, y, z] - a[xm, y, z]) * 0.5
                    gy = (a[x, yp, z] - a[x, ym, z]) * 0.5
                    gz = (a[x, y, zp] - a[x, y, zm]) * 0.5
                    out[x, y, z] = np.sqrt(gx * gx + gy * gy + gz * gz)
        return out

    def box_sums_numba(vol: np.ndarray, r: int) -> np.ndarray:
        a = np.ascontiguousarray(vol, dtype=np.float64)
        a = _boxsum_axis0_nb(a, r)
        a = _boxsum_axis1_nb(a, r)
        a = _boxsum_axis2_nb(a, r)
        return a

    def gradient_magnitude_numba(vol: np.ndarray) -> np.ndarray:
        return _gradient_magnitude_nb(np.ascontiguousarray(vol, dtype=np.float64))

else:  # pragma: no cover
    box_sums_numba = None
    gradient_magnitude_numba = None


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------
if USE_NUMBA:
    box_sums = box_sums_numba
    gradient_magnitude = gradient_magnitude_numba
else:
    box_sums = box_sums_numpy
    gradient_magnitude = gradient_magnitude_numpy


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
