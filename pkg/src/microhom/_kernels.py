"""Hot loops, each in a numba version and a plain numpy version.

The numba path is used when numba imports and ``MICROHOM_BACKEND`` is not
``numpy``.  Both paths compute every output entry independently and reduce
partial sums in a fixed order, so results do not depend on the thread count.
The two backends may differ from each other in the last few bits.
"""
import os

import numpy as np

# the TBB layer shipped with some numba wheels is too old; OpenMP works everywhere
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA and os.environ.get("MICROHOM_BACKEND", "numba").lower() != "numpy" else "numpy"


def set_threads(n):
    """Set the numba worker count (no-op for the numpy backend)."""
    if HAVE_NUMBA and n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# numpy reference implementations


def _np_edge_apply(phi, w0, w1, w2, inv_h2):
    # sum_j D_j^T (W_j D_j phi) with periodic forward differences
    out = np.zeros_like(phi)
    for ax, w in enumerate((w0, w1, w2)):
        flux = w * (np.roll(phi, -1, axis=ax) - phi)
        out += np.roll(flux, 1, axis=ax) - flux
    return out * inv_h2


def _np_edge_sums(u, a0, a1, a2, b0, b1, b2):
    """Weighted sums of |u(p+e_j)-u(p)|^2 over non-wrapping edges."""
    res = np.zeros(2)
    for ax, (wa, wb) in enumerate(((a0, b0), (a1, b1), (a2, b2))):
        hi = [slice(None)] * 3
        lo = [slice(None)] * 3
        hi[ax] = slice(1, None)
        lo[ax] = slice(None, -1)
        d = u[tuple(hi)] - u[tuple(lo)]
        sq = np.sum(d * d, axis=-1)
        res[0] += np.sum(wa[tuple(lo)] * sq)
        res[1] += np.sum(wb[tuple(lo)] * sq)
    return res


def _np_shift_margins(v, shifts):
    out = np.empty(shifts.shape[0])
    for t in range(shifts.shape[0]):
        d = v - shifts[t]
        out[t] = np.sqrt(np.min(np.sum(d * d, axis=1))) if v.shape[0] else np.inf
    return out


def _np_radial_project(v, a, radius, hmin):
    # ray from a through v, intersected with the centred sphere of given radius
    d = v - a
    dist = np.sqrt(np.sum(d * d, axis=1))
    singular = dist < hmin
    safe = np.where(dist > 0, dist, 1.0)
    e = d / safe[:, None]
    e[dist == 0] = np.array([0.0, 0.0, 1.0])
    ae = e @ a
    t = -ae + np.sqrt(ae * ae - a @ a + radius * radius)
    y = a + t[:, None] * e
    m = y / np.sqrt(np.sum(y * y, axis=1))[:, None]
    return m, singular


# ---------------------------------------------------------------------------
# numba versions

if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _nb_edge_apply(phi, w0, w1, w2, inv_h2):
        n0, n1, n2 = phi.shape
        out = np.empty_like(phi)
        for i in prange(n0):
            ip = (i + 1) % n0
            im = (i - 1) % n0
            for j in range(n1):
                jp = (j + 1) % n1
                jm = (j - 1) % n1
                for k in range(n2):
                    kp = (k + 1) % n2
                    km = (k - 1) % n2
                    c = phi[i, j, k]
                    acc = w0[im, j, k] * (c - phi[im, j, k]) - w0[i, j, k] * (phi[ip, j, k] - c)
                    acc += w1[i, jm, k] * (c - phi[i, jm, k]) - w1[i, j, k] * (phi[i, jp, k] - c)
                    acc += w2[i, j, km] * (c - phi[i, j, km]) - w2[i, j, k] * (phi[i, j, kp] - c)
                    out[i, j, k] = acc * inv_h2
        return out

    @njit(parallel=True, cache=True)
    def _nb_edge_sums(u, a0, a1, a2, b0, b1, b2):
        n0, n1, n2, nc = u.shape
        part = np.zeros((n0, 2))
        for i in prange(n0):
            sa = 0.0
            sb = 0.0
            for j in range(n1):
                for k in range(n2):
                    if i + 1 < n0:
                        q = 0.0
                        for c in range(nc):
                            d = u[i + 1, j, k, c] - u[i, j, k, c]
                            q += d * d
                        sa += a0[i, j, k] * q
                        sb += b0[i, j, k] * q
                    if j + 1 < n1:
                        q = 0.0
                        for c in range(nc):
                            d = u[i, j + 1, k, c] - u[i, j, k, c]
                            q += d * d
                        sa += a1[i, j, k] * q
                        sb += b1[i, j, k] * q
                    if k + 1 < n2:
                        q = 0.0
                        for c in range(nc):
                            d = u[i, j, k + 1, c] - u[i, j, k, c]
                            q += d * d
                        sa += a2[i, j, k] * q
                        sb += b2[i, j, k] * q
            part[i, 0] = sa
            part[i, 1] = sb
        res = np.zeros(2)
        for i in range(n0):
            res[0] += part[i, 0]
            res[1] += part[i, 1]
        return res

    @njit(parallel=True, cache=True)
    def _nb_shift_margins(v, shifts):
        nt = shifts.shape[0]
        npt = v.shape[0]
        out = np.empty(nt)
        for t in prange(nt):
            best = np.inf
            for p in range(npt):
                d0 = v[p, 0] - shifts[t, 0]
                d1 = v[p, 1] - shifts[t, 1]
                d2 = v[p, 2] - shifts[t, 2]
                q = d0 * d0 + d1 * d1 + d2 * d2
                if q < best:
                    best = q
            out[t] = np.sqrt(best)
        return out

    @njit(parallel=True, cache=True)
    def _nb_radial_project(v, a, radius, hmin):
        npt = v.shape[0]
        m = np.empty((npt, 3))
        singular = np.zeros(npt, dtype=np.bool_)
        aa = a[0] * a[0] + a[1] * a[1] + a[2] * a[2]
        for p in prange(npt):
            d0 = v[p, 0] - a[0]
            d1 = v[p, 1] - a[1]
            d2 = v[p, 2] - a[2]
            dist = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            singular[p] = dist < hmin
            if dist > 0.0:
                e0 = d0 / dist
                e1 = d1 / dist
                e2 = d2 / dist
            else:
                e0 = 0.0
                e1 = 0.0
                e2 = 1.0
            ae = e0 * a[0] + e1 * a[1] + e2 * a[2]
            t = -ae + np.sqrt(ae * ae - aa + radius * radius)
            y0 = a[0] + t * e0
            y1 = a[1] + t * e1
            y2 = a[2] + t * e2
            ny = np.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
            m[p, 0] = y0 / ny
            m[p, 1] = y1 / ny
            m[p, 2] = y2 / ny
        return m, singular


numpy_impl = {
    "edge_apply": _np_edge_apply,
    "edge_sums": _np_edge_sums,
    "shift_margins": _np_shift_margins,
    "radial_project": _np_radial_project,
}
numba_impl = (
    {
        "edge_apply": _nb_edge_apply,
        "edge_sums": _nb_edge_sums,
        "shift_margins": _nb_shift_margins,
        "radial_project": _nb_radial_project,
    }
    if HAVE_NUMBA
    else dict(numpy_impl)
)

_active = numba_impl if BACKEND == "numba" else numpy_impl


def edge_apply(phi, w0, w1, w2, inv_h2):
    """Weighted periodic forward-difference Laplacian ``sum_j D_j^T W_j D_j``."""
    return _active["edge_apply"](
        np.ascontiguousarray(phi, dtype=np.float64),
        np.ascontiguousarray(w0, dtype=np.float64),
        np.ascontiguousarray(w1, dtype=np.float64),
        np.ascontiguousarray(w2, dtype=np.float64),
        float(inv_h2),
    )


def edge_sums(u, wa, wb):
    """Two weighted sums of squared edge increments of ``u`` (no wrap-around).

    ``wa[j]``, ``wb[j]`` weight the edges (p, p+e_j); their shape matches ``u``
    without the component axis, the last slab along axis j being ignored.
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    w = [np.ascontiguousarray(x, dtype=np.float64) for x in list(wa) + list(wb)]
    return _active["edge_sums"](u, *w)


def shift_margins(v, shifts):
    """For each candidate shift a, ``min_p |v_p - a|`` over the point cloud ``v``."""
    return _active["shift_margins"](
        np.ascontiguousarray(v, dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(shifts, dtype=np.float64).reshape(-1, 3),
    )


def radial_project(v, a, radius, hmin):
    """Unit vectors along the ray from ``a`` through ``v`` hitting |y| = radius.

    Also returns a flag for points closer than ``hmin`` to ``a``.
    """
    v = np.ascontiguousarray(v, dtype=np.float64).reshape(-1, 3)
    return _active["radial_project"](v, np.ascontiguousarray(a, dtype=np.float64), float(radius), float(hmin))
