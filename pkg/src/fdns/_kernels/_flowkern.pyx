# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled particle kernels.

Byte-for-byte mirror of `fdns._kernels.fallback`: the floating-point
expression trees are identical and the extension is compiled without FMA
contraction, so compiled and pure-python backends produce identical
trajectories and moments. Any semantic change must be made in both files.
"""

from libc.math cimport floor, isfinite
from libc.stdlib cimport free, malloc

import numpy as np


cdef inline long _wrap_cell(double xv, long n, double nd,
                            double *frac) nogil:
    # u = x - floor(x) in [0, 1); cell = int(u * n) clamped to n - 1
    cdef double u = xv - floor(xv)
    cdef double g = u * nd
    cdef long c = <long>g
    if c >= n:
        c = n - 1
    frac[0] = g - <double>c
    return c


# ---------------------------------------------------------------------------
# d = 1


cdef int _run_d1(double[:, ::1] x, bint has_drift, double[:, :, ::1] drift,
                 long n, double dt, long sub, long i0,
                 double[:, :, ::1] noise, double sigma_sqdt, bint has_mat,
                 double[:, ::1] sm, bint has_v, double[:, :, ::1] v_vals,
                 long nv, double[:, ::1] vint, bint has_store,
                 double[:, :, ::1] store, double[:, ::1] acc,
                 double[:, ::1] vfirst, double *slab, long *err) nogil:
    cdef long steps = noise.shape[0]
    cdef long n_noise = noise.shape[1]
    cdef long B = x.shape[0]
    cdef long k, j, kf, b, g, c0, c1, zr
    cdef double w, f0, xv, bdt, z0, term, vv
    cdef double nd = <double>n
    cdef double nvd = <double>nv

    if has_v:
        for b in range(B):
            xv = x[b, 0]
            if not isfinite(xv):
                err[0] = b; err[1] = i0
                return 1
            c0 = _wrap_cell(xv, nv, nvd, &f0)
            c1 = c0 + 1
            if c1 == nv:
                c1 = 0
            vv = v_vals[0, c0, 0] + f0 * (v_vals[0, c1, 0] - v_vals[0, c0, 0])
            acc[b, 0] = vv
            vfirst[b, 0] = vv

    for k in range(steps):
        j = i0 + k
        if has_drift:
            kf = j // sub
            w = (<double>(j - kf * sub)) / (<double>sub)
            for g in range(n):
                slab[g] = (drift[kf, g, 0]
                           + w * (drift[kf + 1, g, 0] - drift[kf, g, 0])) * dt
        for b in range(B):
            xv = x[b, 0]
            if has_drift or has_v:
                if not isfinite(xv):
                    err[0] = b; err[1] = j
                    return 1
            if has_v and k > 0:
                c0 = _wrap_cell(xv, nv, nvd, &f0)
                c1 = c0 + 1
                if c1 == nv:
                    c1 = 0
                acc[b, 0] += v_vals[k, c0, 0] + f0 * (v_vals[k, c1, 0]
                                                      - v_vals[k, c0, 0])
            zr = b % n_noise
            z0 = noise[k, zr, 0]
            if has_mat:
                term = sm[0, 0] * z0
            else:
                term = sigma_sqdt * z0
            if has_drift:
                c0 = _wrap_cell(xv, n, nd, &f0)
                c1 = c0 + 1
                if c1 == n:
                    c1 = 0
                bdt = slab[c0] + f0 * (slab[c1] - slab[c0])
                xv = (xv + bdt) + term
            else:
                xv = xv + term
            x[b, 0] = xv
            if has_store:
                store[b, k + 1, 0] = xv
    return 0


# ---------------------------------------------------------------------------
# d = 2


cdef int _run_d2(double[:, ::1] x, bint has_drift, double[:, :, ::1] drift,
                 long n, double dt, long sub, long i0,
                 double[:, :, ::1] noise, double sigma_sqdt, bint has_mat,
                 double[:, ::1] sm, bint has_v, double[:, :, ::1] v_vals,
                 long nv, double[:, ::1] vint, bint has_store,
                 double[:, :, ::1] store, double[:, ::1] acc,
                 double[:, ::1] vfirst, double *slab, long *err) nogil:
    cdef long steps = noise.shape[0]
    cdef long n_noise = noise.shape[1]
    cdef long B = x.shape[0]
    cdef long NN = n * n
    cdef long k, j, kf, b, g, zr
    cdef long i0c, i1c, j0c, j1c, r00, r01, r10, r11
    cdef double w, fx, fy, lo, hi
    cdef double x0, x1, b0, b1, z0, z1, t0, t1, v0, v1
    cdef double nd = <double>n
    cdef double nvd = <double>nv

    if has_v:
        for b in range(B):
            x0 = x[b, 0]; x1 = x[b, 1]
            if not (isfinite(x0) and isfinite(x1)):
                err[0] = b; err[1] = i0
                return 1
            i0c = _wrap_cell(x0, nv, nvd, &fx)
            j0c = _wrap_cell(x1, nv, nvd, &fy)
            i1c = i0c + 1
            if i1c == nv:
                i1c = 0
            j1c = j0c + 1
            if j1c == nv:
                j1c = 0
            r00 = i0c * nv + j0c; r01 = i0c * nv + j1c
            r10 = i1c * nv + j0c; r11 = i1c * nv + j1c
            v0 = _blerp_rows(v_vals, 0, r00, r01, r10, r11, fx, fy, 0)
            v1 = _blerp_rows(v_vals, 0, r00, r01, r10, r11, fx, fy, 1)
            acc[b, 0] = v0; acc[b, 1] = v1
            vfirst[b, 0] = v0; vfirst[b, 1] = v1

    for k in range(steps):
        j = i0 + k
        if has_drift:
            kf = j // sub
            w = (<double>(j - kf * sub)) / (<double>sub)
            for g in range(NN):
                slab[2 * g] = (drift[kf, g, 0]
                               + w * (drift[kf + 1, g, 0]
                                      - drift[kf, g, 0])) * dt
                slab[2 * g + 1] = (drift[kf, g, 1]
                                   + w * (drift[kf + 1, g, 1]
                                          - drift[kf, g, 1])) * dt
        for b in range(B):
            x0 = x[b, 0]; x1 = x[b, 1]
            if has_drift or has_v:
                if not (isfinite(x0) and isfinite(x1)):
                    err[0] = b; err[1] = j
                    return 1
            if has_v and k > 0:
                i0c = _wrap_cell(x0, nv, nvd, &fx)
                j0c = _wrap_cell(x1, nv, nvd, &fy)
                i1c = i0c + 1
                if i1c == nv:
                    i1c = 0
                j1c = j0c + 1
                if j1c == nv:
                    j1c = 0
                r00 = i0c * nv + j0c; r01 = i0c * nv + j1c
                r10 = i1c * nv + j0c; r11 = i1c * nv + j1c
                acc[b, 0] += _blerp_rows(v_vals, k, r00, r01, r10, r11,
                                         fx, fy, 0)
                acc[b, 1] += _blerp_rows(v_vals, k, r00, r01, r10, r11,
                                         fx, fy, 1)
            zr = b % n_noise
            z0 = noise[k, zr, 0]; z1 = noise[k, zr, 1]
            if has_mat:
                t0 = sm[0, 0] * z0 + sm[0, 1] * z1
                t1 = sm[1, 0] * z0 + sm[1, 1] * z1
            else:
                t0 = sigma_sqdt * z0
                t1 = sigma_sqdt * z1
            if has_drift:
                i0c = _wrap_cell(x0, n, nd, &fx)
                j0c = _wrap_cell(x1, n, nd, &fy)
                i1c = i0c + 1
                if i1c == n:
                    i1c = 0
                j1c = j0c + 1
                if j1c == n:
                    j1c = 0
                r00 = i0c * n + j0c; r01 = i0c * n + j1c
                r10 = i1c * n + j0c; r11 = i1c * n + j1c
                lo = slab[2 * r00] + fx * (slab[2 * r10] - slab[2 * r00])
                hi = slab[2 * r01] + fx * (slab[2 * r11] - slab[2 * r01])
                b0 = lo + fy * (hi - lo)
                lo = slab[2 * r00 + 1] + fx * (slab[2 * r10 + 1]
                                               - slab[2 * r00 + 1])
                hi = slab[2 * r01 + 1] + fx * (slab[2 * r11 + 1]
                                               - slab[2 * r01 + 1])
                b1 = lo + fy * (hi - lo)
                x0 = (x0 + b0) + t0
                x1 = (x1 + b1) + t1
            else:
                x0 = x0 + t0
                x1 = x1 + t1
            x[b, 0] = x0; x[b, 1] = x1
            if has_store:
                store[b, k + 1, 0] = x0
                store[b, k + 1, 1] = x1
    return 0


cdef inline double _blerp_rows(double[:, :, ::1] rows, long row, long r00,
                               long r01, long r10, long r11, double fx,
                               double fy, long comp) nogil:
    # nested lerp matching fields._combine_corners for d = 2
    cdef double lo = rows[row, r00, comp] + fx * (rows[row, r10, comp]
                                                  - rows[row, r00, comp])
    cdef double hi = rows[row, r01, comp] + fx * (rows[row, r11, comp]
                                                  - rows[row, r01, comp])
    return lo + fy * (hi - lo)


# ---------------------------------------------------------------------------
# d = 3 (generic small-array variant)


cdef int _run_d3(double[:, ::1] x, bint has_drift, double[:, :, ::1] drift,
                 long n, double dt, long sub, long i0,
                 double[:, :, ::1] noise, double sigma_sqdt, bint has_mat,
                 double[:, ::1] sm, bint has_v, double[:, :, ::1] v_vals,
                 long nv, double[:, ::1] vint, bint has_store,
                 double[:, :, ::1] store, double[:, ::1] acc,
                 double[:, ::1] vfirst, double *slab, long *err) nogil:
    cdef long steps = noise.shape[0]
    cdef long n_noise = noise.shape[1]
    cdef long B = x.shape[0]
    cdef long NN = n * n * n
    cdef long k, j, kf, b, g, zr, comp
    cdef long cell0[3]
    cdef long cell1[3]
    cdef long idx[8]
    cdef double frac[3]
    cdef double xv[3]
    cdef double zv[3]
    cdef double tv[3]
    cdef double val[3]
    cdef double w, ok
    cdef double nd = <double>n
    cdef double nvd = <double>nv

    if has_v:
        for b in range(B):
            ok = 1.0
            for comp in range(3):
                xv[comp] = x[b, comp]
                if not isfinite(xv[comp]):
                    ok = 0.0
            if ok == 0.0:
                err[0] = b; err[1] = i0
                return 1
            _corners3(xv, nv, nvd, cell0, cell1, frac, idx)
            for comp in range(3):
                val[comp] = _gather3(v_vals, 0, idx, frac, comp)
                acc[b, comp] = val[comp]
                vfirst[b, comp] = val[comp]

    for k in range(steps):
        j = i0 + k
        if has_drift:
            kf = j // sub
            w = (<double>(j - kf * sub)) / (<double>sub)
            for g in range(NN):
                for comp in range(3):
                    slab[3 * g + comp] = (drift[kf, g, comp]
                                          + w * (drift[kf + 1, g, comp]
                                                 - drift[kf, g, comp])) * dt
        for b in range(B):
            for comp in range(3):
                xv[comp] = x[b, comp]
            if has_drift or has_v:
                ok = 1.0
                for comp in range(3):
                    if not isfinite(xv[comp]):
                        ok = 0.0
                if ok == 0.0:
                    err[0] = b; err[1] = j
                    return 1
            if has_v and k > 0:
                _corners3(xv, nv, nvd, cell0, cell1, frac, idx)
                for comp in range(3):
                    acc[b, comp] += _gather3(v_vals, k, idx, frac, comp)
            zr = b % n_noise
            for comp in range(3):
                zv[comp] = noise[k, zr, comp]
            if has_mat:
                for comp in range(3):
                    tv[comp] = (sm[comp, 0] * zv[0] + sm[comp, 1] * zv[1]) \
                               + sm[comp, 2] * zv[2]
            else:
                for comp in range(3):
                    tv[comp] = sigma_sqdt * zv[comp]
            if has_drift:
                _corners3(xv, n, nd, cell0, cell1, frac, idx)
                for comp in range(3):
                    val[comp] = _gather3_flat(slab, 3, idx, frac, comp)
                for comp in range(3):
                    xv[comp] = (xv[comp] + val[comp]) + tv[comp]
            else:
                for comp in range(3):
                    xv[comp] = xv[comp] + tv[comp]
            for comp in range(3):
                x[b, comp] = xv[comp]
            if has_store:
                for comp in range(3):
                    store[b, k + 1, comp] = xv[comp]
    return 0


cdef inline void _corners3(double *xv, long n, double nd, long *cell0,
                           long *cell1, double *frac, long *idx) nogil:
    # corner flat indices in bit order (x, y, z), x the most significant
    cdef long ax, a, bb, g
    for ax in range(3):
        cell0[ax] = _wrap_cell(xv[ax], n, nd, &frac[ax])
        cell1[ax] = cell0[ax] + 1
        if cell1[ax] == n:
            cell1[ax] = 0
    cdef long pos = 0
    for a in range(2):
        for bb in range(2):
            for g in range(2):
                idx[pos] = ((cell0[0] if a == 0 else cell1[0]) * n
                            + (cell0[1] if bb == 0 else cell1[1])) * n \
                           + (cell0[2] if g == 0 else cell1[2])
                pos += 1


cdef inline double _gather3(double[:, :, ::1] rows, long row, long *idx,
                            double *frac, long comp) nogil:
    # trilinear nested lerp matching fields._combine_corners for d = 3:
    # lerp x within each (y, z) edge, then y within each z plane, then z
    cdef double lo, hi, p0, p1
    lo = rows[row, idx[0], comp] + frac[0] * (rows[row, idx[4], comp]
                                              - rows[row, idx[0], comp])
    hi = rows[row, idx[2], comp] + frac[0] * (rows[row, idx[6], comp]
                                              - rows[row, idx[2], comp])
    p0 = lo + frac[1] * (hi - lo)
    lo = rows[row, idx[1], comp] + frac[0] * (rows[row, idx[5], comp]
                                              - rows[row, idx[1], comp])
    hi = rows[row, idx[3], comp] + frac[0] * (rows[row, idx[7], comp]
                                              - rows[row, idx[3], comp])
    p1 = lo + frac[1] * (hi - lo)
    return p0 + frac[2] * (p1 - p0)


cdef inline double _gather3_flat(double *flat, long stride, long *idx,
                                 double *frac, long comp) nogil:
    cdef double lo, hi, p0, p1
    lo = flat[stride * idx[0] + comp] + frac[0] * (
        flat[stride * idx[4] + comp] - flat[stride * idx[0] + comp])
    hi = flat[stride * idx[2] + comp] + frac[0] * (
        flat[stride * idx[6] + comp] - flat[stride * idx[2] + comp])
    p0 = lo + frac[1] * (hi - lo)
    lo = flat[stride * idx[1] + comp] + frac[0] * (
        flat[stride * idx[5] + comp] - flat[stride * idx[1] + comp])
    hi = flat[stride * idx[3] + comp] + frac[0] * (
        flat[stride * idx[7] + comp] - flat[stride * idx[3] + comp])
    p1 = lo + frac[1] * (hi - lo)
    return p0 + frac[2] * (p1 - p0)


# ---------------------------------------------------------------------------
# public entry points


def em_run(double[:, ::1] x, object drift_obj, long n, double dt, long sub,
           long i0, double[:, :, ::1] noise, double sigma_sqdt,
           object sigma_mat_obj, object v_obj, long nv, object vint_obj,
           object store_obj):
    """Compiled Euler-Maruyama sweep; contract identical to fallback.em_run."""
    cdef long B = x.shape[0]
    cdef long d = x.shape[1]
    cdef long steps = noise.shape[0]
    cdef bint has_drift = drift_obj is not None
    cdef bint has_v = v_obj is not None
    cdef bint has_store = store_obj is not None
    cdef bint has_mat = sigma_mat_obj is not None

    cdef double[:, :, ::1] drift = None
    cdef double[:, :, ::1] v_vals = None
    cdef double[:, ::1] vint = None
    cdef double[:, :, ::1] store = None
    cdef double[:, ::1] sm = None
    cdef double[:, ::1] acc = None
    cdef double[:, ::1] vfirst = None

    if noise.shape[2] != d:
        raise ValueError("noise component axis mismatch")
    if has_drift:
        drift = drift_obj
    if has_mat:
        sm = sigma_mat_obj
    if has_v:
        v_vals = v_obj
        vint = vint_obj
        if v_vals.shape[0] != steps + 1:
            raise ValueError("forcing must be rasterized at steps + 1 times")
        acc_arr = np.zeros((B, d))
        vf_arr = np.zeros((B, d))
        acc = acc_arr
        vfirst = vf_arr
    if has_store:
        store = store_obj
        store[:, 0, :] = x

    cdef double *slab = NULL
    cdef long NN = 1
    cdef long i
    if has_drift:
        for i in range(d):
            NN *= n
        slab = <double *>malloc(NN * d * sizeof(double))
        if slab == NULL:
            raise MemoryError()

    cdef long err[2]
    err[0] = -1
    err[1] = -1
    cdef int rc = 0
    try:
        with nogil:
            if d == 1:
                rc = _run_d1(x, has_drift, drift, n, dt, sub, i0, noise,
                             sigma_sqdt, has_mat, sm, has_v, v_vals, nv, vint,
                             has_store, store, acc, vfirst, slab, err)
            elif d == 2:
                rc = _run_d2(x, has_drift, drift, n, dt, sub, i0, noise,
                             sigma_sqdt, has_mat, sm, has_v, v_vals, nv, vint,
                             has_store, store, acc, vfirst, slab, err)
            elif d == 3:
                rc = _run_d3(x, has_drift, drift, n, dt, sub, i0, noise,
                             sigma_sqdt, has_mat, sm, has_v, v_vals, nv, vint,
                             has_store, store, acc, vfirst, slab, err)
            else:
                rc = -2
    finally:
        if slab != NULL:
            free(slab)
    if rc == -2:
        raise ValueError("dimension must be 1, 2 or 3")
    if rc == 1:
        raise FloatingPointError(
            f"non-finite particle state: particle {err[0]}, global step {err[1]}")

    # terminal finite check (mirrors fallback)
    x_arr = np.asarray(x)
    if not np.isfinite(x_arr).all():
        b = int(np.nonzero((~np.isfinite(x_arr)).any(axis=1))[0][0])
        raise FloatingPointError(
            f"non-finite particle state: particle {b}, terminal step {i0 + steps}")

    if has_v:
        if steps == 0:
            vint_np = np.asarray(vint)
            vint_np[...] = 0.0
        else:
            _v_finalize(x, v_vals, nv, acc, vfirst, vint, steps, dt, d)
    return None


cdef void _v_finalize(double[:, ::1] x, double[:, :, ::1] v_vals, long nv,
                      double[:, ::1] acc, double[:, ::1] vfirst,
                      double[:, ::1] vint, long steps, double dt, long d) nogil:
    # terminal forcing row + trapezoid end correction:
    # vint = (acc - 0.5 * (vfirst + vlast)) * dt, acc includes vlast
    cdef long B = x.shape[0]
    cdef long b, comp
    cdef long i0c, i1c, j0c, j1c
    cdef double fx, fy, vl
    cdef long r00, r01, r10, r11
    cdef double nvd = <double>nv
    cdef long cell0[3]
    cdef long cell1[3]
    cdef long idx[8]
    cdef double frac[3]
    cdef double xv[3]
    if d == 1:
        for b in range(B):
            i0c = _wrap_cell(x[b, 0], nv, nvd, &fx)
            i1c = i0c + 1
            if i1c == nv:
                i1c = 0
            vl = v_vals[steps, i0c, 0] + fx * (v_vals[steps, i1c, 0]
                                               - v_vals[steps, i0c, 0])
            acc[b, 0] += vl
            vint[b, 0] = (acc[b, 0] - 0.5 * (vfirst[b, 0] + vl)) * dt
    elif d == 2:
        for b in range(B):
            i0c = _wrap_cell(x[b, 0], nv, nvd, &fx)
            j0c = _wrap_cell(x[b, 1], nv, nvd, &fy)
            i1c = i0c + 1
            if i1c == nv:
                i1c = 0
            j1c = j0c + 1
            if j1c == nv:
                j1c = 0
            r00 = i0c * nv + j0c; r01 = i0c * nv + j1c
            r10 = i1c * nv + j0c; r11 = i1c * nv + j1c
            for comp in range(2):
                vl = _blerp_rows(v_vals, steps, r00, r01, r10, r11,
                                 fx, fy, comp)
                acc[b, comp] += vl
                vint[b, comp] = (acc[b, comp]
                                 - 0.5 * (vfirst[b, comp] + vl)) * dt
    else:
        for b in range(B):
            xv[0] = x[b, 0]; xv[1] = x[b, 1]; xv[2] = x[b, 2]
            _corners3(xv, nv, nvd, cell0, cell1, frac, idx)
            for comp in range(3):
                vl = _gather3(v_vals, steps, idx, frac, comp)
                acc[b, comp] += vl
                vint[b, comp] = (acc[b, comp] - 0.5 * (vfirst[b, comp] + vl)) * dt


def welford_batches(double[:, :, ::1] y, long n_batches):
    """Compiled batched Welford/Chan moments; contract identical to fallback."""
    cdef long G = y.shape[0]
    cdef long N = y.shape[1]
    cdef long c = y.shape[2]
    if n_batches < 1 or n_batches > N:
        raise ValueError("n_batches must be in [1, N]")

    bm_arr = np.empty((n_batches, G, c))
    bm2_arr = np.empty((n_batches, G, c))
    mean_arr = np.empty((G, c))
    m2_arr = np.empty((G, c))
    cdef double[:, :, ::1] bm = bm_arr
    cdef double[:, :, ::1] bm2 = bm2_arr
    cdef double[:, ::1] mean_out = mean_arr
    cdef double[:, ::1] m2_out = m2_arr

    cdef long g, b, i, comp, lo, hi, n_acc, n_b, n_new
    cdef double cnt, delta, yi, ratio
    cdef double mloc[8]
    cdef double m2loc[8]
    if c > 8:
        raise ValueError("component count above 8 not supported by the kernel")

    with nogil:
        for g in range(G):
            for b in range(n_batches):
                lo = b * N // n_batches
                hi = (b + 1) * N // n_batches
                for comp in range(c):
                    mloc[comp] = 0.0
                    m2loc[comp] = 0.0
                for i in range(lo, hi):
                    cnt = <double>(i - lo + 1)
                    for comp in range(c):
                        yi = y[g, i, comp]
                        delta = yi - mloc[comp]
                        mloc[comp] = mloc[comp] + delta / cnt
                        m2loc[comp] = m2loc[comp] + delta * (yi - mloc[comp])
                for comp in range(c):
                    bm[b, g, comp] = mloc[comp]
                    bm2[b, g, comp] = m2loc[comp]
            # Chan merge in fixed batch order
            n_acc = N // n_batches  # count of batch 0
            for comp in range(c):
                mloc[comp] = bm[0, g, comp]
                m2loc[comp] = bm2[0, g, comp]
            for b in range(1, n_batches):
                lo = b * N // n_batches
                hi = (b + 1) * N // n_batches
                n_b = hi - lo
                n_new = n_acc + n_b
                ratio = (<double>n_b) / (<double>n_new)
                for comp in range(c):
                    delta = bm[b, g, comp] - mloc[comp]
                    mloc[comp] = mloc[comp] + delta * ratio
                    m2loc[comp] = (m2loc[comp] + bm2[b, g, comp]) \
                        + (delta * delta) * ((<double>n_acc) * ratio)
                n_acc = n_new
            for comp in range(c):
                mean_out[g, comp] = mloc[comp]
                m2_out[g, comp] = m2loc[comp]

    return mean_arr, m2_arr, bm_arr
