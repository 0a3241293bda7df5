# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels.

Semantics must match ``fallback.py`` exactly: same arithmetic, same scan
order, same tie handling. The test suite asserts bitwise-equal buffers.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport acos, atan2, ceil, floor, fmax, fmin, fmod, sqrt, M_PI

cnp.import_array()

ctypedef fused floating:
    cnp.float32_t
    cnp.float64_t


def raster_fill(
    cnp.float64_t[::1] vx,
    cnp.float64_t[::1] vy,
    cnp.float64_t[::1] zinv,
    cnp.float64_t[:, ::1] attrs_over_z,
    cnp.int32_t[:, ::1] faces,
    cnp.float64_t[:, ::1] zinv_buf,
    cnp.float64_t[:, :, ::1] attr_buf,
    cnp.int32_t[:, ::1] owner_buf,
    int owner_offset,
):
    cdef Py_ssize_t h = zinv_buf.shape[0]
    cdef Py_ssize_t w = zinv_buf.shape[1]
    cdef Py_ssize_t n_attr = attr_buf.shape[2]
    cdef Py_ssize_t f, ia, ib, ic, ix, iy, c
    cdef double ax, ay, bx, by, cx, cy, area, px, py
    cdef double w0, w1, w2, zi
    cdef int x0, x1, y0, y1
    cdef bint inside

    for f in range(faces.shape[0]):
        ia = faces[f, 0]
        ib = faces[f, 1]
        ic = faces[f, 2]
        ax = vx[ia]; ay = vy[ia]
        bx = vx[ib]; by = vy[ib]
        cx = vx[ic]; cy = vy[ic]

        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue

        x0 = <int>ceil(fmin(fmin(ax, bx), cx) - 0.5)
        x1 = <int>floor(fmax(fmax(ax, bx), cx) - 0.5)
        y0 = <int>ceil(fmin(fmin(ay, by), cy) - 0.5)
        y1 = <int>floor(fmax(fmax(ay, by), cy) - 0.5)
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > w - 1:
            x1 = w - 1
        if y1 > h - 1:
            y1 = h - 1
        if x1 < x0 or y1 < y0:
            continue

        for iy in range(y0, y1 + 1):
            py = iy + 0.5
            for ix in range(x0, x1 + 1):
                px = ix + 0.5
                w0 = (bx - px) * (cy - py) - (by - py) * (cx - px)
                w1 = (cx - px) * (ay - py) - (cy - py) * (ax - px)
                w2 = (ax - px) * (by - py) - (ay - py) * (bx - px)
                inside = (w0 >= 0 and w1 >= 0 and w2 >= 0) or (w0 <= 0 and w1 <= 0 and w2 <= 0)
                if not inside:
                    continue
                w0 = w0 / area
                w1 = w1 / area
                w2 = w2 / area
                zi = w0 * zinv[ia] + w1 * zinv[ib] + w2 * zinv[ic]
                if zi > zinv_buf[iy, ix]:
                    zinv_buf[iy, ix] = zi
                    owner_buf[iy, ix] = owner_offset + <int>f
                    for c in range(n_attr):
                        attr_buf[iy, ix, c] = (
                            w0 * attrs_over_z[ia, c]
                            + w1 * attrs_over_z[ib, c]
                            + w2 * attrs_over_z[ic, c]
                        )


def bn_stats(floating[:, ::1] x):
    """Per-column mean and biased variance, accumulated in double precision.

    Two-pass (mean first, then centered squares) so the variance is free of
    cancellation; the deviation is rounded to the input dtype to match the
    fallback exactly.
    """
    cdef Py_ssize_t p = x.shape[0], c = x.shape[1], i, j
    mu_arr = np.zeros(c, dtype=np.float64)
    var_arr = np.zeros(c, dtype=np.float64)
    cdef cnp.float64_t[::1] mu = mu_arr
    cdef cnp.float64_t[::1] var = var_arr
    cdef floating muf
    cdef floating d
    cdef double inv_p = 1.0 / p
    with nogil:
        for i in range(p):
            for j in range(c):
                mu[j] += x[i, j]
        for j in range(c):
            mu[j] *= inv_p
        for i in range(p):
            for j in range(c):
                muf = <floating>mu[j]
                d = x[i, j] - muf
                var[j] += <double>d * <double>d
        for j in range(c):
            var[j] *= inv_p
    return mu_arr, var_arr


def bn_relu_apply(floating[:, ::1] x, floating[::1] mean, floating[::1] inv,
                  floating[::1] scale, floating[::1] shift):
    """Normalize x in place (it becomes xhat); returns (relu(scale*xhat+shift), mask)."""
    cdef Py_ssize_t p = x.shape[0], c = x.shape[1], i, j
    if floating is cnp.float32_t:
        y_arr = np.empty((p, c), dtype=np.float32)
    else:
        y_arr = np.empty((p, c), dtype=np.float64)
    mask_arr = np.empty((p, c), dtype=np.uint8)
    cdef floating[:, ::1] y = y_arr
    cdef cnp.uint8_t[:, ::1] mask = mask_arr
    cdef floating xh, v
    with nogil:
        for i in range(p):
            for j in range(c):
                xh = (x[i, j] - mean[j]) * inv[j]
                x[i, j] = xh
                v = scale[j] * xh + shift[j]
                if v > 0:
                    y[i, j] = v
                    mask[i, j] = 1
                else:
                    y[i, j] = 0
                    mask[i, j] = 0
    return y_arr, mask_arr


def bn_relu_bwd(floating[:, ::1] gy, floating[:, ::1] xhat, cnp.uint8_t[:, ::1] mask,
                floating[::1] inv, floating[::1] scale, bint train):
    """Backward through relu+affine+normalization; gy becomes gx in place.

    Returns (gscale, gshift) accumulated in double precision.
    """
    cdef Py_ssize_t p = gy.shape[0], c = gy.shape[1], i, j
    gscale_arr = np.zeros(c, dtype=np.float64)
    gshift_arr = np.zeros(c, dtype=np.float64)
    cdef cnp.float64_t[::1] gscale = gscale_arr
    cdef cnp.float64_t[::1] gshift = gshift_arr
    cdef double g
    with nogil:
        for i in range(p):
            for j in range(c):
                if mask[i, j]:
                    g = gy[i, j]
                    gscale[j] += g * xhat[i, j]
                    gshift[j] += g
                else:
                    gy[i, j] = 0
        if train:
            for i in range(p):
                for j in range(c):
                    gy[i, j] = (gy[i, j] * scale[j]
                                - <floating>(gshift[j] * scale[j] / p)
                                - xhat[i, j] * <floating>(gscale[j] * scale[j] / p)) * inv[j]
        else:
            for i in range(p):
                for j in range(c):
                    gy[i, j] = gy[i, j] * scale[j] * inv[j]
    return gscale_arr, gshift_arr


def group_max_fwd(floating[:, :, ::1] x):
    """Max over the middle axis of (G, n, C) with first-max argmax."""
    cdef Py_ssize_t g = x.shape[0], n = x.shape[1], c = x.shape[2], i, j, k
    if floating is cnp.float32_t:
        y_arr = np.empty((g, c), dtype=np.float32)
    else:
        y_arr = np.empty((g, c), dtype=np.float64)
    arg_arr = np.zeros((g, c), dtype=np.int32)
    cdef floating[:, ::1] y = y_arr
    cdef cnp.int32_t[:, ::1] arg = arg_arr
    cdef floating v
    with nogil:
        for i in range(g):
            for k in range(c):
                y[i, k] = x[i, 0, k]
            for j in range(1, n):
                for k in range(c):
                    v = x[i, j, k]
                    if v > y[i, k]:
                        y[i, k] = v
                        arg[i, k] = <cnp.int32_t>j
    return y_arr, arg_arr


def group_max_bwd(floating[:, ::1] gy, cnp.int32_t[:, ::1] arg, int n):
    cdef Py_ssize_t g = gy.shape[0], c = gy.shape[1], i, k
    if floating is cnp.float32_t:
        gx_arr = np.zeros((g, n, c), dtype=np.float32)
    else:
        gx_arr = np.zeros((g, n, c), dtype=np.float64)
    cdef floating[:, :, ::1] gx = gx_arr
    with nogil:
        for i in range(g):
            for k in range(c):
                gx[i, arg[i, k], k] = gy[i, k]
    return gx_arr


cdef inline double _clip1(double x) nogil:
    if x > 1.0:
        return 1.0
    if x < -1.0:
        return -1.0
    return x


cdef inline Py_ssize_t _lower_bound(cnp.uint64_t[::1] keys, cnp.uint64_t key) nogil:
    cdef Py_ssize_t lo = 0, hi = keys.shape[0], mid
    while lo < hi:
        mid = (lo + hi) // 2
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline Py_ssize_t _upper_bound(cnp.uint64_t[::1] keys, cnp.uint64_t key) nogil:
    cdef Py_ssize_t lo = 0, hi = keys.shape[0], mid
    while lo < hi:
        mid = (lo + hi) // 2
        if keys[mid] <= key:
            lo = mid + 1
        else:
            hi = mid
    return lo


def ppf_vote_accumulate(
    cnp.float64_t[:, ::1] points,
    cnp.float64_t[:, ::1] normals,
    cnp.int64_t[::1] ref_indices,
    cnp.uint64_t[::1] keys,
    cnp.int32_t[::1] entry_model,
    cnp.int32_t[::1] entry_alpha_bin,
    double dist_step,
    double angle_step,
    double max_dist,
    int n_model,
    int n_alpha,
    double rel_thresh,
):
    cdef Py_ssize_t s = points.shape[0]
    cdef Py_ssize_t r, i, e, lo, hi, p
    cdef cnp.int64_t sr
    cdef double prx, pry, prz, nrx, nry, nrz
    cdef double dx, dy, dz, dist, inv, dnx, dny, dnz
    cdef double a1, a2, a3, alpha_s, alpha, dly, dlz
    cdef double c, a, b, k
    cdef double r00, r01, r02, r10, r11, r12, r20, r21, r22
    cdef cnp.uint64_t key
    cdef int abin, vmax, v, sbin
    cdef double two_pi = 2.0 * M_PI

    votes_arr = np.zeros(n_model * n_alpha, dtype=np.int32)
    cdef cnp.int32_t[::1] votes = votes_arr
    touched_arr = np.empty(n_model * n_alpha, dtype=np.int64)
    cdef cnp.int64_t[::1] touched = touched_arr
    cdef Py_ssize_t n_touched, t

    out_ref, out_model, out_alpha, out_votes = [], [], [], []

    for r in range(ref_indices.shape[0]):
        sr = ref_indices[r]
        prx = points[sr, 0]; pry = points[sr, 1]; prz = points[sr, 2]
        nrx = normals[sr, 0]; nry = normals[sr, 1]; nrz = normals[sr, 2]

        # rotation taking the reference normal onto +x (matches ref_frame_rotation)
        c = nrx; a = nry; b = nrz
        if 1.0 + c < 1e-9:
            r00 = -1.0; r01 = 0.0; r02 = 0.0
            r10 = 0.0; r11 = -1.0; r12 = 0.0
            r20 = 0.0; r21 = 0.0; r22 = 1.0
        else:
            k = 1.0 / (1.0 + c)
            r00 = c; r01 = a; r02 = b
            r10 = -a; r11 = 1.0 - a * a * k; r12 = -a * b * k
            r20 = -b; r21 = -a * b * k; r22 = 1.0 - b * b * k

        n_touched = 0
        for i in range(s):
            dx = points[i, 0] - prx
            dy = points[i, 1] - pry
            dz = points[i, 2] - prz
            dist = sqrt(dx * dx + dy * dy + dz * dz)
            if dist <= 1e-9 or dist > max_dist:
                continue
            inv = 1.0 / dist
            dnx = dx * inv; dny = dy * inv; dnz = dz * inv
            a1 = acos(_clip1(dnx * nrx + dny * nry + dnz * nrz))
            a2 = acos(_clip1(dnx * normals[i, 0] + dny * normals[i, 1] + dnz * normals[i, 2]))
            a3 = acos(_clip1(normals[i, 0] * nrx + normals[i, 1] * nry + normals[i, 2] * nrz))
            key = (
                (<cnp.uint64_t>floor(dist / dist_step) << 24)
                | (<cnp.uint64_t>floor(a1 / angle_step) << 16)
                | (<cnp.uint64_t>floor(a2 / angle_step) << 8)
                | <cnp.uint64_t>floor(a3 / angle_step)
            )
            lo = _lower_bound(keys, key)
            if lo >= keys.shape[0] or keys[lo] != key:
                continue
            hi = _upper_bound(keys, key)

            dly = r10 * dx + r11 * dy + r12 * dz
            dlz = r20 * dx + r21 * dy + r22 * dz
            alpha_s = atan2(dlz, dly)
            sbin = <int>floor((alpha_s + M_PI) / two_pi * n_alpha)
            if sbin < 0:
                sbin = 0
            elif sbin > n_alpha - 1:
                sbin = n_alpha - 1

            for e in range(lo, hi):
                abin = (sbin - entry_alpha_bin[e]) % n_alpha
                if abin < 0:
                    abin += n_alpha
                p = <Py_ssize_t>entry_model[e] * n_alpha + abin
                if votes[p] == 0:
                    touched[n_touched] = p
                    n_touched += 1
                votes[p] += 1

        if n_touched == 0:
            continue
        vmax = 0
        for t in range(n_touched):
            v = votes[touched[t]]
            if v > vmax:
                vmax = v
        if vmax > 0:
            # emit peaks in row-major bin order, matching the fallback scan
            for p in range(n_model * n_alpha):
                v = votes[p]
                if v > 0 and v >= rel_thresh * vmax:
                    alpha = (p % n_alpha) * two_pi / n_alpha
                    if alpha >= M_PI:
                        alpha -= two_pi
                    out_ref.append(sr)
                    out_model.append(p // n_alpha)
                    out_alpha.append(alpha)
                    out_votes.append(v)

        for t in range(n_touched):
            votes[touched[t]] = 0

    return (
        np.asarray(out_ref, dtype=np.int64),
        np.asarray(out_model, dtype=np.int32),
        np.asarray(out_alpha, dtype=np.float64),
        np.asarray(out_votes, dtype=np.int32),
    )
