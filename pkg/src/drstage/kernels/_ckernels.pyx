# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Semantics match ``_pykernels`` exactly."""
import numpy as np

cimport numpy as cnp
from libc.math cimport floor, fmod

cnp.import_array()


def black_row_bounds(pixels, double threshold):
    cdef const double[:, :, ::1] px = np.ascontiguousarray(pixels, dtype=np.float64)
    cdef Py_ssize_t h = px.shape[0], w = px.shape[1], c = px.shape[2]
    cdef Py_ssize_t top = -1, bottom = -1, y, x, k
    cdef bint bright
    for y in range(h):
        bright = False
        for x in range(w):
            for k in range(c):
                if px[y, x, k] >= threshold:
                    bright = True
                    break
            if bright:
                break
        if bright:
            if top < 0:
                top = y
            bottom = y + 1
    if top < 0:
        return 0, 0
    return int(top), int(bottom)


cdef void _axis_weights(Py_ssize_t n_in, Py_ssize_t n_out, Py_ssize_t[::1] i0,
                        Py_ssize_t[::1] i1, double[::1] lam) noexcept nogil:
    cdef double scale = <double>n_in / <double>n_out
    cdef double src
    cdef Py_ssize_t j, a
    for j in range(n_out):
        src = (<double>j + 0.5) * scale - 0.5
        if src < 0.0:
            src = 0.0
        a = <Py_ssize_t>floor(src)
        if a > n_in - 1:
            a = n_in - 1
        i0[j] = a
        i1[j] = a + 1 if a + 1 < n_in else n_in - 1
        lam[j] = src - <double>a


def resize_bilinear(src, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef const double[:, :, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef Py_ssize_t h = s.shape[0], w = s.shape[1], c = s.shape[2]
    out = np.empty((out_h, out_w, c), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t[::1] y0 = np.empty(out_h, dtype=np.intp)
    cdef Py_ssize_t[::1] y1 = np.empty(out_h, dtype=np.intp)
    cdef double[::1] ly = np.empty(out_h, dtype=np.float64)
    cdef Py_ssize_t[::1] x0 = np.empty(out_w, dtype=np.intp)
    cdef Py_ssize_t[::1] x1 = np.empty(out_w, dtype=np.intp)
    cdef double[::1] lx = np.empty(out_w, dtype=np.float64)
    cdef Py_ssize_t i, j, k
    cdef double top, bot, p00, p01, p10, p11, tx, ty
    with nogil:
        _axis_weights(h, out_h, y0, y1, ly)
        _axis_weights(w, out_w, x0, x1, lx)
        for i in range(out_h):
            ty = ly[i]
            for j in range(out_w):
                tx = lx[j]
                for k in range(c):
                    p00 = s[y0[i], x0[j], k]
                    p01 = s[y0[i], x1[j], k]
                    p10 = s[y1[i], x0[j], k]
                    p11 = s[y1[i], x1[j], k]
                    top = p00 + tx * (p01 - p00)
                    bot = p10 + tx * (p11 - p10)
                    o[i, j, k] = top + ty * (bot - top)
    return out


cdef inline double _pymod1(double x) noexcept nogil:
    # Python-style modulo by 1.0 (result in [0, 1))
    cdef double m = fmod(x, 1.0)
    if m < 0.0:
        m += 1.0
    return m


def hue_shift(pixels, double shift):
    cdef const double[:, :, ::1] px = np.ascontiguousarray(pixels, dtype=np.float64)
    cdef Py_ssize_t h = px.shape[0], w = px.shape[1]
    out = np.empty((h, w, 3), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t y, x
    cdef long sector
    cdef double r, g, b, maxc, minc, delta, v, s, hue, rc, gc, bc, h6, fi, f, p, q, t
    with nogil:
        for y in range(h):
            for x in range(w):
                r = px[y, x, 0]
                g = px[y, x, 1]
                b = px[y, x, 2]
                maxc = r if r > g else g
                maxc = maxc if maxc > b else b
                minc = r if r < g else g
                minc = minc if minc < b else b
                delta = maxc - minc
                v = maxc
                s = delta / maxc if maxc > 0.0 else 0.0
                if delta > 0.0:
                    rc = (maxc - r) / delta
                    gc = (maxc - g) / delta
                    bc = (maxc - b) / delta
                    if maxc == r:
                        hue = bc - gc
                    elif maxc == g:
                        hue = 2.0 + rc - bc
                    else:
                        hue = 4.0 + gc - rc
                    hue = _pymod1(hue / 6.0)
                else:
                    hue = 0.0
                hue = _pymod1(hue + shift)
                h6 = hue * 6.0
                fi = floor(h6)
                f = h6 - fi
                sector = (<long>fi) % 6
                p = v * (1.0 - s)
                q = v * (1.0 - s * f)
                t = v * (1.0 - s * (1.0 - f))
                if sector == 0:
                    o[y, x, 0] = v; o[y, x, 1] = t; o[y, x, 2] = p
                elif sector == 1:
                    o[y, x, 0] = q; o[y, x, 1] = v; o[y, x, 2] = p
                elif sector == 2:
                    o[y, x, 0] = p; o[y, x, 1] = v; o[y, x, 2] = t
                elif sector == 3:
                    o[y, x, 0] = p; o[y, x, 1] = q; o[y, x, 2] = v
                elif sector == 4:
                    o[y, x, 0] = t; o[y, x, 1] = p; o[y, x, 2] = v
                else:
                    o[y, x, 0] = v; o[y, x, 1] = p; o[y, x, 2] = q
    return out


def rank_sum_null_counts(doubled_ranks, Py_ssize_t n1):
    cdef const long long[::1] ranks = np.ascontiguousarray(doubled_ranks, dtype=np.int64)
    cdef Py_ssize_t n = ranks.shape[0]
    cdef Py_ssize_t total = 0, i, k, t, r, kmax
    for i in range(n):
        total += ranks[i]
    dp_arr = np.zeros((n1 + 1, total + 1), dtype=np.int64)
    cdef long long[:, ::1] dp = dp_arr
    dp[0, 0] = 1
    with nogil:
        for i in range(n):
            r = ranks[i]
            kmax = i + 1 if i + 1 < n1 else n1
            for k in range(kmax, 0, -1):
                for t in range(total, r - 1, -1):
                    dp[k, t] += dp[k - 1, t - r]
    return dp_arr[n1].copy()
