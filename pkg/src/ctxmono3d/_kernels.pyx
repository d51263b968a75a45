# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-point loss kernels; exact mirror of ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fabs, sqrt, INFINITY

cnp.import_array()


cdef inline double _sgn(double a) nogil:
    if a > 0.0:
        return 1.0
    if a < 0.0:
        return -1.0
    return 0.0


cdef int _geometry(double px, double pz, double cx, double cz, double c, double s,
                   double hl, double hw, double* out) nogil:
    cdef double dx = px - cx, dz = pz - cz
    cdef double qu, qv, mu, mv, m, k, dm_cx, dm_cz, dm_yaw, f, rx, rz, sx, sz, im2
    if dx == 0.0 and dz == 0.0:
        out[0] = 0.0; out[1] = 0.0; out[2] = 0.0; out[3] = 0.0
        return 1
    qu = c * dx + s * dz
    qv = -s * dx + c * dz
    mu = fabs(qu) / hl
    mv = fabs(qv) / hw
    if mu >= mv:
        m = mu
        k = _sgn(qu) / hl
        dm_cx = k * -c
        dm_cz = k * -s
        dm_yaw = k * qv
    else:
        m = mv
        k = _sgn(qv) / hw
        dm_cx = k * s
        dm_cz = k * -c
        dm_yaw = k * -qu
    f = 1.0 - 1.0 / m
    rx = dx * f
    rz = dz * f
    sx = _sgn(rx)
    sz = _sgn(rz)
    im2 = 1.0 / (m * m)
    out[0] = fabs(rx) + fabs(rz)
    out[1] = sx * (-f + dx * dm_cx * im2) + sz * (dz * dm_cx * im2)
    out[2] = sx * (dx * dm_cz * im2) + sz * (-f + dz * dm_cz * im2)
    out[3] = sx * (dx * dm_yaw * im2) + sz * (dz * dm_yaw * im2)
    return 0


cdef int _ray_tracing(double px, double pz, double cx, double cz, double c, double s,
                      double hl, double hw, double ox, double oz, double* out) nogil:
    cdef double ex = px - ox, ez = pz - oz
    cdef double n = sqrt(ex * ex + ez * ez)
    cdef double wx, wz, ou, ov, du, dv, t_near, t_far, sg, enter, leave
    cdef double o, d, h, rx, rz, d_a, do_cx, do_cz, do_yaw, dd_yaw, sx, sz, k
    cdef int axis = -1, a
    out[0] = 0.0; out[1] = 0.0; out[2] = 0.0; out[3] = 0.0
    if n == 0.0:
        return -1
    ex = ex / n
    ez = ez / n
    wx = ox - cx
    wz = oz - cz
    ou = c * wx + s * wz
    ov = -s * wx + c * wz
    du = c * ex + s * ez
    dv = -s * ex + c * ez
    t_near = -INFINITY
    t_far = INFINITY
    for a in range(2):
        if a == 0:
            o = ou; d = du; h = hl
        else:
            o = ov; d = dv; h = hw
        if fabs(d) < 1e-15:
            if fabs(o) > h:
                return 0
            continue
        sg = 1.0 if d > 0.0 else -1.0
        enter = (-sg * h - o) / d
        leave = (sg * h - o) / d
        if enter > t_near:
            t_near = enter
            axis = a
        if leave < t_far:
            t_far = leave
    if axis < 0 or t_far < t_near or t_near <= 0.0:
        return 0
    rx = px - (ox + t_near * ex)
    rz = pz - (oz + t_near * ez)
    if axis == 0:
        d_a = du; do_cx = -c; do_cz = -s; do_yaw = ov; dd_yaw = dv
    else:
        d_a = dv; do_cx = s; do_cz = -c; do_yaw = -ou; dd_yaw = -du
    sx = _sgn(rx)
    sz = _sgn(rz)
    k = -(sx * ex + sz * ez)
    out[0] = fabs(rx) + fabs(rz)
    out[1] = k * (-do_cx / d_a)
    out[2] = k * (-do_cz / d_a)
    out[3] = k * (-(do_yaw + t_near * dd_yaw) / d_a)
    return 1


def neighborhood_counts(pts, double radius):
    cdef double[:, ::1] p = np.ascontiguousarray(pts, dtype=np.float64)
    cdef Py_ssize_t m = p.shape[0], i, j
    cdef double r2 = radius * radius, ddx, ddz
    cdef long long cnt
    out = np.zeros(m, dtype=np.int64)
    cdef long long[::1] o = out
    with nogil:
        for i in range(m):
            cnt = 0
            for j in range(m):
                ddx = p[j, 0] - p[i, 0]
                ddz = p[j, 1] - p[i, 1]
                if ddx * ddx + ddz * ddz < r2:
                    cnt += 1
            o[i] = cnt
    return out


def loss3d(pts, counts, double cx, double cz, double yaw, double hl, double hw,
           double ox, double oz, double lam):
    cdef double[:, ::1] p = np.ascontiguousarray(pts, dtype=np.float64)
    cdef long long[::1] e = np.ascontiguousarray(counts, dtype=np.int64)
    cdef Py_ssize_t m = p.shape[0], i
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double bg[4]
    cdef double br[4]
    cdef double total = 0.0, g0 = 0.0, g1 = 0.0, g2 = 0.0, w, px, pz, rxc, rzc, sx, sz
    cdef int n_deg = 0, bad = 0
    if m == 0:
        raise ValueError("loss_3d needs at least one RoI point")
    with nogil:
        for i in range(m):
            px = p[i, 0]
            pz = p[i, 1]
            w = 1.0 / <double>e[i]
            n_deg += _geometry(px, pz, cx, cz, c, s, hl, hw, bg)
            if _ray_tracing(px, pz, cx, cz, c, s, hl, hw, ox, oz, br) < 0:
                bad = 1
                break
            rxc = px - cx
            rzc = pz - cz
            sx = _sgn(rxc)
            sz = _sgn(rzc)
            total += (bg[0] + br[0] + lam * (fabs(rxc) + fabs(rzc))) * w
            g0 += (bg[1] + br[1] + lam * -sx) * w
            g1 += (bg[2] + br[2] + lam * -sz) * w
            g2 += (bg[3] + br[3] + lam * 0.0) * w
    if bad:
        raise ValueError("ray-tracing loss undefined: point coincides with camera origin")
    return total / m, g0 / m, g1 / m, g2 / m, n_deg


def min_norm_hull(G, int iters):
    cdef double[:, ::1] g = np.ascontiguousarray(G, dtype=np.float64)
    cdef Py_ssize_t k = g.shape[0], n = g.shape[1], i, j, best
    cdef double best_dot, dot, dd, vd, d, a
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] v = out
    lam_arr = np.full(k, 1.0 / k)
    cdef double[::1] lam = lam_arr
    cdef int it
    with nogil:
        for j in range(n):
            v[j] = 0.0
            for i in range(k):
                v[j] += lam[i] * g[i, j]
        for it in range(iters):
            best = 0
            best_dot = INFINITY
            for i in range(k):
                dot = 0.0
                for j in range(n):
                    dot += g[i, j] * v[j]
                if dot < best_dot:
                    best_dot = dot
                    best = i
            dd = 0.0
            vd = 0.0
            for j in range(n):
                d = g[best, j] - v[j]
                dd += d * d
                vd += v[j] * d
            if dd == 0.0:
                break
            a = -vd / dd
            if a <= 0.0:
                break
            if a > 1.0:
                a = 1.0
            for i in range(k):
                lam[i] *= 1.0 - a
            lam[best] += a
            for j in range(n):
                v[j] = (1.0 - a) * v[j] + a * g[best, j]
    return out
