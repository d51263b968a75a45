"""Pure-Python per-point loss kernels.

Reference implementation of the hot loops; ``_kernels.pyx`` mirrors it
operation for operation.  Each scalar term returns ``(value, g_cx, g_cz,
g_yaw, branch)`` where ``branch`` identifies the active piece of the
piecewise-smooth loss (used to exclude kink-adjacent gradient checks).
"""
import math

import numpy as np


def _sgn(a):
    if a > 0.0:
        return 1.0
    if a < 0.0:
        return -1.0
    return 0.0


def geometry_term(px, pz, cx, cz, yaw, hl, hw):
    """L1 distance from p to where the ray center->p leaves the box."""
    dx = px - cx
    dz = pz - cz
    if dx == 0.0 and dz == 0.0:
        return 0.0, 0.0, 0.0, 0.0, None
    c = math.cos(yaw)
    s = math.sin(yaw)
    qu = c * dx + s * dz
    qv = -s * dx + c * dz
    mu = abs(qu) / hl
    mv = abs(qv) / hw
    if mu >= mv:
        m = mu
        k = _sgn(qu) / hl
        dm_cx, dm_cz, dm_yaw = k * -c, k * -s, k * qv
        axis = 0
    else:
        m = mv
        k = _sgn(qv) / hw
        dm_cx, dm_cz, dm_yaw = k * s, k * -c, k * -qu
        axis = 1
    f = 1.0 - 1.0 / m
    rx = dx * f
    rz = dz * f
    sx = _sgn(rx)
    sz = _sgn(rz)
    im2 = 1.0 / (m * m)
    # d r / d theta = dD * f + D * dm / m^2, with dD/dcx = (-1, 0), dD/dcz = (0, -1)
    g_cx = sx * (-f + dx * dm_cx * im2) + sz * (dz * dm_cx * im2)
    g_cz = sx * (dx * dm_cz * im2) + sz * (-f + dz * dm_cz * im2)
    g_yaw = sx * (dx * dm_yaw * im2) + sz * (dz * dm_yaw * im2)
    return abs(rx) + abs(rz), g_cx, g_cz, g_yaw, (axis, sx, sz)


def ray_tracing_term(px, pz, cx, cz, yaw, hl, hw, ox, oz):
    """L1 distance from p to the camera-nearer box hit of the ray camera->p; 0 on miss."""
    ex = px - ox
    ez = pz - oz
    n = math.sqrt(ex * ex + ez * ez)
    if n == 0.0:
        raise ValueError("ray-tracing loss undefined: point coincides with camera origin")
    ex /= n
    ez /= n
    c = math.cos(yaw)
    s = math.sin(yaw)
    wx = ox - cx
    wz = oz - cz
    ou = c * wx + s * wz
    ov = -s * wx + c * wz
    du = c * ex + s * ez
    dv = -s * ex + c * ez
    t_near = -math.inf
    t_far = math.inf
    axis = -1
    for a, o, d, h in ((0, ou, du, hl), (1, ov, dv, hw)):
        if abs(d) < 1e-15:
            if abs(o) > h:
                return 0.0, 0.0, 0.0, 0.0, (0,)
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
        return 0.0, 0.0, 0.0, 0.0, (0,)
    rx = px - (ox + t_near * ex)
    rz = pz - (oz + t_near * ez)
    if axis == 0:
        d_a, do_cx, do_cz, do_yaw, dd_yaw = du, -c, -s, ov, dv
    else:
        d_a, do_cx, do_cz, do_yaw, dd_yaw = dv, s, -c, -ou, -du
    dt_cx = -do_cx / d_a
    dt_cz = -do_cz / d_a
    dt_yaw = -(do_yaw + t_near * dd_yaw) / d_a
    sx = _sgn(rx)
    sz = _sgn(rz)
    k = -(sx * ex + sz * ez)
    return abs(rx) + abs(rz), k * dt_cx, k * dt_cz, k * dt_yaw, (1, axis, sx, sz)


def center_term(px, pz, cx, cz):
    rx = px - cx
    rz = pz - cz
    sx = _sgn(rx)
    sz = _sgn(rz)
    return abs(rx) + abs(rz), -sx, -sz, 0.0, (sx, sz)


def neighborhood_counts(pts, radius):
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    m = pts.shape[0]
    r2 = radius * radius
    out = np.zeros(m, dtype=np.int64)
    xs = pts[:, 0].tolist()
    zs = pts[:, 1].tolist()
    for i in range(m):
        xi, zi = xs[i], zs[i]
        cnt = 0
        for j in range(m):
            ddx = xs[j] - xi
            ddz = zs[j] - zi
            if ddx * ddx + ddz * ddz < r2:
                cnt += 1
        out[i] = cnt
    return out


def loss3d(pts, counts, cx, cz, yaw, hl, hw, ox, oz, lam):
    """Balanced mean of geometry + ray-tracing + lam * center terms.

    Returns ``(value, g_cx, g_cz, g_yaw, n_degenerate)``.
    """
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    m = pts.shape[0]
    if m == 0:
        raise ValueError("loss_3d needs at least one RoI point")
    total = g0 = g1 = g2 = 0.0
    n_deg = 0
    for i in range(m):
        px = float(pts[i, 0])
        pz = float(pts[i, 1])
        w = 1.0 / float(counts[i])
        vg, a0, a1, a2, br = geometry_term(px, pz, cx, cz, yaw, hl, hw)
        if br is None:
            n_deg += 1
        vr, b0, b1, b2, _ = ray_tracing_term(px, pz, cx, cz, yaw, hl, hw, ox, oz)
        vc, c0, c1, c2, _ = center_term(px, pz, cx, cz)
        total += (vg + vr + lam * vc) * w
        g0 += (a0 + b0 + lam * c0) * w
        g1 += (a1 + b1 + lam * c1) * w
        g2 += (a2 + b2 + lam * c2) * w
    return total / m, g0 / m, g1 / m, g2 / m, n_deg


def min_norm_hull(G, iters):
    """Minimum-norm point in the convex hull of the rows of G (Frank-Wolfe, exact line search)."""
    G = np.ascontiguousarray(G, dtype=np.float64)
    k, n = G.shape
    rows = G.tolist()
    lam = [1.0 / k] * k
    v = [sum(lam[i] * rows[i][j] for i in range(k)) for j in range(n)]
    for _ in range(iters):
        best = 0
        best_dot = math.inf
        for i in range(k):
            dot = 0.0
            for j in range(n):
                dot += rows[i][j] * v[j]
            if dot < best_dot:
                best_dot = dot
                best = i
        dd = 0.0
        vd = 0.0
        for j in range(n):
            d = rows[best][j] - v[j]
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
            v[j] = (1.0 - a) * v[j] + a * rows[best][j]
    return np.array(v)
