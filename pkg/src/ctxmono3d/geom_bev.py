"""Rotated-rectangle geometry in the bird's-eye-view (camera x-z) plane.

Conventions: ``x`` points right, ``z`` points forward; ``yaw`` rotates the
length axis from +x towards +z, so the local length axis is
``(cos yaw, sin yaw)``.  KITTI's ``rotation_y`` maps to ``yaw = -rotation_y``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

BOUNDARY_TOL = 1e-9
AREA_EPS = 1e-12


class Vec2(NamedTuple):
    x: float
    z: float


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class BevBox:
    cx: float
    cz: float
    yaw: float
    length: float
    width: float
    y_base: Optional[float] = None
    height: Optional[float] = None

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"box dims must be positive, got l={self.length} w={self.width}")
        if self.height is not None and not self.height > 0:
            raise ValueError(f"box height must be positive, got {self.height}")
        vals = (self.cx, self.cz, self.yaw, self.length, self.width)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box parameters {vals}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def center(self) -> Vec2:
        return Vec2(self.cx, self.cz)

    def with_pose(self, cx: float, cz: float, yaw: float) -> "BevBox":
        return replace(self, cx=cx, cz=cz, yaw=yaw)

    def to_local(self, p: Sequence[float]) -> Tuple[float, float]:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dz = p[0] - self.cx, p[1] - self.cz
        return c * dx + s * dz, -s * dx + c * dz

    def to_world(self, u: float, v: float) -> Vec2:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Vec2(self.cx + c * u - s * v, self.cz + s * u + c * v)


class Ray2(NamedTuple):
    origin: Vec2
    dir: Vec2

    @classmethod
    def through(cls, origin: Sequence[float], target: Sequence[float]) -> "Ray2":
        dx, dz = target[0] - origin[0], target[1] - origin[1]
        n = math.hypot(dx, dz)
        if n == 0.0:
            raise ValueError("ray direction undefined: origin coincides with target")
        return cls(Vec2(origin[0], origin[1]), Vec2(dx / n, dz / n))


class Hit(NamedTuple):
    t: float
    point: Vec2


def box_corners(box: BevBox) -> List[Vec2]:
    """Corners in counter-clockwise order, starting at local (-l/2, -w/2)."""
    hl, hw = 0.5 * box.length, 0.5 * box.width
    return [box.to_world(u, v) for u, v in ((-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw))]


def point_in_box(p: Sequence[float], box: BevBox, tol: float = BOUNDARY_TOL) -> bool:
    u, v = box.to_local(p)
    return abs(u) <= 0.5 * box.length + tol and abs(v) <= 0.5 * box.width + tol


def boundary_distance(p: Sequence[float], box: BevBox) -> float:
    """Unsigned distance from ``p`` to the rectangle boundary."""
    u, v = box.to_local(p)
    du = abs(u) - 0.5 * box.length
    dv = abs(v) - 0.5 * box.width
    if du <= 0 and dv <= 0:
        return -max(du, dv)
    return math.hypot(max(du, 0.0), max(dv, 0.0))


def _slab_interval(ray: Ray2, box: BevBox):
    """Parametric [t_enter, t_exit] of the ray's supporting line inside the box, or None."""
    ou, ov = box.to_local(ray.origin)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    du = c * ray.dir[0] + s * ray.dir[1]
    dv = -s * ray.dir[0] + c * ray.dir[1]
    t0, t1 = -math.inf, math.inf
    for o, d, h in ((ou, du, 0.5 * box.length), (ov, dv, 0.5 * box.width)):
        if abs(d) < 1e-15:
            if abs(o) > h + BOUNDARY_TOL:
                return None
            continue
        a, b = (-h - o) / d, (h - o) / d
        if a > b:
            a, b = b, a
        t0, t1 = max(t0, a), min(t1, b)
    if t1 < t0 - 1e-12:
        return None
    return t0, max(t1, t0)


def ray_box_intersections(ray: Ray2, box: BevBox) -> List[Hit]:
    """Boundary crossings of a ray with the box, at parameters ``t >= 0``, ascending.

    A ray starting inside the box yields only its exit; a ray grazing a corner
    yields a single hit.
    """
    iv = _slab_interval(ray, box)
    if iv is None:
        return []
    t0, t1 = iv
    if t1 < 0:
        return []
    ts = [t1] if (t1 - t0 <= 1e-12 or t0 < 0) else [t0, t1]
    ox, oz = ray.origin
    dx, dz = ray.dir
    return [Hit(t, Vec2(ox + t * dx, oz + t * dz)) for t in ts]


def polygon_area(poly: Sequence[Sequence[float]]) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    n = len(poly)
    acc = 0.0
    for i in range(n):
        x0, z0 = poly[i]
        x1, z1 = poly[(i + 1) % n]
        acc += x0 * z1 - x1 * z0
    return 0.5 * acc


def clip_convex(subject: Sequence[Vec2], clipper: Sequence[Vec2]) -> List[Vec2]:
    """Sutherland-Hodgman clipping of ``subject`` by the CCW convex polygon ``clipper``."""
    out = list(subject)
    m = len(clipper)
    for i in range(m):
        if not out:
            break
        ax, az = clipper[i]
        bx, bz = clipper[(i + 1) % m]
        ex, ez = bx - ax, bz - az

        def side(p):
            return ex * (p[1] - az) - ez * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_lerp(prev, cur, sp / (sp - sc)))
                out.append(cur)
            elif sp >= 0:
                out.append(_lerp(prev, cur, sp / (sp - sc)))
            prev, sp = cur, sc
    return out


def _lerp(p, q, a: float) -> Vec2:
    return Vec2(p[0] + a * (q[0] - p[0]), p[1] + a * (q[1] - p[1]))


def bev_intersection_area(a: BevBox, b: BevBox) -> float:
    poly = clip_convex(box_corners(a), box_corners(b))
    if len(poly) < 3:
        return 0.0
    area = abs(polygon_area(poly))
    return area if area >= AREA_EPS else 0.0


def _box_key(b: BevBox):
    return (b.cx, b.cz, b.yaw, b.length, b.width)


def rotated_iou_bev(a: BevBox, b: BevBox) -> float:
    # canonical argument order makes the result exactly symmetric
    if _box_key(b) < _box_key(a):
        a, b = b, a
    inter = bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.length * a.width + b.length * b.width - inter
    return min(1.0, max(0.0, inter / union))


def iou_3d(a: BevBox, b: BevBox) -> float:
    """BEV polygon overlap times vertical interval overlap, over union volume.

    Camera y points down, so a box spans ``[y_base - height, y_base]``.
    """
    if a.height is None or b.height is None or a.y_base is None or b.y_base is None:
        raise ValueError("iou_3d needs y_base and height on both boxes")
    if _box_key(b) < _box_key(a):
        a, b = b, a
    top = max(a.y_base - a.height, b.y_base - b.height)
    bottom = min(a.y_base, b.y_base)
    dy = bottom - top
    if dy <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dy
    if inter == 0.0:
        return 0.0
    vol_a = a.length * a.width * a.height
    vol_b = b.length * b.width * b.height
    return min(1.0, max(0.0, inter / (vol_a + vol_b - inter)))
