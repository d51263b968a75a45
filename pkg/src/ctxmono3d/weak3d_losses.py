"""LiDAR RoI-point losses on a BEV box, their analytic gradients, and a box fitter.

All gradients are taken with respect to ``(cx, cz, yaw)``; box dimensions are
held fixed.  The losses are piecewise smooth: at L1 kinks the subgradient uses
``sign(0) = 0`` and at edge switches the currently active edge is held fixed.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels_py as _ref
from ._backend import kernels
from .geom_bev import BevBox, Vec2, normalize_angle


@dataclass(frozen=True)
class BoxParams:
    cx: float
    cz: float
    yaw: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cz, self.yaw])

    @classmethod
    def from_array(cls, a) -> "BoxParams":
        return cls(float(a[0]), float(a[1]), normalize_angle(float(a[2])))

    @classmethod
    def from_box(cls, box: BevBox) -> "BoxParams":
        return cls(box.cx, box.cz, box.yaw)

    def to_box(self, length: float, width: float, **lift) -> BevBox:
        return BevBox(self.cx, self.cz, self.yaw, length, width, **lift)


@dataclass
class LossGrad:
    value: float
    grad: np.ndarray
    degenerate: int = 0  # points that hit the defined fallback (p at box center)


@dataclass(frozen=True)
class LossConfig:
    neighborhood_radius: float = 0.2
    lam: float = 0.1
    camera_origin: Tuple[float, float] = (0.0, 0.0)
    subgradient_epsilon: float = 1e-6

    def __post_init__(self):
        if not self.neighborhood_radius > 0:
            raise ValueError("neighborhood_radius must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 500
    tol: float = 1e-6
    armijo_c: float = 1e-4
    shrink: float = 0.5
    step0: float = 1.0
    min_step: float = 1e-9
    # stall escape at nonsmooth creases: gradients sampled on a small ball
    sample_radius: float = 1e-2
    sample_radius_min: float = 1e-7
    n_samples: int = 16
    hull_iters: int = 100
    sample_seed: int = 0
    # extra starts at these yaw offsets from the initial guess; best final loss wins
    yaw_restarts: Tuple[float, ...] = (0.25, -0.25, 0.5, -0.5)


class FitDivergenceError(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"box fit diverged at iteration {iteration} (loss={value})")
        self.iteration = iteration


def as_points(pts) -> np.ndarray:
    arr = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(arr)):
        raise ValueError("RoI points must be finite")
    return arr


def _lg(term) -> LossGrad:
    v, g0, g1, g2, _ = term
    return LossGrad(v, np.array([g0, g1, g2]))


def geometry_alignment_loss(p: Sequence[float], box: BevBox) -> LossGrad:
    v, g0, g1, g2, br = _ref.geometry_term(
        float(p[0]), float(p[1]), box.cx, box.cz, box.yaw, 0.5 * box.length, 0.5 * box.width
    )
    return LossGrad(v, np.array([g0, g1, g2]), degenerate=int(br is None))


def ray_tracing_loss(p: Sequence[float], box: BevBox, cfg: LossConfig = LossConfig()) -> LossGrad:
    ox, oz = cfg.camera_origin
    return _lg(
        _ref.ray_tracing_term(
            float(p[0]), float(p[1]), box.cx, box.cz, box.yaw,
            0.5 * box.length, 0.5 * box.width, float(ox), float(oz),
        )
    )


def center_loss(p: Sequence[float], box: BevBox) -> LossGrad:
    return _lg(_ref.center_term(float(p[0]), float(p[1]), box.cx, box.cz))


def neighborhood_counts(pts, radius: float) -> np.ndarray:
    """Number of points within strict distance ``radius`` of each point, itself included."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    return kernels.neighborhood_counts(as_points(pts), float(radius))


def loss_3d(pts, box: BevBox, cfg: LossConfig = LossConfig(), counts=None) -> LossGrad:
    """Density-balanced sum of geometry, ray-tracing and weighted center losses.

    ``counts`` may be passed to reuse precomputed neighbourhood counts; they
    depend only on the points and are constant with respect to the box.
    """
    arr = as_points(pts)
    if arr.shape[0] == 0:
        raise ValueError("loss_3d needs at least one RoI point")
    if counts is None:
        counts = neighborhood_counts(arr, cfg.neighborhood_radius)
    ox, oz = cfg.camera_origin
    v, g0, g1, g2, n_deg = kernels.loss3d(
        arr, np.asarray(counts, dtype=np.int64), box.cx, box.cz, box.yaw,
        0.5 * box.length, 0.5 * box.width, float(ox), float(oz), float(cfg.lam),
    )
    return LossGrad(v, np.array([g0, g1, g2]), degenerate=n_deg)


# ---------------------------------------------------------------- fitting


@dataclass
class FitResult:
    params: BoxParams
    trace: List[float]
    iterations: int
    converged: bool


def min_norm_hull_point(G: np.ndarray, iters: int = 100) -> np.ndarray:
    """Minimum-norm point of the convex hull of the rows of ``G``."""
    return kernels.min_norm_hull(np.asarray(G, dtype=np.float64), int(iters))


class _Objective:
    """``loss_3d`` on a fixed point set, called straight into the kernel."""

    def __init__(self, pts: np.ndarray, dims, cfg: LossConfig):
        self.pts = np.ascontiguousarray(pts, dtype=np.float64)
        self.counts = kernels.neighborhood_counts(self.pts, cfg.neighborhood_radius)
        self.hl, self.hw = 0.5 * dims[0], 0.5 * dims[1]
        self.ox, self.oz = (float(v) for v in cfg.camera_origin)
        self.lam = float(cfg.lam)
        self.n_evals = 0

    def __call__(self, x):
        self.n_evals += 1
        v, g0, g1, g2, _ = kernels.loss3d(
            self.pts, self.counts, float(x[0]), float(x[1]), float(x[2]),
            self.hl, self.hw, self.ox, self.oz, self.lam,
        )
        return v, np.array([g0, g1, g2])


def _line_search(f, x, fx, d, step, opt: OptimizerConfig, it: int):
    """Backtrack along ``-d`` until Armijo holds; returns ``(x, f, g, step)`` or None."""
    dn2 = float(d @ d)
    while step >= opt.min_step:
        cand = x - step * d
        cand[2] = normalize_angle(cand[2])
        fv, gv = f(cand)
        if not math.isfinite(fv):
            raise FitDivergenceError(it, fv)
        if fv < fx and fv <= fx - opt.armijo_c * step * dn2:
            return cand, fv, gv, step
        step *= opt.shrink
    return None


def _descend(f, x0: np.ndarray, opt: OptimizerConfig, ball: np.ndarray):
    x = x0.copy()
    fx, g = f(x)
    if not math.isfinite(fx):
        raise FitDivergenceError(0, fx)
    trace = [fx]
    step = opt.step0
    converged = False
    it = 0
    for it in range(1, opt.max_iters + 1):
        if np.max(np.abs(g)) < opt.tol:
            converged = True
            break
        found = _line_search(f, x, fx, g, step, opt, it)
        radius = opt.sample_radius
        while found is None and radius >= opt.sample_radius_min:
            G = np.array([g] + [f(x + radius * u)[1] for u in ball])
            d = min_norm_hull_point(G, opt.hull_iters)
            radius *= 0.1
            if np.max(np.abs(d)) >= opt.tol:
                found = _line_search(f, x, fx, d, opt.step0, opt, it)
        if found is None:
            converged = True
            break
        x, fx, g, step = found
        trace.append(fx)
        step = min(step * 2.0, opt.step0)
    return x, trace, it, converged


def fit_box(
    pts,
    init: BoxParams,
    dims: Tuple[float, float],
    cfg: LossConfig = LossConfig(),
    opt: OptimizerConfig = OptimizerConfig(),
) -> FitResult:
    """Fit box pose to RoI points by minimising ``loss_3d``.

    Gradient descent with Armijo backtracking.  When no step along the
    negative gradient decreases the loss (the iterate sits on a crease
    between smooth pieces), the direction is replaced by the minimum-norm
    convex combination of gradients sampled on a shrinking ball around the
    iterate.  The descent is repeated from ``init`` and from each yaw offset in
    ``opt.yaw_restarts``; the run with the lowest final loss is returned, with
    its own (non-increasing) trace.
    """
    arr = as_points(pts)
    if arr.shape[0] == 0:
        raise ValueError("fit_box needs at least one RoI point")
    f = _Objective(arr, dims, cfg)
    rng = np.random.default_rng(opt.sample_seed)
    ball = rng.normal(size=(opt.n_samples, 3))
    ball /= np.linalg.norm(ball, axis=1, keepdims=True)

    x0 = init.as_array()
    best = None
    for off in (0.0,) + tuple(opt.yaw_restarts):
        start = x0 + np.array([0.0, 0.0, off])
        start[2] = normalize_angle(start[2])
        run = _descend(f, start, opt, ball)
        if best is None or run[1][-1] < best[1][-1]:
            best = run
    x, trace, it, converged = best
    return FitResult(BoxParams.from_array(x), trace, it, converged)


def yaw_error(a: float, b: float) -> float:
    """Absolute yaw difference modulo pi (a box is symmetric under a half turn)."""
    d = abs(normalize_angle(a - b))
    return min(d, math.pi - d)


# ---------------------------------------------------------------- gradient checks

LOSS_NAMES = ("geometry", "ray_tracing", "center", "loss_3d")


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x, dtype=np.float64)
    for k in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[k] += h
        xm.flat[k] -= h
        g.flat[k] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def _signature(name: str, pts: np.ndarray, x: np.ndarray, dims, cfg: LossConfig):
    hl, hw = 0.5 * dims[0], 0.5 * dims[1]
    ox, oz = cfg.camera_origin
    sig = []
    for px, pz in pts.tolist():
        parts = []
        if name in ("geometry", "loss_3d"):
            parts.append(_ref.geometry_term(px, pz, x[0], x[1], x[2], hl, hw)[4])
        if name in ("ray_tracing", "loss_3d"):
            parts.append(_ref.ray_tracing_term(px, pz, x[0], x[1], x[2], hl, hw, ox, oz)[4])
        if name in ("center", "loss_3d"):
            parts.append(_ref.center_term(px, pz, x[0], x[1])[4])
        sig.append(tuple(parts))
    return tuple(sig)


def _has_zero_sign(sig) -> bool:
    for per_point in sig:
        for part in per_point:
            if part is None:
                return True
            if len(part) >= 2 and 0.0 in part[-2:]:
                return True
    return False


def is_kink_adjacent(name, pts, x, dims, cfg: LossConfig, h: float) -> bool:
    """True if any stencil point (+-h, +-eps along each parameter) changes the active branch.

    Exact kinks (an L1 residual component equal to zero, or p at the box
    center) are always excluded.
    """
    base = _signature(name, pts, x, dims, cfg)
    if _has_zero_sign(base):
        return True
    for k in range(3):
        for d in (h, -h, cfg.subgradient_epsilon, -cfg.subgradient_epsilon):
            xs = x.copy()
            xs[k] += d
            if _signature(name, pts, xs, dims, cfg) != base:
                return True
    return False


def _loss_fn(name: str, pts: np.ndarray, dims, cfg: LossConfig):
    length, width = dims
    counts = kernels.neighborhood_counts(pts, cfg.neighborhood_radius) if name == "loss_3d" else None

    def f(x) -> LossGrad:
        box = BevBox(x[0], x[1], x[2], length, width)
        if name == "geometry":
            return geometry_alignment_loss(pts[0], box)
        if name == "ray_tracing":
            return ray_tracing_loss(pts[0], box, cfg)
        if name == "center":
            return center_loss(pts[0], box)
        return loss_3d(pts, box, cfg, counts=counts)

    return f


def random_config(name: str, rng: np.random.Generator):
    """A random box and RoI point set in front of the camera."""
    x = np.array([rng.uniform(-8, 8), rng.uniform(8, 35), rng.uniform(-math.pi, math.pi)])
    dims = (float(rng.uniform(3.0, 5.0)), float(rng.uniform(1.4, 2.2)))
    m = 1 if name != "loss_3d" else int(rng.integers(3, 40))
    ang = rng.uniform(-math.pi, math.pi, size=m)
    rad = rng.uniform(0.3, 1.6, size=m) * 0.5 * math.hypot(*dims)
    pts = np.stack([x[0] + rad * np.cos(ang), x[1] + rad * np.sin(ang)], axis=1)
    return x, dims, pts


@dataclass
class GradCheckReport:
    loss_name: str
    n_trials: int
    seed: int
    n_checked: int = 0
    n_excluded: int = 0
    max_rel_err: float = 0.0
    median_rel_err: float = 0.0
    errors: List[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict:
        d = asdict(self)
        d.pop("errors")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def grad_check(
    loss_name: str,
    n_trials: int = 100,
    seed: int = 0,
    cfg: LossConfig = LossConfig(),
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on seeded random configs."""
    if loss_name not in LOSS_NAMES:
        raise ValueError(f"unknown loss {loss_name!r}; expected one of {LOSS_NAMES}")
    rng = np.random.default_rng(seed)
    rep = GradCheckReport(loss_name, n_trials, seed)
    # excluded configs are redrawn so that n_trials configs are actually compared
    while len(rep.errors) < n_trials and rep.n_excluded < 10 * n_trials:
        x, dims, pts = random_config(loss_name, rng)
        if is_kink_adjacent(loss_name, pts, x, dims, cfg, h):
            rep.n_excluded += 1
            continue
        f = _loss_fn(loss_name, pts, dims, cfg)
        analytic = f(x).grad
        numeric = central_difference(lambda y: f(y).value, x, h)
        rep.errors.append(relative_error(analytic, numeric))
    rep.n_checked = len(rep.errors)
    if rep.errors:
        rep.max_rel_err = float(np.max(rep.errors))
        rep.median_rel_err = float(np.median(rep.errors))
    return rep
