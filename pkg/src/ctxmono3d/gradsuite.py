"""Seeded finite-difference suites for every hand-written backward pass.

Piecewise-linear activations make a config kink-adjacent when a
pre-activation lies within ``KINK_MARGIN`` of zero; such configs are redrawn.
For the box losses the branch-signature rule of ``weak3d_losses`` applies.
"""
from __future__ import annotations

import math
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import d2od, encoders_toy as enc, rocm
from .synth_eval import SynthSceneConfig, gen_scene
from .weak3d_losses import (
    LOSS_NAMES, GradCheckReport, LossConfig, grad_check, is_kink_adjacent, relative_error,
)

KINK_MARGIN = 1e-4
FD_STEP = 1e-6
PIPELINE_THRESHOLD = 1e-3


def fd_gradient(f: Callable[[], float], arrays: List[np.ndarray], h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``arrays`` (perturbed in place)."""
    out = []
    for a in arrays:
        flat = a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            out.append((fp - fm) / (2 * h))
    return np.array(out)


def _flat(arrs) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrs])


def _near_kink(*pre) -> bool:
    return any(np.min(np.abs(z)) < KINK_MARGIN for z in pre if np.size(z))


# each case returns (analytic, numeric) or None when the draw is kink-adjacent


def _case_rocm(rng):
    n, d = int(rng.integers(1, 9)), int(rng.integers(2, 9))
    A, B = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    cfg = rocm.RocmConfig(float(rng.uniform(0.5, 20.0)), ("tai_to_m3d", "symmetric")[int(rng.integers(2))])
    _, g = rocm.rocm_loss(A, B, cfg)
    return g.ravel(), fd_gradient(lambda: rocm.rocm_loss(A, B, cfg)[0], [B])


def _case_alignment(name):
    def case(rng):
        n, d = int(rng.integers(1, 9)), int(rng.integers(2, 9))
        A, B = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        _, g = rocm.alignment_loss(name, A, B)
        return g.ravel(), fd_gradient(lambda: rocm.alignment_loss(name, A, B)[0], [B])
    return case


def _case_fuse(rng):
    mode = d2od.FUSION_MODES[int(rng.integers(len(d2od.FUSION_MODES)))]
    d, h, w = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    p = d2od.init_fusion(mode, d, int(rng.integers(1 << 30)))
    for a in p.arrays().values():
        a += rng.normal(0.0, 0.1, size=a.shape)
    Fc, Fs = rng.normal(size=(d, h, w)), rng.normal(size=(d, h, w))
    R = rng.normal(size=(d, h, w))
    out, cache = d2od.fuse(Fc, Fs, p, return_cache=True)
    pre = cache[2] if mode == "concat_mlp" else cache[8]
    if pre is not None and _near_kink(pre):
        return None
    gp, gc, gs = d2od.fuse_backward(p, cache, R)
    f = lambda: float(np.sum(d2od.fuse(Fc, Fs, p) * R))
    arrs = list(p.arrays().values())
    analytic = _flat([gp.arrays()[k] for k in p.arrays()] + [gc, gs])
    return analytic, fd_gradient(f, arrs + [Fc, Fs])


def _case_distill(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
    a, b = rng.normal(size=shape), rng.normal(size=shape)
    _, ga, gb = d2od.distill_mse(a, b)
    return _flat([ga, gb]), fd_gradient(lambda: d2od.distill_mse(a, b)[0], [a, b])


def _case_encode(rng):
    d_in, d_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    p = enc.init_params(int(rng.integers(1 << 30)), d_in, d_out)
    p.b1[:] = rng.normal(0.0, 0.1, size=p.b1.shape)
    x = rng.normal(size=(d_in, h, w))
    R = rng.normal(size=(d_out, h, w))
    out, cache = enc.encode(p, x, return_cache=True)
    pre = np.einsum("oc,chw->ohw", p.w1, x) + p.b1[:, None, None]
    if _near_kink(pre):
        return None
    g, gx = enc.encode_backward(p, cache, R)
    f = lambda: float(np.sum(enc.encode(p, x) * R))
    arrs = list(p.to_dict().values())
    return _flat(list(g.to_dict().values()) + [gx]), fd_gradient(f, arrs + [x])


def _case_roi_pool(rng):
    d, e = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    h, w = int(rng.integers(2, 8)), int(rng.integers(2, 8))
    F = rng.normal(size=(d, h, w))
    x0, y0 = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
    roi = enc.RoiRect(x0, y0, rng.uniform(x0 + 0.2, w), rng.uniform(y0 + 0.2, h))
    proj = enc.init_mlp(int(rng.integers(1 << 30)), d, e)
    proj.ba[:] = rng.normal(0.0, 0.1, size=proj.ba.shape)
    R = rng.normal(size=e)
    pooled = enc.roi_align(F, roi)
    if _near_kink(proj.wa @ pooled + proj.ba):
        return None
    y, cache = enc.roi_pool(F, roi, proj, return_cache=True)
    gp, gF = enc.roi_pool_backward(proj, cache, R)
    f = lambda: float(enc.roi_pool(F, roi, proj) @ R)
    arrs = list(proj.to_dict().values())
    return _flat(list(gp.to_dict().values()) + [gF]), fd_gradient(f, arrs + [F])


def pipeline_instance(seed: int, mode: Optional[str] = None):
    """A 4x4-grid d2od_fusion instance: (state, scene, cfg, head, frozen encoder)."""
    rng = np.random.default_rng(seed)
    mode = mode or d2od.FUSION_MODES[int(rng.integers(len(d2od.FUSION_MODES)))]
    scfg = SynthSceneConfig(n_objects=int(rng.integers(1, 3)), image_channels=4, image_size=(4, 4),
                            points_per_face=6, noise=0.02, seed=int(rng.integers(1 << 30)))
    scene = gen_scene(scfg)
    d = 4
    state = d2od.Stage2State(
        enc.init_params(int(rng.integers(1 << 30)), 4, d),
        d2od.init_fusion(mode, d, int(rng.integers(1 << 30))),
        None,
    )
    frozen = enc.init_params(int(rng.integers(1 << 30)), 4, d)
    cfg = d2od.StageConfig(regime="d2od_fusion", fusion_mode=mode, d=d)
    head = d2od.BoxHead.for_scene_config(scfg)
    return state, scene, cfg, head, frozen


def _pipeline_kinky(state, scene, cfg, head, frozen) -> bool:
    x = scene.image
    pre = np.einsum("oc,chw->ohw", state.encoder.w1, x) + state.encoder.b1[:, None, None]
    if _near_kink(pre):
        return True
    F_sp = enc.encode(state.encoder, x)
    F_ca = enc.encode(frozen, x)
    _, cache = d2od.fuse(F_ca, F_sp, state.fusion, return_cache=True)
    fpre = cache[2] if state.fusion.mode == "concat_mlp" else cache[8]
    if fpre is not None and _near_kink(fpre):
        return True
    for box, pts, roi in zip(scene.boxes, scene.points, scene.rois):
        if len(pts) == 0:
            continue
        xb = head.decode(enc.roi_align(F_sp, roi))
        if is_kink_adjacent("loss_3d", pts, xb, (box.length, box.width), cfg.loss, 1e-4):
            return True
    return False


def _case_pipeline(rng):
    state, scene, cfg, head, frozen = pipeline_instance(int(rng.integers(1 << 30)))
    if _pipeline_kinky(state, scene, cfg, head, frozen):
        return None
    _, grads = d2od.stage2_objective(state, [scene], cfg, head, frozen)
    f = lambda: d2od.stage2_objective(state, [scene], cfg, head, frozen)[0]["total"]
    arrs = list(state.encoder.to_dict().values()) + list(state.fusion.arrays().values())
    analytic = _flat(list(grads[0].to_dict().values()) + list(grads[1].arrays().values()))
    return analytic, fd_gradient(f, arrs)


CASES: Dict[str, Callable] = {
    "rocm": _case_rocm,
    "mse_alignment": _case_alignment("mse"),
    "kl_alignment": _case_alignment("kl"),
    "fuse": _case_fuse,
    "distill_mse": _case_distill,
    "encode": _case_encode,
    "roi_pool": _case_roi_pool,
    "pipeline": _case_pipeline,
}
SUITES = tuple(LOSS_NAMES) + tuple(CASES)


def threshold_for(suite: str, base: float) -> float:
    return max(base, PIPELINE_THRESHOLD) if suite == "pipeline" else base


def run_suite(name: str, n_trials: int = 100, seed: int = 0, cfg: LossConfig = LossConfig()) -> GradCheckReport:
    if name in LOSS_NAMES:
        return grad_check(name, n_trials, seed, cfg)
    if name not in CASES:
        raise ValueError(f"unknown gradient suite {name!r}; expected one of {SUITES}")
    rng = np.random.default_rng(seed)
    rep = GradCheckReport(name, n_trials, seed)
    while len(rep.errors) < n_trials and rep.n_excluded < 10 * n_trials:
        got = CASES[name](rng)
        if got is None:
            rep.n_excluded += 1
            continue
        rep.errors.append(relative_error(*got))
    rep.n_checked = len(rep.errors)
    if rep.errors:
        rep.max_rel_err = float(np.max(rep.errors))
        rep.median_rel_err = float(np.median(rep.errors))
    return rep
