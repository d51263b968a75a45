"""Synthetic scenes with known ground truth, and rotated-IoU detection metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .geom_bev import BevBox, box_corners, rotated_iou_bev
from .encoders_toy import RoiRect

GEOM_CHANNELS = 3


@dataclass(frozen=True)
class SynthSceneConfig:
    n_objects: int = 4
    length_range: Tuple[float, float] = (3.5, 4.5)
    width_range: Tuple[float, float] = (1.5, 1.9)
    cx_range: Tuple[float, float] = (-8.0, 8.0)
    cz_range: Tuple[float, float] = (10.0, 30.0)
    yaw_range: Tuple[float, float] = (-math.pi, math.pi)
    points_per_face: int = 20
    noise: float = 0.0
    scene_signature_strength: float = 1.0
    seed: int = 0
    image_channels: int = 8
    image_size: Tuple[int, int] = (16, 16)
    signature_dim: int = 16
    n_classes: int = 4
    class_seed: int = 12345
    camera_origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        for name in ("length_range", "width_range", "cx_range", "cz_range", "yaw_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.image_channels <= GEOM_CHANNELS:
            raise ValueError(f"image_channels must exceed {GEOM_CHANNELS}")


@dataclass
class Scene:
    boxes: List[BevBox]
    points: List[np.ndarray]  # per object, (M, 2) BEV points
    image: np.ndarray  # (c, h, w) toy image
    rois: List[RoiRect]
    classes: List[int]
    signature: np.ndarray  # (signature_dim,)
    seed: int

    def object_mask(self) -> np.ndarray:
        _, h, w = self.image.shape
        mask = np.zeros((h, w), dtype=bool)
        for r in self.rois:
            mask[int(r.y0):int(r.y1), int(r.x0):int(r.x1)] = True
        return mask

    def signature_grid(self, channels: int, strength: float) -> np.ndarray:
        """Additive scene-signature pattern over the object regions, ``(channels, h, w)``."""
        sig = np.resize(self.signature, channels)
        return strength * sig[:, None, None] * self.object_mask()[None, :, :]


def face_normals(box: BevBox) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(start corner, end corner, outward normal) per face, CCW."""
    cs = [np.asarray(c) for c in box_corners(box)]
    out = []
    for i in range(4):
        a, b = cs[i], cs[(i + 1) % 4]
        e = b - a
        n = np.array([e[1], -e[0]]) / np.linalg.norm(e)
        out.append((a, b, n))
    return out


def visible_faces(box: BevBox, camera=(0.0, 0.0)) -> List[int]:
    """Indices of faces whose supporting line the camera sees from the outer side."""
    cam = np.asarray(camera, dtype=np.float64)
    idx = []
    for i, (a, _, n) in enumerate(face_normals(box)):
        if float(n @ (cam - a)) > 0.0:
            idx.append(i)
    return idx


def sample_face_points(box: BevBox, n_per_face: int, rng: np.random.Generator,
                       noise: float = 0.0, camera=(0.0, 0.0)) -> np.ndarray:
    faces = face_normals(box)
    chunks = []
    for i in visible_faces(box, camera):
        a, b, _ = faces[i]
        t = rng.uniform(0.0, 1.0, size=n_per_face)
        chunks.append(a[None, :] + t[:, None] * (b - a)[None, :])
    pts = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 2))
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    return pts


def class_patterns(cfg: SynthSceneConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.class_seed)
    k = cfg.image_channels - GEOM_CHANNELS
    pats = rng.normal(size=(cfg.n_classes, k))
    return pats / np.linalg.norm(pats, axis=1, keepdims=True)


def geometry_code(box: BevBox, cfg: SynthSceneConfig) -> np.ndarray:
    """Pose encoded into [-1, 1] channel values; yaw is folded modulo pi."""
    cx_mid, cx_half = _mid_half(cfg.cx_range)
    cz_mid, cz_half = _mid_half(cfg.cz_range)
    yaw = fold_yaw(box.yaw)
    return np.array([(box.cx - cx_mid) / cx_half, (box.cz - cz_mid) / cz_half, yaw / (0.5 * math.pi)])


def fold_yaw(yaw: float) -> float:
    """Representative of ``yaw`` modulo pi in [-pi/2, pi/2)."""
    return (yaw + 0.5 * math.pi) % math.pi - 0.5 * math.pi


def _mid_half(r):
    lo, hi = r
    half = 0.5 * (hi - lo)
    return 0.5 * (hi + lo), (half if half > 0 else 1.0)


def _sample_boxes(cfg: SynthSceneConfig, rng: np.random.Generator) -> List[BevBox]:
    boxes: List[BevBox] = []
    attempts = 0
    while len(boxes) < cfg.n_objects:
        attempts += 1
        if attempts > 1000 * max(cfg.n_objects, 1):
            raise RuntimeError("could not place non-overlapping boxes; widen the center range")
        b = BevBox(
            rng.uniform(*cfg.cx_range), rng.uniform(*cfg.cz_range), rng.uniform(*cfg.yaw_range),
            rng.uniform(*cfg.length_range), rng.uniform(*cfg.width_range),
        )
        if any(rotated_iou_bev(b, o) > 0.0 for o in boxes):
            continue
        boxes.append(b)
    return boxes


def gen_scene(cfg: SynthSceneConfig) -> Scene:
    rng = np.random.default_rng(cfg.seed)
    boxes = _sample_boxes(cfg, rng)
    points = [
        sample_face_points(b, cfg.points_per_face, rng, cfg.noise, cfg.camera_origin) for b in boxes
    ]
    c = cfg.image_channels
    h, w = cfg.image_size
    signature = rng.normal(size=cfg.signature_dim)
    signature /= np.linalg.norm(signature)
    classes = [int(k) for k in rng.integers(0, cfg.n_classes, size=len(boxes))]
    image = rng.normal(0.0, 0.05, size=(c, h, w))
    pats = class_patterns(cfg)
    sig_img = np.resize(signature, c - GEOM_CHANNELS)

    # objects occupy disjoint tiles of the toy image
    n_tiles = max(1, math.ceil(math.sqrt(max(len(boxes), 1))))
    th, tw = h // n_tiles, w // n_tiles
    rois = []
    for k, b in enumerate(boxes):
        ti, tj = divmod(k, n_tiles)
        rh, rw = max(1, th // 2), max(1, tw // 2)
        y0 = ti * th + int(rng.integers(0, th - rh + 1))
        x0 = tj * tw + int(rng.integers(0, tw - rw + 1))
        vec = np.concatenate([geometry_code(b, cfg), pats[classes[k]] + cfg.scene_signature_strength * sig_img])
        image[:, y0:y0 + rh, x0:x0 + rw] = vec[:, None, None]
        rois.append(RoiRect(float(x0), float(y0), float(x0 + rw), float(y0 + rh)))
    return Scene(boxes, points, image, rois, classes, signature, cfg.seed)


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class DetectionRecord:
    box: BevBox
    score: float = 1.0
    cls: str = "Car"
    frame: str = "000000"

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass
class MatchResult:
    order: List[int]  # detection indices in descending score order
    tp: List[bool]  # per sorted detection
    gt_matched: List[bool]
    ignored: List[bool] = field(default_factory=list)  # per sorted detection


def _sort_order(dets: Sequence[DetectionRecord]) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_detections(
    dets: Sequence[DetectionRecord],
    gts: Sequence[DetectionRecord],
    iou_threshold: float,
    iou_fn: Callable[[BevBox, BevBox], float] = rotated_iou_bev,
    gt_ignore: Optional[Sequence[bool]] = None,
) -> MatchResult:
    """Greedy matching in descending score order, restricted to equal frame ids.

    Each detection takes the unmatched GT with the highest IoU (ties to the
    lower GT index) if that IoU reaches the threshold.  A detection whose best
    candidate is an ignored GT is flagged ``ignored`` (neither TP nor FP).
    """
    order = _sort_order(dets)
    gt_ignore = list(gt_ignore) if gt_ignore is not None else [False] * len(gts)
    matched = [False] * len(gts)
    tp, ignored = [], []
    for di in order:
        d = dets[di]
        best, best_iou = -1, -1.0
        for gi, g in enumerate(gts):
            if matched[gi] or g.frame != d.frame:
                continue
            iou = iou_fn(d.box, g.box)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            matched[best] = True
            tp.append(not gt_ignore[best])
            ignored.append(gt_ignore[best])
        else:
            tp.append(False)
            ignored.append(False)
    return MatchResult(order, tp, [m and not ig for m, ig in zip(matched, gt_ignore)], ignored)


def precision_recall(tp: Sequence[bool], n_gt: int, ignored: Optional[Sequence[bool]] = None):
    if n_gt <= 0:
        raise ValueError("AP undefined with zero ground-truth objects")
    ignored = ignored or [False] * len(tp)
    recall, precision = [], []
    n_tp = n_fp = 0
    for t, ig in zip(tp, ignored):
        if ig:
            continue
        if t:
            n_tp += 1
        else:
            n_fp += 1
        recall.append(n_tp / n_gt)
        precision.append(n_tp / (n_tp + n_fp))
    return np.array(recall), np.array(precision)


def recall_points(mode: str) -> List[float]:
    if mode == "R11":
        return [k / 10 for k in range(11)]
    if mode == "R40":
        return [k / 40 for k in range(1, 41)]
    raise ValueError(f"unknown AP mode {mode!r}; expected R11 or R40")


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, mode: str) -> float:
    pts = recall_points(mode)
    vals = []
    for r in pts:
        sel = precision[recall >= r]
        vals.append(float(sel.max()) if sel.size else 0.0)
    # exactly rounded sum, so hand-derived fractions are reproduced bit for bit
    return math.fsum(vals) / len(pts)


def ap_interpolated(
    dets: Sequence[DetectionRecord],
    gts: Sequence[DetectionRecord],
    iou_threshold: float,
    mode: str = "R11",
    iou_fn: Callable[[BevBox, BevBox], float] = rotated_iou_bev,
    gt_ignore: Optional[Sequence[bool]] = None,
) -> float:
    gt_ignore = list(gt_ignore) if gt_ignore is not None else [False] * len(gts)
    n_gt = sum(1 for ig in gt_ignore if not ig)
    if n_gt == 0:
        raise ValueError("AP undefined with zero ground-truth objects")
    m = match_detections(dets, gts, iou_threshold, iou_fn, gt_ignore)
    recall, precision = precision_recall(m.tp, n_gt, m.ignored)
    return interpolated_ap(recall, precision, mode)


# ---------------------------------------------------------------- box recovery trials


@dataclass
class RecoveryTrial:
    trial: int
    scene_seed: int
    gt: BevBox
    fit: Optional[BevBox]
    n_points: int
    iou: float
    yaw_err_deg: float
    center_err: float
    trace: List[float]

    @property
    def success(self) -> bool:
        return self.fit is not None and self.iou > 0.9 and self.yaw_err_deg < 2.0


def recovery_trial(trial: int, seed: int = 0, noise: float = 0.02,
                   perturb: Tuple[float, float, float] = (0.5, 0.5, 0.2),
                   loss_cfg=None, opt_cfg=None) -> RecoveryTrial:
    """Fit one synthetic object from an init offset by ``perturb`` with random signs."""
    from .weak3d_losses import BoxParams, LossConfig, OptimizerConfig, fit_box, yaw_error

    scene_seed = seed * 100000 + trial
    scene = gen_scene(SynthSceneConfig(n_objects=1, noise=noise, seed=scene_seed))
    gt, pts = scene.boxes[0], scene.points[0]
    sgn = np.random.default_rng([scene_seed, 1]).choice([-1.0, 1.0], size=3)
    if len(pts) == 0:
        return RecoveryTrial(trial, scene_seed, gt, None, 0, 0.0, float("nan"), float("nan"), [])
    init = BoxParams(gt.cx + perturb[0] * sgn[0], gt.cz + perturb[1] * sgn[1], gt.yaw + perturb[2] * sgn[2])
    res = fit_box(pts, init, (gt.length, gt.width), loss_cfg or LossConfig(), opt_cfg or OptimizerConfig())
    fb = res.params.to_box(gt.length, gt.width)
    return RecoveryTrial(
        trial, scene_seed, gt, fb, len(pts), rotated_iou_bev(fb, gt),
        math.degrees(yaw_error(fb.yaw, gt.yaw)), math.hypot(fb.cx - gt.cx, fb.cz - gt.cz), res.trace,
    )
