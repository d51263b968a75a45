"""KITTI calibration, label and velodyne formats, projection and RoI-point extraction.

Camera frame: x right, y down, z forward.  BEV boxes live in the x-z plane
with ``yaw = -rotation_y`` and ``y_base`` the label's bottom-face y.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .geom_bev import BevBox

CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}
CLASSES = ("Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram", "Misc", "DontCare")
DIFFICULTIES = ("easy", "moderate", "hard")
# min bbox height (px), max occlusion level, max truncation
DIFFICULTY_LIMITS = {"easy": (40.0, 0, 0.15), "moderate": (25.0, 1, 0.30), "hard": (25.0, 2, 0.50)}


class KittiFormatError(ValueError):
    pass


# ---------------------------------------------------------------- calibration


@dataclass
class Calib:
    P2: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray
    # every key in file order, so serialisation reproduces the source
    entries: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for key, shape in CALIB_KEYS.items():
            m = np.asarray(getattr(self, key), dtype=np.float64)
            if m.shape != shape:
                raise KittiFormatError(f"{key} must be {shape}, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise KittiFormatError(f"{key} has non-finite entries")
            setattr(self, key, m)
        if not self.entries:
            self.entries = {k: getattr(self, k).ravel() for k in CALIB_KEYS}

    @classmethod
    def identity(cls, f: float = 1.0, cu: float = 0.0, cv: float = 0.0) -> "Calib":
        P2 = np.array([[f, 0, cu, 0], [0, f, cv, 0], [0, 0, 1, 0]], dtype=np.float64)
        return cls(P2, np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))

    def velo_to_cam(self) -> np.ndarray:
        """4x4 rectified-camera from velodyne transform ``R0_rect @ Tr_velo_to_cam``."""
        R = np.eye(4)
        R[:3, :3] = self.R0_rect
        T = np.eye(4)
        T[:3, :] = self.Tr_velo_to_cam
        return R @ T


def _floats(tokens: Sequence[str], where: str) -> List[float]:
    out = []
    for j, t in enumerate(tokens):
        try:
            v = float(t)
        except ValueError:
            raise KittiFormatError(f"{where}, field {j + 1}: malformed number {t!r}") from None
        out.append(v)
    return out


def parse_calib(text: str) -> Calib:
    entries: Dict[str, np.ndarray] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise KittiFormatError(f"calib line {ln}: expected 'name: values'")
        key = key.strip()
        vals = np.array(_floats(rest.split(), f"calib line {ln} ({key})"))
        if key in CALIB_KEYS:
            n = int(np.prod(CALIB_KEYS[key]))
            if vals.size != n:
                raise KittiFormatError(f"calib line {ln}: {key} needs {n} values, got {vals.size}")
        entries[key] = vals
    for key in CALIB_KEYS:
        if key not in entries:
            raise KittiFormatError(f"calib is missing key '{key}:'")
    mats = {k: entries[k].reshape(s) for k, s in CALIB_KEYS.items()}
    return Calib(mats["P2"], mats["R0_rect"], mats["Tr_velo_to_cam"], entries)


def serialize_calib(calib: Calib) -> str:
    entries = dict(calib.entries)
    for k in CALIB_KEYS:
        entries[k] = getattr(calib, k).ravel()
    lines = [f"{k}: " + " ".join("%.12e" % v for v in vals) for k, vals in entries.items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- labels


@dataclass(frozen=True)
class LabelRecord:
    cls: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: Tuple[float, float, float, float]  # x1, y1, x2, y2 (px)
    dims: Tuple[float, float, float]  # h, w, l (m)
    location: Tuple[float, float, float]  # x, y, z (m), bottom center
    rotation_y: float
    score: Optional[float] = None

    @property
    def is_dontcare(self) -> bool:
        return self.cls == "DontCare"

    @property
    def height_px(self) -> float:
        return self.bbox[3] - self.bbox[1]

    def to_bev_box(self) -> BevBox:
        h, w, l = self.dims
        x, y, z = self.location
        return BevBox(x, z, -self.rotation_y, l, w, y_base=y, height=h)

    @classmethod
    def from_bev_box(cls, box: BevBox, bbox=(0.0, 0.0, 1.0, 1.0), name: str = "Car",
                     score: Optional[float] = None, truncation: float = 0.0, occlusion: int = 0) -> "LabelRecord":
        y = box.y_base if box.y_base is not None else 0.0
        h = box.height if box.height is not None else 1.5
        ry = -box.yaw
        alpha = ry - math.atan2(box.cx, box.cz)
        return cls(name, truncation, occlusion, alpha, tuple(bbox), (h, box.width, box.length),
                   (box.cx, y, box.cz), ry, score)


def _check_label(rec: LabelRecord, where: str) -> None:
    x1, y1, x2, y2 = rec.bbox
    if not (x1 < x2 and y1 < y2):
        raise KittiFormatError(f"{where}: bbox needs x1<x2 and y1<y2, got {rec.bbox}")
    if not rec.is_dontcare and not all(d > 0 for d in rec.dims):
        raise KittiFormatError(f"{where}: dims must be positive, got {rec.dims}")
    if rec.occlusion not in (-1, 0, 1, 2, 3):
        raise KittiFormatError(f"{where}: occlusion must be in 0..3, got {rec.occlusion}")


def parse_label_line(line: str, ln: int = 1) -> LabelRecord:
    tok = line.split()
    if len(tok) not in (15, 16):
        raise KittiFormatError(f"label line {ln}: expected 15 or 16 fields, got {len(tok)}")
    v = _floats(tok[1:], f"label line {ln}")
    occ = v[1]
    if occ != int(occ):
        raise KittiFormatError(f"label line {ln}, field 3: occlusion must be an integer")
    rec = LabelRecord(
        tok[0], v[0], int(occ), v[2], (v[3], v[4], v[5], v[6]), (v[7], v[8], v[9]),
        (v[10], v[11], v[12]), v[13], v[14] if len(v) == 15 else None,
    )
    _check_label(rec, f"label line {ln}")
    return rec


def parse_labels(text: str) -> List[LabelRecord]:
    return [parse_label_line(line, ln) for ln, line in enumerate(text.splitlines(), 1) if line.strip()]


def format_label(rec: LabelRecord) -> str:
    vals = (rec.truncation, rec.occlusion, rec.alpha, *rec.bbox, *rec.dims, *rec.location, rec.rotation_y)
    s = "%s %.2f %d %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f" % (rec.cls, *vals)
    if rec.score is not None:
        s += " " + repr(float(rec.score))
    return s


def serialize_labels(records: Sequence[LabelRecord]) -> str:
    return "".join(format_label(r) + "\n" for r in records)


def normalize_labels(text: str) -> str:
    """Canonical formatting of a label file (what ``serialize_labels`` emits)."""
    return serialize_labels(parse_labels(text))


def difficulty(rec: LabelRecord) -> Optional[str]:
    """Easiest difficulty level whose limits the record meets, or None."""
    if rec.is_dontcare:
        return None
    for name in DIFFICULTIES:
        if meets_difficulty(rec, name):
            return name
    return None


def meets_difficulty(rec: LabelRecord, level: str) -> bool:
    min_h, max_occ, max_trunc = DIFFICULTY_LIMITS[level]
    return rec.height_px >= min_h and 0 <= rec.occlusion <= max_occ and rec.truncation <= max_trunc


# ---------------------------------------------------------------- velodyne


def read_velodyne(buf: bytes) -> np.ndarray:
    """(N, 4) float32 array of x, y, z, intensity."""
    if len(buf) % 16:
        raise KittiFormatError(f"velodyne byte length {len(buf)} is not divisible by 16")
    return np.frombuffer(buf, dtype="<f4").reshape(-1, 4).astype(np.float32)


def write_velodyne(cloud) -> bytes:
    arr = np.asarray(cloud)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"cloud must be N x 4, got {arr.shape}")
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


# ---------------------------------------------------------------- projection and RoI points


def velo_to_cam(cloud, calib: Calib) -> np.ndarray:
    xyz = np.asarray(cloud, dtype=np.float64)[:, :3]
    hom = np.hstack([xyz, np.ones((len(xyz), 1))])
    return (hom @ calib.velo_to_cam().T)[:, :3]


def project_cam_to_image(x_cam: np.ndarray, calib: Calib):
    """``(uv, depth, valid)`` for camera-frame points; depth <= 0 is flagged invalid."""
    x_cam = np.asarray(x_cam, dtype=np.float64).reshape(-1, 3)
    hom = np.hstack([x_cam, np.ones((len(x_cam), 1))])
    img = hom @ calib.P2.T
    depth = x_cam[:, 2]
    valid = depth > 0
    w = np.where(img[:, 2] != 0, img[:, 2], np.nan)
    uv = img[:, :2] / w[:, None]
    return uv, depth, valid


def project_velo_to_image(cloud, calib: Calib):
    return project_cam_to_image(velo_to_cam(cloud, calib), calib)


def box_to_mask(bbox: Sequence[float], image_shape: Tuple[int, int]) -> np.ndarray:
    """Pixels whose center lies in the closed box."""
    x1, y1, x2, y2 = bbox
    h, w = image_shape
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    return ((rows >= y1) & (rows <= y2))[:, None] & ((cols >= x1) & (cols <= x2))[None, :]


def _pixel_index(uv: np.ndarray):
    with np.errstate(invalid="ignore"):
        return np.floor(uv[:, 0]), np.floor(uv[:, 1])


@dataclass(frozen=True)
class HeightFilter:
    """Optional camera-frame y band applied to RoI points (off by default).

    With a label, keep ``y_base - height - margin <= y <= y_base - ground_margin``;
    without one, keep ``y < y_ground - ground_margin``.
    """

    enabled: bool = False
    margin: float = 0.3
    ground_margin: float = 0.1
    y_ground: float = 1.65

    def keep(self, y: np.ndarray, label: Optional[LabelRecord] = None) -> np.ndarray:
        if not self.enabled:
            return np.ones(len(y), dtype=bool)
        if label is not None:
            y_base, h = label.location[1], label.dims[0]
            return (y >= y_base - h - self.margin) & (y <= y_base - self.ground_margin)
        return y < self.y_ground - self.ground_margin


Region = Union[Tuple[float, float, float, float], np.ndarray]


def extract_roi_points(cloud, calib: Calib, region: Region,
                       height_filter: HeightFilter = HeightFilter(),
                       label: Optional[LabelRecord] = None,
                       image_shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Camera-frame ``(x, z)`` of points projecting into a 2D box or boolean mask.

    A point belongs to the region when its pixel ``(floor(u), floor(v))`` does;
    for a box that means the pixel center lies inside it, so a box and its
    ``box_to_mask`` raster select the same points.
    """
    x_cam = velo_to_cam(cloud, calib)
    uv, depth, valid = project_cam_to_image(x_cam, calib)
    col, row = _pixel_index(uv)
    ok = valid & np.isfinite(col) & np.isfinite(row)
    mask = np.asarray(region)
    if mask.dtype == bool and mask.ndim == 2:
        h, w = mask.shape
        if image_shape is not None and tuple(image_shape) != (h, w):
            raise ValueError(f"mask shape {mask.shape} differs from image shape {image_shape}")
        inside = ok & (col >= 0) & (col < w) & (row >= 0) & (row < h)
        idx = np.flatnonzero(inside)
        inside[idx] = mask[row[idx].astype(int), col[idx].astype(int)]
    else:
        x1, y1, x2, y2 = (float(v) for v in region)
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"invalid region {region}")
        if image_shape is not None:
            h, w = image_shape
            if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
                raise ValueError(f"region {region} exceeds image {w}x{h}")
        with np.errstate(invalid="ignore"):
            cu, cv = col + 0.5, row + 0.5
            inside = ok & (cu >= x1) & (cu <= x2) & (cv >= y1) & (cv <= y2)
        if image_shape is not None:
            inside &= (col >= 0) & (col < image_shape[1]) & (row >= 0) & (row < image_shape[0])
    inside &= height_filter.keep(x_cam[:, 1], label)
    return x_cam[inside][:, [0, 2]]


# ---------------------------------------------------------------- frames and splits


def frame_name(frame) -> str:
    s = str(frame).strip()
    if not s.isdigit() or len(s) > 6:
        raise ValueError(f"frame id must be up to 6 digits, got {frame!r}")
    return s.zfill(6)


def load_id_list(text: str) -> List[str]:
    ids = []
    for ln, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        try:
            ids.append(frame_name(s))
        except ValueError as e:
            raise KittiFormatError(f"id list line {ln}: {e}") from None
    return ids


def png_size(path) -> Tuple[int, int]:
    """(height, width) from a PNG header."""
    with open(path, "rb") as f:
        head = f.read(24)
    if head[:8] != b"\x89PNG\r\n\x1a\n" or head[12:16] != b"IHDR":
        raise KittiFormatError(f"{path}: not a PNG file")
    w, h = struct.unpack(">II", head[16:24])
    return h, w


@dataclass
class KittiFrame:
    frame_id: str
    calib: Calib
    cloud: np.ndarray
    labels: List[LabelRecord]
    image_shape: Optional[Tuple[int, int]] = None


def _read_text(path: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing file: {path}")
    with open(path, "r") as f:
        return f.read()


def load_frame(root, frame) -> KittiFrame:
    """Load ``calib/``, ``velodyne/`` and (when present) ``label_2/`` and ``image_2/`` for one frame."""
    fid = frame_name(frame)
    root = os.fspath(root)
    calib = parse_calib(_read_text(os.path.join(root, "calib", fid + ".txt")))
    vpath = os.path.join(root, "velodyne", fid + ".bin")
    if not os.path.isfile(vpath):
        raise FileNotFoundError(f"missing file: {vpath}")
    with open(vpath, "rb") as f:
        cloud = read_velodyne(f.read())
    lpath = os.path.join(root, "label_2", fid + ".txt")
    labels = parse_labels(_read_text(lpath)) if os.path.isfile(lpath) else []
    ipath = os.path.join(root, "image_2", fid + ".png")
    shape = png_size(ipath) if os.path.isfile(ipath) else None
    return KittiFrame(fid, calib, cloud, labels, shape)


def read_label_dir(path, frames: Optional[Sequence[str]] = None) -> Dict[str, List[LabelRecord]]:
    """Label (or detection) files of a directory keyed by frame id, sorted."""
    path = os.fspath(path)
    if frames is None:
        frames = sorted(f[:-4] for f in os.listdir(path) if f.endswith(".txt"))
    out = {}
    for fid in frames:
        fid = frame_name(fid)
        p = os.path.join(path, fid + ".txt")
        out[fid] = parse_labels(_read_text(p)) if os.path.isfile(p) else []
    return out


def write_label_dir(path, records: Dict[str, Sequence[LabelRecord]]) -> None:
    os.makedirs(path, exist_ok=True)
    for fid in sorted(records):
        with open(os.path.join(path, frame_name(fid) + ".txt"), "w") as f:
            f.write(serialize_labels(records[fid]))
