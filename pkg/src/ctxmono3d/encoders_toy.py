"""Small deterministic encoders, RoI pooling and MLP projections with exact backward passes.

Feature grids are plain ``(d, h, w)`` float64 arrays.  Grid cell ``(i, j)``
covers ``[j, j+1] x [i, i+1]`` in continuous RoI coordinates and its value
sits at the cell center.

Parameter record format (little-endian)::

    8 bytes   magic b"CTXM3DP1"
    uint32    number of arrays
    per array:
      uint16  name length, then UTF-8 name
      uint8   ndim, then ndim x uint32 dims
      float64 values, row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from typing import Dict, List, Sequence, Tuple

import numpy as np

LEAK = 0.01
MAGIC = b"CTXM3DP1"


def leaky(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAK * z)


def leaky_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, LEAK)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class _ParamsMixin:
    def to_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Dict[str, np.ndarray], prefix: str = ""):
        return cls(**{f.name: np.array(d[prefix + f.name], dtype=np.float64) for f in fields(cls)})

    def copy(self):
        return type(self)(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def zeros_like(self):
        return type(self)(**{f.name: np.zeros_like(getattr(self, f.name)) for f in fields(self)})

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, f.name).ravel() for f in fields(self)])

    def axpy(self, alpha: float, other) -> None:
        """In-place ``self += alpha * other``."""
        for f in fields(self):
            getattr(self, f.name)[...] += alpha * getattr(other, f.name)

    def equals(self, other) -> bool:
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


@dataclass
class ToyEncoderParams(_ParamsMixin):
    w1: np.ndarray  # (hidden, d_in) pointwise
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (d_out, hidden, 3, 3)
    b2: np.ndarray  # (d_out,)

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w2.shape[0]


@dataclass
class MlpParams(_ParamsMixin):
    wa: np.ndarray  # (hidden, d_in)
    ba: np.ndarray
    wb: np.ndarray  # (d_out, hidden)
    bb: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "MlpParams":
        """Identity weights; the map is the identity on non-negative inputs (leaky hidden layer)."""
        eye = np.eye(d)
        return cls(eye.copy(), np.zeros(d), eye.copy(), np.zeros(d))


def init_params(seed: int, d_in: int, d_out: int, d_hidden: int | None = None) -> ToyEncoderParams:
    if min(d_in, d_out) < 1:
        raise ValueError("encoder dims must be >= 1")
    hid = d_hidden or d_out
    rng = np.random.default_rng(seed)
    return ToyEncoderParams(
        w1=glorot(rng, (hid, d_in), d_in, hid),
        b1=np.zeros(hid),
        w2=glorot(rng, (d_out, hid, 3, 3), 9 * hid, 9 * d_out),
        b2=np.zeros(d_out),
    )


def init_mlp(seed: int, d_in: int, d_out: int, d_hidden: int | None = None) -> MlpParams:
    hid = d_hidden or d_out
    rng = np.random.default_rng(seed)
    return MlpParams(
        wa=glorot(rng, (hid, d_in), d_in, hid),
        ba=np.zeros(hid),
        wb=glorot(rng, (d_out, hid), hid, d_out),
        bb=np.zeros(d_out),
    )


def check_grid(x: np.ndarray, channels: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ValueError(f"feature grid must be (d, h, w) with positive dims, got {x.shape}")
    if channels is not None and x.shape[0] != channels:
        raise ValueError(f"expected {channels} channels, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature grid has non-finite entries")
    return x


# ---------------------------------------------------------------- encoder


def encode(params: ToyEncoderParams, image: np.ndarray, return_cache: bool = False):
    """Pointwise conv -> leaky ReLU -> 3x3 conv (zero padding, size preserving)."""
    x = check_grid(image, params.d_in)
    _, h, w = x.shape
    z = np.einsum("ci,ihw->chw", params.w1, x) + params.b1[:, None, None]
    a = leaky(z)
    ap = np.pad(a, ((0, 0), (1, 1), (1, 1)))
    y = np.broadcast_to(params.b2[:, None, None], (params.d_out, h, w)).copy()
    for di in range(3):
        for dj in range(3):
            y += np.einsum("oc,chw->ohw", params.w2[:, :, di, dj], ap[:, di:di + h, dj:dj + w])
    if return_cache:
        return y, (x, z, ap)
    return y


def encode_backward(params: ToyEncoderParams, cache, grad_out: np.ndarray):
    """Returns ``(param_grads, grad_image)`` for an upstream gradient on the output."""
    x, z, ap = cache
    _, h, w = x.shape
    g = np.asarray(grad_out, dtype=np.float64)
    gw2 = np.zeros_like(params.w2)
    gap = np.zeros_like(ap)
    for di in range(3):
        for dj in range(3):
            win = ap[:, di:di + h, dj:dj + w]
            gw2[:, :, di, dj] = np.einsum("ohw,chw->oc", g, win)
            gap[:, di:di + h, dj:dj + w] += np.einsum("oc,ohw->chw", params.w2[:, :, di, dj], g)
    gz = gap[:, 1:-1, 1:-1] * leaky_grad(z)
    grads = ToyEncoderParams(
        w1=np.einsum("chw,ihw->ci", gz, x),
        b1=gz.sum(axis=(1, 2)),
        w2=gw2,
        b2=g.sum(axis=(1, 2)),
    )
    return grads, np.einsum("ci,chw->ihw", params.w1, gz)


# ---------------------------------------------------------------- MLP


def mlp_forward(p: MlpParams, x: np.ndarray, return_cache: bool = False):
    x = np.asarray(x, dtype=np.float64)
    z = p.wa @ x + p.ba
    y = p.wb @ leaky(z) + p.bb
    if return_cache:
        return y, (x, z)
    return y


def mlp_backward(p: MlpParams, cache, grad_out: np.ndarray):
    x, z = cache
    a = leaky(z)
    gz = (p.wb.T @ grad_out) * leaky_grad(z)
    grads = MlpParams(wa=np.outer(gz, x), ba=gz, wb=np.outer(grad_out, a), bb=np.array(grad_out, dtype=np.float64))
    return grads, p.wa.T @ gz


# ---------------------------------------------------------------- RoI pooling

BINS = 2
SAMPLES = 2  # per bin and axis: 4 samples per bin


@dataclass(frozen=True)
class RoiRect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"empty RoI {self}")

    def scaled(self, sx: float, sy: float) -> "RoiRect":
        return RoiRect(self.x0 * sx, self.y0 * sy, self.x1 * sx, self.y1 * sy)


def _axis_taps(lo: float, hi: float, n: int):
    """Per sample along one axis: (index0, index1, weight0, weight1)."""
    k = BINS * SAMPLES
    pos = lo + (np.arange(k) + 0.5) * (hi - lo) / k - 0.5
    pos = np.clip(pos, 0.0, n - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    a = pos - i0
    return i0, i1, 1.0 - a, a


def roi_weights(roi: RoiRect, h: int, w: int):
    """Sparse bilinear stencil: (rows, cols, weights) whose weighted sum is the pooled mean."""
    if roi.x0 < 0 or roi.y0 < 0 or roi.x1 > w or roi.y1 > h:
        raise ValueError(f"RoI {roi} outside grid of size {h}x{w}")
    yi0, yi1, wy0, wy1 = _axis_taps(roi.y0, roi.y1, h)
    xi0, xi1, wx0, wx1 = _axis_taps(roi.x0, roi.x1, w)
    rows, cols, wts = [], [], []
    for ry, wy in ((yi0, wy0), (yi1, wy1)):
        for rx, wx in ((xi0, wx0), (xi1, wx1)):
            rows.append(np.repeat(ry, rx.size))
            cols.append(np.tile(rx, ry.size))
            wts.append(np.outer(wy, wx).ravel())
    n = (BINS * SAMPLES) ** 2
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(wts) / n


def roi_align(F: np.ndarray, roi: RoiRect) -> np.ndarray:
    """Bilinear RoI average: 2x2 bins, 4 samples per bin, mean over all samples per channel."""
    F = check_grid(F)
    rows, cols, wts = roi_weights(roi, F.shape[1], F.shape[2])
    return F[:, rows, cols] @ wts


def roi_align_backward(shape: Tuple[int, int, int], roi: RoiRect, grad_out: np.ndarray) -> np.ndarray:
    d, h, w = shape
    rows, cols, wts = roi_weights(roi, h, w)
    g = np.zeros(shape)
    flat = g.reshape(d, h * w)
    np.add.at(flat.T, rows * w + cols, np.outer(wts, grad_out))
    return g


def roi_pool(F: np.ndarray, roi: RoiRect, proj: MlpParams, return_cache: bool = False):
    pooled = roi_align(F, roi)
    y, mcache = mlp_forward(proj, pooled, return_cache=True)
    if return_cache:
        return y, (np.shape(F), roi, mcache)
    return y


def roi_pool_backward(proj: MlpParams, cache, grad_out: np.ndarray):
    """Returns ``(proj_grads, grad_F)``."""
    shape, roi, mcache = cache
    pgrads, gpooled = mlp_backward(proj, mcache, grad_out)
    return pgrads, roi_align_backward(shape, roi, gpooled)


def multiscale_concat(features: Sequence[np.ndarray], roi: RoiRect, projs: Sequence[MlpParams]) -> np.ndarray:
    """Concatenate per-scale pooled embeddings; ``roi`` is in the first grid's coordinates."""
    if not features:
        raise ValueError("multiscale_concat needs at least one feature grid")
    if len(projs) != len(features):
        raise ValueError("one projection per scale is required")
    h0, w0 = np.shape(features[0])[1:]
    parts = []
    for F, p in zip(features, projs):
        h, w = np.shape(F)[1:]
        parts.append(roi_pool(F, roi.scaled(w / w0, h / h0), p))
    return np.concatenate(parts)


# ---------------------------------------------------------------- binary record


def save_record(path, arrays: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_record(arrays))


def dump_record(arrays: Dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f8", order="C")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)))
        out.append(key)
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def load_record(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_record(fh.read())


def parse_record(buf: bytes) -> Dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise ValueError("not a parameter record (bad magic tag)")
    off = 8
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    out: Dict[str, np.ndarray] = {}
    for _ in range(n):
        (klen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + klen].decode("utf-8")
        off += klen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        nbytes = 8 * count
        if off + nbytes > len(buf):
            raise ValueError(f"truncated record at array {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(buf):
        raise ValueError("trailing bytes after parameter record")
    return out
