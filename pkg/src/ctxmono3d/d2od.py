"""Dual-encoder feature fusion, MSE distillation and the toy training regimes.

Stage 1 aligns a trainable encoder's object embeddings with those of a frozen
context encoder.  Stage 2 trains a spatial encoder with the box losses,
optionally distilling a frozen pre-trained encoder into it through a fusion
module which is dropped at inference.

Tokens: a ``(d, h, w)`` grid is handled as ``h*w`` tokens of ``d`` dims.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import encoders_toy as enc
from .encoders_toy import MlpParams, RoiRect, ToyEncoderParams
from .geom_bev import BevBox
from .rocm import RocmConfig, alignment_loss
from .synth_eval import Scene, SynthSceneConfig
from .weak3d_losses import LossConfig, loss_3d

FUSION_MODES = ("concat_mlp", "cross_attention", "cross_attention_ffn")
REGIMES = ("one_stage", "two_stage", "double_encoder_distillation", "d2od_fusion")


# ---------------------------------------------------------------- fusion


class FusionParams:
    """Named arrays for one fusion mode.

    concat_mlp:  ``out = ws @ x + w2 @ leaky(w1 @ x + b1) + b2`` with ``x = [ca; sp]``
    attention:   ``y = sp + softmax(q k^T / sqrt(d)) v``; ``q`` from sp, ``k, v`` from ca
    with FFN:    ``out = y + f2 @ leaky(f1 @ y + fb1) + fb2``
    """

    def __init__(self, mode: str, arrays: Dict[str, np.ndarray]):
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self._arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def arrays(self) -> Dict[str, np.ndarray]:
        return self._arrays

    def __getattr__(self, name):
        try:
            return self.__dict__["_arrays"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def d(self) -> int:
        a = self._arrays
        return a["ws"].shape[0] if self.mode == "concat_mlp" else a["wq"].shape[0]

    def copy(self) -> "FusionParams":
        return FusionParams(self.mode, {k: v.copy() for k, v in self._arrays.items()})

    def zeros_like(self) -> "FusionParams":
        return FusionParams(self.mode, {k: np.zeros_like(v) for k, v in self._arrays.items()})

    def to_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {prefix + "mode": np.array([float(FUSION_MODES.index(self.mode))])}
        out.update({prefix + k: v for k, v in self._arrays.items()})
        return out

    @classmethod
    def from_dict(cls, d: Dict[str, np.ndarray], prefix: str = "") -> "FusionParams":
        mode = FUSION_MODES[int(d[prefix + "mode"][0])]
        arrays = {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix) and k != prefix + "mode"}
        return cls(mode, arrays)

    def equals(self, other: "FusionParams") -> bool:
        return self.mode == other.mode and all(
            np.array_equal(v, other._arrays[k]) for k, v in self._arrays.items()
        )

    @classmethod
    def select_sp(cls, d: int, seed: int = 0) -> "FusionParams":
        """concat_mlp configured so that the fused output equals ``F_sp``."""
        p = init_fusion("concat_mlp", d, seed)
        p._arrays["ws"][:] = np.hstack([np.zeros((d, d)), np.eye(d)])
        p._arrays["w2"][:] = 0.0
        return p


def init_fusion(mode: str, d: int, seed: int) -> FusionParams:
    rng = np.random.default_rng(seed)
    g = enc.glorot
    if mode == "concat_mlp":
        arrays = dict(
            ws=g(rng, (d, 2 * d), 2 * d, d),
            w1=g(rng, (d, 2 * d), 2 * d, d),
            b1=np.zeros(d),
            w2=g(rng, (d, d), d, d),
            b2=np.zeros(d),
        )
    elif mode in ("cross_attention", "cross_attention_ffn"):
        arrays = dict(wq=g(rng, (d, d), d, d), wk=g(rng, (d, d), d, d), wv=g(rng, (d, d), d, d))
        if mode == "cross_attention_ffn":
            arrays.update(
                f1=g(rng, (4 * d, d), d, 4 * d), fb1=np.zeros(4 * d),
                f2=g(rng, (d, 4 * d), 4 * d, d), fb2=np.zeros(d),
            )
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return FusionParams(mode, arrays)


def _tokens(F: np.ndarray) -> np.ndarray:
    d = F.shape[0]
    return F.reshape(d, -1).T


def _grid(T: np.ndarray, shape) -> np.ndarray:
    return T.T.reshape(shape)


def fuse(F_ca: np.ndarray, F_sp: np.ndarray, params: FusionParams, return_cache: bool = False):
    F_ca = enc.check_grid(F_ca)
    F_sp = enc.check_grid(F_sp)
    if F_ca.shape != F_sp.shape:
        raise ValueError(f"fusion inputs differ in shape: {F_ca.shape} vs {F_sp.shape}")
    if F_sp.shape[0] != params.d:
        raise ValueError(f"fusion params expect d={params.d}, got {F_sp.shape[0]}")
    shape = F_sp.shape
    Xc, Xs = _tokens(F_ca), _tokens(F_sp)
    p = params
    if p.mode == "concat_mlp":
        X = np.hstack([Xc, Xs])
        H = X @ p.w1.T + p.b1
        Z = X @ p.ws.T + enc.leaky(H) @ p.w2.T + p.b2
        cache = (shape, X, H)
    else:
        d = shape[0]
        Q, K, V = Xs @ p.wq.T, Xc @ p.wk.T, Xc @ p.wv.T
        S = Q @ K.T / math.sqrt(d)
        S = S - S.max(axis=1, keepdims=True)
        A = np.exp(S)
        A /= A.sum(axis=1, keepdims=True)
        Y = Xs + A @ V
        Z, H = Y, None
        if p.mode == "cross_attention_ffn":
            H = Y @ p.f1.T + p.fb1
            Z = Y + enc.leaky(H) @ p.f2.T + p.fb2
        cache = (shape, Xc, Xs, Q, K, V, A, Y, H)
    out = _grid(Z, shape)
    return (out, cache) if return_cache else out


def fuse_backward(params: FusionParams, cache, grad_out: np.ndarray):
    """Returns ``(param_grads, grad_F_ca, grad_F_sp)``."""
    p = params
    gZ = _tokens(np.asarray(grad_out, dtype=np.float64))
    g = {}
    if p.mode == "concat_mlp":
        shape, X, H = cache
        d = shape[0]
        g["ws"] = gZ.T @ X
        g["b2"] = gZ.sum(axis=0)
        g["w2"] = gZ.T @ enc.leaky(H)
        gH = (gZ @ p.w2) * enc.leaky_grad(H)
        g["w1"] = gH.T @ X
        g["b1"] = gH.sum(axis=0)
        gX = gZ @ p.ws + gH @ p.w1
        gXc, gXs = gX[:, :d], gX[:, d:]
    else:
        shape, Xc, Xs, Q, K, V, A, Y, H = cache
        d = shape[0]
        gY = gZ
        if p.mode == "cross_attention_ffn":
            L = enc.leaky(H)
            g["f2"] = gZ.T @ L
            g["fb2"] = gZ.sum(axis=0)
            gH = (gZ @ p.f2) * enc.leaky_grad(H)
            g["f1"] = gH.T @ Y
            g["fb1"] = gH.sum(axis=0)
            gY = gZ + gH @ p.f1
        gXs = gY.copy()
        gA = gY @ V.T
        gV = A.T @ gY
        gS = A * (gA - np.sum(gA * A, axis=1, keepdims=True)) / math.sqrt(d)
        gQ = gS @ K
        gK = gS.T @ Q
        g["wq"] = gQ.T @ Xs
        g["wk"] = gK.T @ Xc
        g["wv"] = gV.T @ Xc
        gXs += gQ @ p.wq
        gXc = gK @ p.wk + gV @ p.wv
    grads = FusionParams(p.mode, {k: g[k] for k in p.arrays()})
    return grads, _grid(gXc, shape), _grid(gXs, shape)


def distill_mse(F_sp: np.ndarray, F_fused: np.ndarray):
    """Mean squared difference; returns ``(value, grad_F_sp, grad_F_fused)``."""
    a = np.asarray(F_sp, dtype=np.float64)
    b = np.asarray(F_fused, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    g = 2.0 * diff / diff.size
    return float(np.mean(diff * diff)), g, -g


def total_loss(mse: float, l3d: float) -> float:
    if mse < 0 or l3d < 0:
        raise ValueError("loss components must be non-negative")
    return mse + l3d


# ---------------------------------------------------------------- models and data


@dataclass
class ContextModel:
    """Frozen context encoder, its projection and the injected scene-signature strength."""

    encoder: ToyEncoderParams
    proj: MlpParams
    signature_strength: float = 1.0

    def features(self, scene: Scene) -> np.ndarray:
        F = enc.encode(self.encoder, scene.image)
        return F + scene.signature_grid(F.shape[0], self.signature_strength)

    def embeddings(self, scene: Scene) -> np.ndarray:
        F = self.features(scene)
        return np.array([enc.roi_pool(F, r, self.proj) for r in scene.rois])

    def copy(self) -> "ContextModel":
        return ContextModel(self.encoder.copy(), self.proj.copy(), self.signature_strength)

    def equals(self, other: "ContextModel") -> bool:
        return self.encoder.equals(other.encoder) and self.proj.equals(other.proj)


def make_context_model(seed: int, d_in: int, d: int, emb: int, signature_strength: float = 1.0) -> ContextModel:
    return ContextModel(enc.init_params(seed, d_in, d), enc.init_mlp(seed + 1, d, emb), signature_strength)


@dataclass(frozen=True)
class BoxHead:
    """Fixed linear read-out from the first pooled channels: ``param_k = scale_k * e_k + offset_k``."""

    scale: Tuple[float, float, float]
    offset: Tuple[float, float, float]

    @classmethod
    def for_scene_config(cls, cfg: SynthSceneConfig) -> "BoxHead":
        (x0, x1), (z0, z1) = cfg.cx_range, cfg.cz_range
        return cls(
            (0.5 * (x1 - x0), 0.5 * (z1 - z0), 0.5 * math.pi),
            (0.5 * (x1 + x0), 0.5 * (z1 + z0), 0.0),
        )

    def decode(self, pooled: np.ndarray) -> np.ndarray:
        return np.asarray(self.scale) * pooled[:3] + np.asarray(self.offset)

    def to_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {prefix + "scale": np.array(self.scale), prefix + "offset": np.array(self.offset)}

    @classmethod
    def from_dict(cls, d, prefix: str = "") -> "BoxHead":
        return cls(tuple(d[prefix + "scale"].tolist()), tuple(d[prefix + "offset"].tolist()))


@dataclass
class ToyDataset:
    scenes: List[Scene]
    scene_cfg: SynthSceneConfig

    def batches(self, batch_size: int) -> List[List[Scene]]:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return [self.scenes[i:i + batch_size] for i in range(0, len(self.scenes), batch_size)]


def make_toy_dataset(n_scenes: int = 8, n_objects: int = 4, seed: int = 1,
                     signature_strength: float = 1.0, noise: float = 0.02,
                     **overrides) -> ToyDataset:
    from .synth_eval import gen_scene

    cfg = SynthSceneConfig(n_objects=n_objects, noise=noise,
                           scene_signature_strength=signature_strength, seed=seed, **overrides)
    scenes = [gen_scene(replace(cfg, seed=seed * 1000 + k)) for k in range(n_scenes)]
    return ToyDataset(scenes, cfg)


# ---------------------------------------------------------------- optimisers


def _arrays(obj) -> Dict[str, np.ndarray]:
    if hasattr(obj, "arrays"):
        return obj.arrays()
    return {k: v for k, v in obj.to_dict().items()}


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Sequence, grads: Sequence) -> None:
        for p, g in zip(params, grads):
            ga = _arrays(g)
            for k, a in _arrays(p).items():
                a -= self.lr * ga[k]


class Adam:
    """``m = b1 m + (1-b1) g; v = b2 v + (1-b2) g^2; p -= lr * mhat / (sqrt(vhat) + eps)``."""

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.state: Dict[Tuple[int, str], Tuple[np.ndarray, np.ndarray]] = {}

    def step(self, params: Sequence, grads: Sequence) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            ga = _arrays(g)
            for k, a in _arrays(p).items():
                m, v = self.state.get((i, k), (np.zeros_like(a), np.zeros_like(a)))
                m = self.b1 * m + (1 - self.b1) * ga[k]
                v = self.b2 * v + (1 - self.b2) * ga[k] ** 2
                self.state[(i, k)] = (m, v)
                a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return Sgd(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 20
    lr: float = 0.01
    batch_size: int = 4
    seed: int = 0
    regime: str = "d2od_fusion"
    rocm: RocmConfig = RocmConfig()
    loss: LossConfig = LossConfig()
    alignment: str = "rocm"
    optimizer: str = "sgd"
    fusion_mode: str = "concat_mlp"
    stop_grad_fused: bool = False
    d: int = 16
    emb: int = 16
    task_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")


# ---------------------------------------------------------------- stage 1


def _alignment_step(scenes, context: ContextModel, encoder, proj, cfg: StageConfig, accumulate=True):
    """Alignment loss over all objects of a batch and grads for ``(encoder, proj)``."""
    caches, E_m3d, E_tai, owners = [], [], [], []
    for si, sc in enumerate(scenes):
        F, ecache = enc.encode(encoder, sc.image, return_cache=True)
        caches.append((F, ecache))
        E_tai.append(context.embeddings(sc))
        for r in sc.rois:
            e, pc = enc.roi_pool(F, r, proj, return_cache=True)
            E_m3d.append(e)
            owners.append((si, pc))
    if not owners:
        raise ValueError("degenerate batch: no objects")
    E_tai = np.vstack(E_tai)
    E_m3d = np.array(E_m3d)
    value, gE = alignment_loss(cfg.alignment, E_tai, E_m3d, cfg.rocm)
    g_enc, g_proj = encoder.zeros_like(), proj.zeros_like()
    gF = [np.zeros_like(F) for F, _ in caches]
    for row, (si, pc) in enumerate(owners):
        gp, gf = enc.roi_pool_backward(proj, pc, gE[row])
        g_proj.axpy(1.0, gp)
        gF[si] += gf
    for (F, ecache), gf in zip(caches, gF):
        ge, _ = enc.encode_backward(encoder, ecache, gf)
        g_enc.axpy(1.0, ge)
    return value, g_enc, g_proj, E_m3d


@dataclass
class Stage1Result:
    encoder: ToyEncoderParams
    proj: MlpParams
    curve: List[Dict[str, float]]


def run_stage1(cfg: StageConfig, data: ToyDataset, context: ContextModel,
               encoder: Optional[ToyEncoderParams] = None) -> Stage1Result:
    """Train a monocular encoder and projection on the alignment loss only."""
    batches = data.batches(cfg.batch_size)
    if not batches or any(sum(len(s.rois) for s in b) == 0 for b in batches):
        raise ValueError("degenerate batch: every batch needs at least one object")
    d_in = data.scenes[0].image.shape[0]
    encoder = encoder.copy() if encoder is not None else enc.init_params(cfg.seed, d_in, cfg.d)
    proj = enc.init_mlp(cfg.seed + 1, cfg.d, cfg.emb)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        vals = []
        for b in batches:
            v, g_enc, g_proj, _ = _alignment_step(b, context, encoder, proj, cfg)
            opt.step([encoder, proj], [g_enc, g_proj])
            vals.append(v)
        curve.append({"epoch": epoch, "total": math.fsum(vals) / len(vals), "align": math.fsum(vals) / len(vals)})
    return Stage1Result(encoder, proj, curve)


def scene_embeddings(encoder: ToyEncoderParams, proj: MlpParams, scenes: Sequence[Scene]):
    """Embeddings of every object and the index of its scene."""
    rows, owner = [], []
    for si, sc in enumerate(scenes):
        F = enc.encode(encoder, sc.image)
        for r in sc.rois:
            rows.append(enc.roi_pool(F, r, proj))
            owner.append(si)
    return np.array(rows), np.array(owner)


def grouping_margin(E: np.ndarray, owner: np.ndarray) -> Tuple[float, float]:
    """Mean cosine similarity of distinct same-scene pairs and of cross-scene pairs."""
    En = E / np.linalg.norm(E, axis=1, keepdims=True)
    S = En @ En.T
    same = owner[:, None] == owner[None, :]
    off = ~np.eye(len(owner), dtype=bool)
    return float(S[same & off].mean()), float(S[~same].mean())


# ---------------------------------------------------------------- stage 2


@dataclass
class Stage2State:
    encoder: ToyEncoderParams
    fusion: Optional[FusionParams]
    proj: Optional[MlpParams]  # trained alongside in one_stage only

    def trainables(self) -> List:
        return [p for p in (self.encoder, self.fusion, self.proj) if p is not None]


def task_loss_scene(F_sp: np.ndarray, scene: Scene, head: BoxHead, cfg: LossConfig):
    """Mean ``loss_3d`` over a scene's objects with boxes decoded from ``F_sp``; returns ``(value, grad_F)``."""
    total = 0.0
    gF = np.zeros_like(F_sp)
    n = 0
    scale = np.asarray(head.scale)
    for box, pts, roi in zip(scene.boxes, scene.points, scene.rois):
        if len(pts) == 0:
            continue
        pooled = enc.roi_align(F_sp, roi)
        cx, cz, yaw = head.decode(pooled)
        lg = loss_3d(pts, BevBox(cx, cz, yaw, box.length, box.width), cfg)
        total += lg.value
        g_pooled = np.zeros_like(pooled)
        g_pooled[:3] = scale * lg.grad
        gF += enc.roi_align_backward(F_sp.shape, roi, g_pooled)
        n += 1
    if n == 0:
        return 0.0, gF
    return total / n, gF / n


def stage2_objective(state: Stage2State, scenes: Sequence[Scene], cfg: StageConfig, head: BoxHead,
                     frozen: Optional[ToyEncoderParams] = None, context: Optional[ContextModel] = None):
    """Batch objective of one regime.

    Returns ``(components, grads)`` where ``components`` has keys
    ``total, mse, l3d, align`` and ``grads`` parallels ``state.trainables()``.
    """
    regime = cfg.regime
    g_enc = state.encoder.zeros_like()
    g_fus = state.fusion.zeros_like() if state.fusion is not None else None
    g_proj = state.proj.zeros_like() if state.proj is not None else None
    mse_sum = l3d_sum = 0.0
    n = len(scenes)
    for sc in scenes:
        F_sp, ecache = enc.encode(state.encoder, sc.image, return_cache=True)
        l3d, gF = task_loss_scene(F_sp, sc, head, cfg.loss)
        l3d_sum += l3d
        gF = cfg.task_weight * gF
        if regime in ("double_encoder_distillation", "d2od_fusion"):
            F_ca = enc.encode(frozen, sc.image)
            if regime == "d2od_fusion":
                F_fused, fcache = fuse(F_ca, F_sp, state.fusion, return_cache=True)
                mse, g_sp, g_fused = distill_mse(F_sp, F_fused)
                gF = gF + g_sp
                if not cfg.stop_grad_fused:
                    gp, _, g_sp_via = fuse_backward(state.fusion, fcache, g_fused)
                    _axpy(g_fus, 1.0 / n, gp)
                    gF = gF + g_sp_via
            else:
                mse, g_sp, _ = distill_mse(F_sp, F_ca)
                gF = gF + g_sp
            mse_sum += mse
        ge, _ = enc.encode_backward(state.encoder, ecache, gF)
        g_enc.axpy(1.0 / n, ge)
    align = 0.0
    if regime == "one_stage":
        align, ga_enc, ga_proj, _ = _alignment_step(scenes, context, state.encoder, state.proj, cfg)
        g_enc.axpy(1.0, ga_enc)
        g_proj.axpy(1.0, ga_proj)
    mse, l3d = mse_sum / n, l3d_sum / n
    comps = {"total": total_loss(mse, cfg.task_weight * l3d) + align, "mse": mse, "l3d": l3d, "align": align}
    grads = [g for g in (g_enc, g_fus, g_proj) if g is not None]
    return comps, grads


def _axpy(target: FusionParams, alpha: float, other: FusionParams) -> None:
    for k, a in target.arrays().items():
        a += alpha * other.arrays()[k]


@dataclass
class Stage2Result:
    encoder: ToyEncoderParams
    fusion: Optional[FusionParams]
    proj: Optional[MlpParams]
    head: BoxHead
    curve: List[Dict[str, float]]


def init_stage2(cfg: StageConfig, d_in: int, pretrained: Optional[ToyEncoderParams]) -> Stage2State:
    regime = cfg.regime
    if regime == "one_stage":
        if pretrained is not None:
            raise ValueError("one_stage trains from scratch and takes no pretrained encoder")
        return Stage2State(enc.init_params(cfg.seed, d_in, cfg.d), None, enc.init_mlp(cfg.seed + 1, cfg.d, cfg.emb))
    if pretrained is None:
        raise ValueError(f"regime {regime} needs a pretrained encoder")
    if regime == "two_stage":
        return Stage2State(pretrained.copy(), None, None)
    fusion = init_fusion(cfg.fusion_mode, cfg.d, cfg.seed + 2) if regime == "d2od_fusion" else None
    return Stage2State(enc.init_params(cfg.seed + 3, d_in, cfg.d), fusion, None)


def run_stage2(cfg: StageConfig, pretrained: Optional[ToyEncoderParams], data: ToyDataset,
               context: Optional[ContextModel] = None) -> Stage2Result:
    """Formal training under one of the four regimes; the pretrained encoder stays frozen."""
    if cfg.regime == "one_stage" and context is None:
        raise ValueError("one_stage needs the frozen context model for its alignment term")
    d_in = data.scenes[0].image.shape[0]
    state = init_stage2(cfg, d_in, pretrained)
    frozen = pretrained
    head = BoxHead.for_scene_config(data.scene_cfg)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    batches = data.batches(cfg.batch_size)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        acc: Dict[str, List[float]] = {"total": [], "mse": [], "l3d": [], "align": []}
        for b in batches:
            comps, grads = stage2_objective(state, b, cfg, head, frozen, context)
            opt.step(state.trainables(), grads)
            for k in acc:
                acc[k].append(comps[k])
        row = {"epoch": epoch}
        row.update({k: math.fsum(v) / len(v) for k, v in acc.items()})
        curve.append(row)
    return Stage2Result(state.encoder, state.fusion, state.proj, head, curve)


def predict_boxes(encoder: ToyEncoderParams, head: BoxHead, image: np.ndarray,
                  rois: Sequence[RoiRect], dims: Sequence[Tuple[float, float]]) -> List[BevBox]:
    """Inference from the trained encoder alone; the fusion branch is not used."""
    F = enc.encode(encoder, image)
    out = []
    for roi, (length, width) in zip(rois, dims):
        cx, cz, yaw = head.decode(enc.roi_align(F, roi))
        out.append(BevBox(cx, cz, yaw, length, width))
    return out
