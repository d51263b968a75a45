"""Region-wise contrastive matching between frozen and trainable object embeddings.

Rows of the two embedding sets correspond (row ``i`` of the frozen set is the
positive for row ``i`` of the trainable set).  Gradients are returned with
respect to the trainable set only; the frozen set never receives one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DIRECTIONS = ("tai_to_m3d", "symmetric")


@dataclass(frozen=True)
class RocmConfig:
    temperature: float = 14.3
    direction: str = "tai_to_m3d"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")


def _check(E, name: str) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 1 or E.shape[1] < 1:
        raise ValueError(f"{name} must be an N x d matrix with N, d >= 1, got shape {E.shape}")
    if not np.all(np.isfinite(E)):
        raise ValueError(f"{name} has non-finite entries")
    return E


def _check_pair(A, B):
    A = _check(A, "E_tai")
    B = _check(B, "E_m3d")
    if A.shape != B.shape:
        raise ValueError(f"embedding shapes differ: {A.shape} vs {B.shape}")
    return A, B


def l2_normalize_rows(E) -> np.ndarray:
    E = _check(E, "embeddings")
    norms = np.linalg.norm(E, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"cannot normalise zero row {int(zero[0])}")
    return E / norms[:, None]


def similarity_matrix(E_tai, E_m3d) -> np.ndarray:
    """Cosine similarity ``s[i, j]`` between row i of ``E_tai`` and row j of ``E_m3d``."""
    A, B = _check_pair(E_tai, E_m3d)
    return np.clip(l2_normalize_rows(A) @ l2_normalize_rows(B).T, -1.0, 1.0)


def _row_xent(logits: np.ndarray):
    """Per-row ``-log softmax(logits)[i, i]`` with stable log-sum-exp, and d/dlogits of their mean.

    Sums use ``math.fsum`` so the value is independent of row/column order.
    """
    n = logits.shape[0]
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    losses = []
    for i in range(n):
        lse = mx[i, 0] + math.log(math.fsum(ex[i].tolist()))
        losses.append(lse - logits[i, i])
    prob = ex / ex.sum(axis=1, keepdims=True)
    grad = (prob - np.eye(n)) / n
    return math.fsum(losses) / n, grad


def normalize_backward(E: np.ndarray, grad_hat: np.ndarray) -> np.ndarray:
    """Push a gradient on row-normalised embeddings back to the raw rows."""
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    hat = E / norms
    return (grad_hat - hat * np.sum(hat * grad_hat, axis=1, keepdims=True)) / norms


def rocm_loss(E_tai, E_m3d, cfg: RocmConfig = RocmConfig()):
    """Contrastive loss over temperature-scaled cosine similarities.

    Returns ``(value, grad_E_m3d)``.  In ``tai_to_m3d`` mode each frozen row
    anchors a softmax over trainable rows; ``symmetric`` averages that with the
    column-anchored loss.
    """
    A, B = _check_pair(E_tai, E_m3d)
    Ah = l2_normalize_rows(A)
    Bh = l2_normalize_rows(B)
    logits = cfg.temperature * (Ah @ Bh.T)
    value, g_logits = _row_xent(logits)
    if cfg.direction == "symmetric":
        v_col, g_col = _row_xent(logits.T)
        value = 0.5 * (value + v_col)
        g_logits = 0.5 * (g_logits + g_col.T)
    g_s = cfg.temperature * g_logits
    g_Bh = g_s.T @ Ah
    return value, normalize_backward(B, g_Bh)


def rocm_loss_naive(E_tai, E_m3d, temperature: float) -> float:
    """Unstabilised scalar-loop form of the row-anchored loss (reference only)."""
    A, B = _check_pair(E_tai, E_m3d)
    n = A.shape[0]
    total = 0.0
    for i in range(n):
        na = math.sqrt(sum(a * a for a in A[i]))
        row = []
        for j in range(n):
            nb = math.sqrt(sum(b * b for b in B[j]))
            row.append(math.exp(temperature * float(A[i] @ B[j]) / (na * nb)))
        total += -math.log(row[i] / sum(row))
    return total / n


def mse_alignment_loss(E_tai, E_m3d):
    A, B = _check_pair(E_tai, E_m3d)
    diff = B - A
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _log_softmax(X: np.ndarray) -> np.ndarray:
    mx = X.max(axis=1, keepdims=True)
    return X - mx - np.log(np.exp(X - mx).sum(axis=1, keepdims=True))


def kl_alignment_loss(E_tai, E_m3d):
    """Row-mean of KL(softmax(E_tai[i]) || softmax(E_m3d[i])), softmax over embedding dims."""
    A, B = _check_pair(E_tai, E_m3d)
    lp = _log_softmax(A)
    lq = _log_softmax(B)
    p = np.exp(lp)
    n = A.shape[0]
    value = float(np.sum(p * (lp - lq)) / n)
    return max(value, 0.0), (np.exp(lq) - p) / n


ALIGNMENT_LOSSES = {
    "rocm": None,
    "mse": mse_alignment_loss,
    "kl": kl_alignment_loss,
}


def alignment_loss(name: str, E_tai, E_m3d, cfg: RocmConfig = RocmConfig()):
    """Dispatch over the alignment strategies: ``rocm``, ``mse`` or ``kl``."""
    if name == "rocm":
        return rocm_loss(E_tai, E_m3d, cfg)
    if name not in ALIGNMENT_LOSSES:
        raise ValueError(f"unknown alignment loss {name!r}")
    return ALIGNMENT_LOSSES[name](E_tai, E_m3d)
