"""Segmentation losses evaluated on probability volumes: Dice, CE, general union loss, AMC and total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anatomy import LARGE, MEDIUM, SMALL, AmcLabel
from .skeleton import skeleton_mask, skeletonize
from .volume import Volume, as_binary, connected_components, edt

DICE_EPS = 1e-5
CE_CLAMP = 1e-7
GUL_ALPHA = 0.3
GUL_ROOT = 0.7
DEFAULT_LAMBDA = 0.25


@dataclass
class ProbVolume:
    """Per-class probabilities, shape ``(K, nx, ny, nz)``; class 0 is background."""

    probs: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 4 or self.probs.shape[0] < 2:
            raise ValueError(f"expected (K>=2, nx, ny, nz) probabilities, got {self.probs.shape}")
        if self.probs.min() < 0 or self.probs.max() > 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if np.abs(self.probs.sum(axis=0) - 1.0).max() > 1e-5:
            raise ValueError("class probabilities must sum to 1 per voxel")

    @property
    def n_classes(self) -> int:
        return self.probs.shape[0]

    def foreground(self) -> np.ndarray:
        return 1.0 - self.probs[0]

    @classmethod
    def one_hot(cls, labels: np.ndarray, n_classes: int, spacing=(1.0, 1.0, 1.0)) -> "ProbVolume":
        return cls((np.arange(n_classes)[:, None, None, None] == labels[None]).astype(float), spacing)


def _arrays(p, g):
    p = np.asarray(p.data if isinstance(p, Volume) else p, dtype=np.float64)
    g = as_binary(g).astype(np.float64)
    if p.shape != g.shape:
        raise ValueError(f"geometry mismatch: {p.shape} vs {g.shape}")
    return p, g


def dice_loss(p, g, eps: float = DICE_EPS) -> float:
    p, g = _arrays(p, g)
    inter = np.sum(p * g)
    return float(1.0 - (2.0 * inter + eps) / (np.sum(p) + np.sum(g) + eps))


def ce_loss(p, g, clamp: float = CE_CLAMP) -> float:
    p, g = _arrays(p, g)
    p = np.clip(p, clamp, 1.0 - clamp)
    return float(-np.mean(g * np.log(p) + (1.0 - g) * np.log1p(-p)))


def default_gul_weights(g, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """``1 / (1 + d)`` inside ``g`` with ``d`` the voxel distance to its centerline; 1 outside."""
    fg = as_binary(g)
    w = np.ones(fg.shape)
    if not fg.any():
        return w
    cc = connected_components(fg)
    center = np.zeros(fg.shape, dtype=bool)
    for k in range(1, cc.count + 1):
        comp = Volume((cc.labels == k).astype(np.uint8), spacing)
        center |= skeleton_mask(skeletonize(comp), comp)
    d = edt(center)
    w[fg] = 1.0 / (1.0 + d[fg])
    return w


def gul_loss(p, g, weights=None, alpha: float = GUL_ALPHA, r: float = GUL_ROOT) -> float:
    """Distance-weighted root-Tversky (general union) loss.

    ``1 - sum(w * p**r * g) / sum(w * (alpha * p + (1 - alpha) * g))``
    """
    p, g = _arrays(p, g)
    w = default_gul_weights(g) if weights is None else np.asarray(
        weights.data if isinstance(weights, Volume) else weights, dtype=np.float64
    )
    if w.shape != p.shape:
        raise ValueError("weights grid does not match the prediction")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if not np.any(w > 0):
        raise ValueError("weights are all zero")
    den = np.sum(w * (alpha * p + (1.0 - alpha) * g))
    if den == 0:
        return 0.0
    return float(1.0 - np.sum(w * np.power(p, r) * g) / den)


def _amc_labels(amc) -> np.ndarray:
    if isinstance(amc, AmcLabel):
        return amc.volume.data
    return np.asarray(amc.data if isinstance(amc, Volume) else amc)


def amc_loss(prob: ProbVolume, amc) -> float:
    """Sum over the L, M and S classes of Dice + CE against that class's support."""
    labels = _amc_labels(amc)
    if prob.n_classes != 4:
        raise ValueError(f"AMC loss needs 4 class channels (background, L, M, S), got {prob.n_classes}")
    if labels.shape != prob.probs.shape[1:]:
        raise ValueError("label grid does not match the prediction")
    total = 0.0
    for c in (LARGE, MEDIUM, SMALL):
        g = labels == c
        total += dice_loss(prob.probs[c], g) + ce_loss(prob.probs[c], g)
    return total


def total_loss(prob: ProbVolume, amc, lam: float = DEFAULT_LAMBDA, weights=None,
               alpha: float = GUL_ALPHA, r: float = GUL_ROOT) -> float:
    """AMC loss plus ``lam`` times the general union loss on the whole airway."""
    labels = _amc_labels(amc)
    union = labels > 0
    base = amc_loss(prob, labels)
    if lam == 0:
        return base
    if weights is None:
        weights = default_gul_weights(union, prob.spacing)
    return base + lam * gul_loss(prob.foreground(), union, weights, alpha, r)


def loss_report(prob: ProbVolume, amc, lam: float = DEFAULT_LAMBDA, weights=None,
                alpha: float = GUL_ALPHA, r: float = GUL_ROOT) -> dict:
    labels = _amc_labels(amc)
    union = labels > 0
    fgp = prob.foreground()
    if weights is None:
        weights = default_gul_weights(union, prob.spacing)
    return {
        "dice": dice_loss(fgp, union),
        "ce": ce_loss(fgp, union),
        "gul": gul_loss(fgp, union, weights, alpha, r),
        "amc": amc_loss(prob, labels),
        "total": total_loss(prob, labels, lam, weights, alpha, r),
        "params": {
            "lambda": lam,
            "gul_alpha": alpha,
            "gul_root": r,
            "dice_eps": DICE_EPS,
            "ce_clamp": CE_CLAMP,
        },
    }
