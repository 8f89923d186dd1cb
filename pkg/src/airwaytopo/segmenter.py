"""Trainable voxel segmenters.

``ClassicalSegmenter`` is a generative per-voxel classifier: one full-covariance
Gaussian per class over (HU, 3x3x3 mean HU, gradient magnitude), with class
priors. It is small but trainable, which is all the self-learning loop needs
to change behaviour between iterations. A deep model can replace it by
implementing the same ``train``/``predict`` pair.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage
from scipy.cluster.vq import kmeans2, vq
from scipy.special import logsumexp

from .anatomy import DEFAULT_CUTOFFS, decompose_amc
from .losses import ProbVolume
from .volume import Volume, as_binary, largest_component

N_FEATURES = 3
COV_REG = 1e-3
EMA_FACTOR = 0.5
BG_COMPONENTS = 12
KMEANS_SAMPLE = 200_000
KMEANS_ITERS = 20
PREDICT_CHUNK = 1 << 18


class DegenerateLabelsError(ValueError):
    """Training labels contain a single class only."""


class Segmenter(Protocol):
    def train(self, cases: Sequence[tuple[Volume, Volume]], init=None): ...

    def predict(self, ct: Volume, snapshot) -> ProbVolume: ...


@dataclass(frozen=True)
class GaussianSnapshot:
    """Gaussian components with absolute weights; ``owner[m]`` is the class of component ``m``."""

    means: np.ndarray  # (M, F)
    covs: np.ndarray  # (M, F, F)
    weights: np.ndarray  # (M,), sums to 1
    owner: np.ndarray  # (M,) class index
    n_classes: int
    scale: tuple = (1.0, 1.0, 1.0)  # feature standardization used by k-means
    iteration: int = 1

    @property
    def priors(self) -> np.ndarray:
        return np.bincount(self.owner, weights=self.weights, minlength=self.n_classes)

    @property
    def id(self) -> str:
        h = hashlib.sha1()
        for a in (self.means, self.covs, self.weights):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.owner, dtype=np.int64).tobytes())
        return h.hexdigest()[:12]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "iteration": self.iteration,
            "n_classes": self.n_classes,
            "scale": list(self.scale),
            "owner": self.owner.tolist(),
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianSnapshot":
        return cls(
            np.asarray(d["means"], dtype=float),
            np.asarray(d["covs"], dtype=float),
            np.asarray(d["weights"], dtype=float),
            np.asarray(d["owner"], dtype=np.int64),
            int(d["n_classes"]),
            tuple(d["scale"]),
            int(d["iteration"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "GaussianSnapshot":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def voxel_features(ct: Volume) -> np.ndarray:
    """(n_voxels, 3) features in C order: raw HU, 3^3 mean HU, gradient magnitude (HU/mm)."""
    hu = ct.data.astype(np.float64)
    mean3 = ndimage.uniform_filter(hu, size=3, mode="nearest")
    grads = np.gradient(hu, *ct.spacing)
    gmag = np.sqrt(sum(g * g for g in grads))
    return np.stack([hu.ravel(), mean3.ravel(), gmag.ravel()], axis=1)


class _Moments:
    """Streaming count, sum and scatter per component."""

    def __init__(self, m: int):
        self.n = np.zeros(m)
        self.s1 = np.zeros((m, N_FEATURES))
        self.s2 = np.zeros((m, N_FEATURES, N_FEATURES))

    def add(self, m: int, f: np.ndarray) -> None:
        self.n[m] += len(f)
        self.s1[m] += f.sum(axis=0)
        self.s2[m] += f.T @ f

    def gaussians(self):
        present = self.n > 0
        means = np.zeros_like(self.s1)
        covs = np.tile(np.eye(N_FEATURES), (len(self.n), 1, 1))
        for m in np.flatnonzero(present):
            means[m] = self.s1[m] / self.n[m]
            cov = self.s2[m] / self.n[m] - np.outer(means[m], means[m])
            covs[m] = cov + COV_REG * (1.0 + np.trace(cov) / N_FEATURES) * np.eye(N_FEATURES)
        return means, covs, present


class ClassicalSegmenter:
    """Gaussian voxel classifier; multi-class (background, L, M, S) by default.

    Each airway class is one Gaussian. Background mixes lung parenchyma,
    airway wall and partial-volume rims, so it gets ``bg_components``
    Gaussians found by seeded k-means in standardized feature space.
    """

    def __init__(self, multiclass: bool = True, cutoffs=DEFAULT_CUTOFFS, ema: float = EMA_FACTOR,
                 bg_components: int = BG_COMPONENTS, seed: int = 0):
        if bg_components < 1:
            raise ValueError("bg_components must be >= 1")
        self.multiclass = multiclass
        self.cutoffs = tuple(cutoffs)
        self.ema = ema
        self.bg_components = bg_components
        self.seed = seed

    @property
    def n_classes(self) -> int:
        return 4 if self.multiclass else 2

    def class_labels(self, label: Volume) -> np.ndarray:
        data = label.data
        if data.max() > 1:
            return data.astype(np.int64) if self.multiclass else (data > 0).astype(np.int64)
        fg = as_binary(label)
        if not self.multiclass or not fg.any():
            return fg.astype(np.int64)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            return decompose_amc(label, self.cutoffs).volume.data.astype(np.int64)

    def _bg_centroids(self, sample: np.ndarray, init) -> np.ndarray:
        if init is not None:
            start = init.means[init.owner == 0] / np.asarray(init.scale)
            cent, _ = kmeans2(sample, start, iter=KMEANS_ITERS, minit="matrix")
            return cent
        cent, _ = kmeans2(sample, self.bg_components, iter=KMEANS_ITERS, minit="++", seed=self.seed)
        # stable component order regardless of how k-means enumerated them
        return cent[np.lexsort(cent.T[::-1])]

    def train(self, cases, init: GaussianSnapshot | None = None) -> GaussianSnapshot:
        """Fit class statistics; with ``init``, blend into it by the EMA factor.

        Two passes over the cases keep memory at one feature array at a time.
        """
        cases = list(cases)
        if not cases:
            raise ValueError("need at least one training case")
        k = self.n_classes
        ys, samples = [], []
        counts = np.zeros(k, dtype=np.int64)
        for ct, label in cases:
            if ct.dims != label.dims:
                raise ValueError("CT and label grids differ")
            y = self.class_labels(label).ravel().astype(np.int8)
            ys.append(y)
            counts += np.bincount(y, minlength=k)[:k]
        if np.count_nonzero(counts) < 2 or counts[0] == 0:
            raise DegenerateLabelsError("training labels contain a single class")
        stride = max(1, int(counts[0]) // KMEANS_SAMPLE)
        for (ct, _), y in zip(cases, ys):
            samples.append(voxel_features(ct)[y == 0][::stride])
        sample = np.concatenate(samples)
        scale = sample.std(axis=0) + 1e-6 if init is None else np.asarray(init.scale)
        cent = self._bg_centroids(sample / scale, init)
        del samples, sample

        nb = len(cent)
        owner = np.concatenate([np.zeros(nb, dtype=np.int64), np.arange(1, k)])
        mom = _Moments(nb + k - 1)
        for (ct, _), y in zip(cases, ys):
            f = voxel_features(ct)
            b = f[y == 0]
            if len(b):
                assign, _ = vq(b / scale, cent)
                for m in range(nb):
                    mom.add(m, b[assign == m])
            for c in range(1, k):
                mom.add(nb + c - 1, f[y == c])
        means, covs, present = mom.gaussians()
        weights = mom.n / mom.n.sum()
        if init is not None and len(init.weights) == len(weights):
            a = self.ema
            # components unseen this round keep their previous statistics
            means = np.where(present[:, None], a * init.means + (1 - a) * means, init.means)
            covs = np.where(present[:, None, None], a * init.covs + (1 - a) * covs, init.covs)
            weights = a * init.weights + (1 - a) * weights
            weights /= weights.sum()
            return GaussianSnapshot(means, covs, weights, owner, k, tuple(scale), init.iteration + 1)
        return GaussianSnapshot(means, covs, weights, owner, k, tuple(scale), 1)

    def predict(self, ct: Volume, snapshot: GaussianSnapshot) -> ProbVolume:
        feats = voxel_features(ct)
        m, k = len(snapshot.weights), snapshot.n_classes
        with np.errstate(divide="ignore"):
            logw = np.log(snapshot.weights)
        invs = np.linalg.inv(snapshot.covs)
        consts = logw - 0.5 * (np.linalg.slogdet(snapshot.covs)[1] + N_FEATURES * np.log(2 * np.pi))
        post = np.zeros((k, len(feats)))
        for lo in range(0, len(feats), PREDICT_CHUNK):
            f = feats[lo : lo + PREDICT_CHUNK]
            logp = np.empty((m, len(f)))
            for j in range(m):
                diff = f - snapshot.means[j]
                logp[j] = consts[j] - 0.5 * np.einsum("ij,jk,ik->i", diff, invs[j], diff)
            comp = np.exp(logp - logsumexp(logp, axis=0))
            for j in range(m):
                post[snapshot.owner[j], lo : lo + len(f)] += comp[j]
        post /= post.sum(axis=0)
        return ProbVolume(post.reshape((k,) + ct.dims), ct.spacing)


def binarize(prob: ProbVolume, like: Volume, threshold: float = 0.5) -> Volume:
    """Airway where the summed non-background probability reaches ``threshold``."""
    return like.like((prob.foreground() >= threshold).astype(np.uint8))


def segment(segmenter, ct: Volume, snapshot, threshold: float = 0.5) -> Volume:
    """Predict, binarize and keep the largest component."""
    return largest_component(binarize(segmenter.predict(ct, snapshot), ct, threshold))
