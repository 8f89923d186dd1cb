"""Topology-guided iterative self-learning and final inference.

Each iteration trains the segmenter (warm-started after the first), predicts
every case, and refines the prediction against the original reference into
the next iteration's pseudo-label. Training is a single-writer step; per-case
prediction and refinement run on a thread pool and are gathered in case
order, so results do not depend on the thread count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .breakage import DEFAULT_GAMMA_MM, connect_breakages, connect_geometric, refine_pseudo_label
from .losses import DEFAULT_LAMBDA, total_loss
from .metrics import DEFAULT_DETECT_THRESHOLD, EvalReport, aggregate, evaluate
from .phantom import PhantomSpec, generate_phantom
from .segmenter import ClassicalSegmenter, binarize
from .skeleton import SkeletonTree, branch_ownership
from .volume import Volume, connected_components, largest_component

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERS = 5
DEFAULT_SELECT_ITER = 3
MIN_ISLAND_VOX = 5


@dataclass
class Case:
    name: str
    ct: Volume
    ref: Volume
    gt: Volume | None = None
    gt_tree: SkeletonTree | None = None


@dataclass
class IterationState:
    index: int
    snapshot_id: str
    pseudo_labels: list[Volume]
    reports: list[EvalReport]
    losses: list[float]

    def summary(self) -> dict:
        agg = aggregate([(f"{i}", r) for i, r in enumerate(self.reports)])
        return {
            "iteration": self.index,
            "snapshot": self.snapshot_id,
            "mean": agg.mean,
            "std": agg.std,
            "mean_total_loss": None if any(math.isnan(x) for x in self.losses) else float(np.mean(self.losses)),
        }


@dataclass
class SelfLearningResult:
    snapshots: list
    iterations: list[IterationState]
    select_iter: int
    error: str | None = None
    config: dict = field(default_factory=dict)

    @property
    def selected(self):
        """Snapshot at ``select_iter``, or the last good one if the run stopped earlier."""
        idx = min(self.select_iter, len(self.snapshots)) - 1
        return self.snapshots[idx] if idx >= 0 else None

    @property
    def selected_index(self) -> int | None:
        return min(self.select_iter, len(self.snapshots)) if self.snapshots else None

    def trend(self, metric: str = "tld_pct") -> list[float | None]:
        return [it.summary()["mean"][metric] for it in self.iterations]


def degrade_labels(mask: Volume, tree: SkeletonTree, fraction: float = 0.3, seed: int = 0) -> Volume:
    """Delete the voxels owned by a random ``fraction`` of leaf branches.

    Leaves are removed whole, so what remains stays attached to the tree.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    leaves = [b for b in tree.leaves() if tree.branch(b).parent is not None]
    n = int(round(fraction * len(leaves)))
    rng = np.random.default_rng(seed)
    drop = sorted(rng.choice(leaves, size=n, replace=False).tolist()) if n else []
    owner = branch_ownership(tree, mask)
    keep = mask.data.astype(bool) & ~np.isin(owner, drop)
    return mask.like(keep.astype(np.uint8))


def drop_small_islands(mask: Volume, min_vox: int = MIN_ISLAND_VOX) -> Volume:
    """Remove components smaller than ``min_vox`` voxels (voxel-classifier speckle)."""
    if min_vox <= 1:
        return mask
    cc = connected_components(mask)
    keep = np.concatenate([[False], cc.sizes >= min_vox])
    return mask.like(keep[cc.labels].astype(np.uint8))


def phantom_cases(n: int, seed: int = 0, degrade_fraction: float = 0.3, spec: PhantomSpec | None = None) -> list[Case]:
    """``n`` phantoms with seeds ``seed .. seed+n-1``; references have leaves deleted."""
    base = spec or PhantomSpec()
    cases = []
    for i in range(n):
        ph = generate_phantom(PhantomSpec(**{**base.to_dict(), "seed": seed + i}))
        ref = degrade_labels(ph.gt_mask, ph.gt_tree, degrade_fraction, seed=seed + i)
        cases.append(Case(f"phantom{seed + i:04d}", ph.ct, ref, ph.gt_mask, ph.gt_tree))
    return cases


def _map(fn, items, threads: int):
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def iterate_self_learning(
    cases: list[Case],
    segmenter=None,
    connector=connect_geometric,
    max_iters: int = DEFAULT_MAX_ITERS,
    select_iter: int = DEFAULT_SELECT_ITER,
    gamma_mm: float = DEFAULT_GAMMA_MM,
    lam: float = DEFAULT_LAMBDA,
    branch_detect_threshold: float = DEFAULT_DETECT_THRESHOLD,
    min_island_vox: int = MIN_ISLAND_VOX,
    threads: int = 1,
    on_iteration=None,
) -> SelfLearningResult:
    """Train, predict, refine; repeat ``max_iters`` times.

    Reports compare each iteration's pseudo-labels with the case's ground
    truth when it has one, else with its original reference. A training
    failure stops the loop; snapshots trained so far are kept and the error
    is recorded on the result.
    """
    if not cases:
        raise ValueError("no cases")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if select_iter < 1:
        raise ValueError("select_iter must be >= 1")
    segmenter = segmenter or ClassicalSegmenter()
    labels = [c.ref for c in cases]
    snapshots, states = [], []
    snap = None
    error = None
    for n in range(1, max_iters + 1):
        try:
            snap = segmenter.train([(c.ct, y) for c, y in zip(cases, labels)], init=snap)
        except Exception as exc:  # keep the last good snapshot
            error = f"iteration {n}: training failed: {exc}"
            logger.error(error)
            break
        snapshots.append(snap)

        def step(i: int, snap=snap, train_labels=labels):
            case = cases[i]
            prob = segmenter.predict(case.ct, snap)
            pred = drop_small_islands(binarize(prob, case.ct), min_island_vox)
            pseudo = refine_pseudo_label(pred, case.ref, case.ct, connector, gamma_mm)
            truth = case.gt if case.gt is not None else case.ref
            tree = case.gt_tree if case.gt is not None else None
            rep = evaluate(pseudo, truth, tree, branch_detect_threshold)
            # fit to this iteration's training labels, for model selection
            loss = float("nan")
            if prob.n_classes == 4:
                loss = total_loss(prob, segmenter.class_labels(train_labels[i]), lam)
            return pseudo, rep, loss

        out = _map(step, range(len(cases)), threads)
        labels = [o[0] for o in out]
        state = IterationState(n, getattr(snap, "id", str(n)), labels, [o[1] for o in out], [o[2] for o in out])
        states.append(state)
        logger.info("iteration %d: %s", n, state.summary()["mean"])
        if on_iteration is not None:
            on_iteration(state, snap)
    return SelfLearningResult(snapshots, states, select_iter, error)


def run_inference(ct: Volume, snapshot, segmenter=None, connector=connect_geometric,
                  gamma_mm: float = DEFAULT_GAMMA_MM, min_island_vox: int = MIN_ISLAND_VOX,
                  threads: int = 1) -> Volume:
    """Predict, bridge breakages in the bare prediction, keep the largest component."""
    segmenter = segmenter or ClassicalSegmenter()
    pred = drop_small_islands(binarize(segmenter.predict(ct, snapshot), ct), min_island_vox)
    if not pred.data.any():
        return pred
    fill, _, _ = connect_breakages(pred, ct, connector, gamma_mm, threads=threads)
    return largest_component(pred.like((pred.data.astype(bool) | fill).astype(np.uint8)))
