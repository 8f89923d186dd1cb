"""Breakage attention, breakage simulation, patch-based connection and pseudo-label refinement."""

from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree
from scipy.special import expit

from .skeleton import SkeletonTree, centerline_points, _voxel_edges, nearest_owner, skeletonize
from .volume import (
    Volume,
    as_binary,
    check_same_grid,
    connected_components,
    edt,
    interior_distance,
    largest_component,
    write_volume,
)

UNDEFINED_DISTANCE = 1e9
DEFAULT_GAMMA_MM = 5.0
PATCH_SIZE = 64
PAD_VALUES = {"ct": -1024, "attention": 0.0, "label": 0}


@dataclass
class AttentionMap:
    raw: Volume
    normalized: Volume
    gamma: float
    breakage_centers: list[tuple[int, int, int]]
    n_components: int = 0


def second_nearest_distance(labels: np.ndarray, count: int, spacing) -> np.ndarray:
    """Per voxel, the distance to the nearest component other than the closest one.

    Components are split into two groups by each bit of their ID; for every
    voxel the group not containing its closest component excludes it, and
    every other component is in such a group for at least one bit. So the
    minimum over those group distances is exactly the second-nearest
    component distance, using ``2 * ceil(log2(count + 1))`` transforms
    instead of one per component.
    """
    if count < 2:
        return np.full(labels.shape, UNDEFINED_DISTANCE)
    fg = labels > 0
    _, ind = edt(fg, spacing, return_indices=True)
    closest = labels[tuple(ind)]
    out = np.full(labels.shape, np.inf)
    for bit in range(int(count).bit_length()):
        member = (labels >> bit) & 1
        closest_bit = (closest >> bit) & 1
        for value in (0, 1):
            group = fg & (member == value)
            if not group.any():
                continue
            use = closest_bit != value
            if use.any():
                np.minimum(out, np.where(use, edt(group, spacing), np.inf), out=out)
    return out


def naive_second_nearest(labels: np.ndarray, count: int, spacing) -> np.ndarray:
    """Reference: one distance map per component, second smallest per voxel."""
    if count < 2:
        return np.full(labels.shape, UNDEFINED_DISTANCE)
    stack = np.stack([edt(labels == k, spacing) for k in range(1, count + 1)])
    return np.partition(stack, 1, axis=0)[1]


def _nms_centers(score: np.ndarray, threshold: float, radius_mm: float, spacing) -> list[tuple[int, int, int]]:
    peaks = (score >= threshold) & (score == ndimage.maximum_filter(score, size=3, mode="nearest"))
    flat = np.flatnonzero(peaks.ravel(order="F"))
    if len(flat) == 0:
        return []
    coords = np.stack(np.unravel_index(flat, score.shape, order="F"), axis=1)
    vals = score[tuple(coords.T)]
    coords = coords[np.argsort(-vals, kind="stable")]
    sp = np.asarray(spacing)
    kept: list[np.ndarray] = []
    for c in coords:
        if kept and np.min(np.linalg.norm((np.asarray(kept) - c) * sp, axis=1)) <= radius_mm:
            continue
        kept.append(c)
    return [tuple(int(v) for v in c) for c in kept]


def breakage_attention(fused_mask, gamma_mm: float = DEFAULT_GAMMA_MM, threshold: float = 0.5) -> AttentionMap:
    """Second-shortest component distance and its sigmoid normalization.

    ``normalized = 1 / (1 + exp(raw - gamma))``. Breakage centers are local
    maxima of the normalized map at or above ``threshold``, thinned by
    non-maximum suppression within ``gamma`` mm.
    """
    fg = as_binary(fused_mask)
    like = fused_mask if isinstance(fused_mask, Volume) else Volume(fg.astype(np.uint8))
    cc = connected_components(fg)
    if cc.count == 0:
        raise ValueError("breakage attention needs a nonempty mask")
    raw = second_nearest_distance(cc.labels, cc.count, like.spacing)
    norm = expit(gamma_mm - raw)
    centers = _nms_centers(norm, threshold, gamma_mm, like.spacing) if cc.count >= 2 else []
    return AttentionMap(
        raw=like.like(raw.astype(np.float32)),
        normalized=like.like(norm.astype(np.float32)),
        gamma=float(gamma_mm),
        breakage_centers=centers,
        n_components=cc.count,
    )


# ----------------------------------------------------------------- simulation

@dataclass
class RemovedSegment:
    branch_id: int
    removed_fraction: float
    start: int  # index into the branch's own voxels
    n_removed: int
    n_branch_voxels: int


@dataclass
class BreakageSample:
    broken_mask: Volume
    breakage_gt: Volume
    removed_branches: list[RemovedSegment]
    seed: int
    branch_fraction: float = 0.5
    removal_range: tuple[float, float] = (0.10, 0.30)
    tree: SkeletonTree | None = field(default=None, repr=False)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "branch_fraction": self.branch_fraction,
            "removal_range": list(self.removal_range),
            "removed_branches": [
                {
                    "branch_id": r.branch_id,
                    "removed_fraction": r.removed_fraction,
                    "start": r.start,
                    "n_removed": r.n_removed,
                    "n_branch_voxels": r.n_branch_voxels,
                }
                for r in self.removed_branches
            ],
        }

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        write_volume(self.broken_mask, os.path.join(out_dir, "broken.mhd"))
        write_volume(self.breakage_gt, os.path.join(out_dir, "breakage_gt.mhd"))
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(self.manifest(), fh, indent=2)
            fh.write("\n")


def _count_bounds(n_own: int, lo: float, hi: float) -> tuple[int, int]:
    """Admissible removed-voxel counts keeping the fraction in [lo, hi] and the tip intact."""
    nmin = max(1, math.ceil(lo * n_own - 1e-9))
    nmax = min(math.floor(hi * n_own + 1e-9), n_own - 1)
    return nmin, nmax


def simulate_breakage(
    mask,
    branch_fraction: float = 0.5,
    removal_range: tuple[float, float] = (0.10, 0.30),
    seed: int = 0,
    tree: SkeletonTree | None = None,
) -> BreakageSample:
    """Cut contiguous centerline runs out of randomly chosen leaf branches.

    The removed centerline voxels are propagated to the volume by nearest
    centerline voxel, which gives the volumetric breakage ground truth.
    """
    lo, hi = (float(v) for v in removal_range)
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError(f"removal_range must satisfy 0 < lo <= hi < 1, got {removal_range}")
    if not 0.0 <= branch_fraction <= 1.0:
        raise ValueError("branch_fraction must lie in [0, 1]")
    fg = as_binary(mask)
    like = mask if isinstance(mask, Volume) else Volume(fg.astype(np.uint8))
    if tree is None:
        tree = skeletonize(like)
    leaves = tree.leaves()
    if not leaves:
        raise ValueError("mask has no peripheral branches to break")
    rng = np.random.default_rng(seed)
    n_pick = math.ceil(branch_fraction * len(leaves) - 1e-12)
    eligible = []
    for bid in leaves:
        nmin, nmax = _count_bounds(len(tree.branch(bid).own_voxels), lo, hi)
        if nmin <= nmax:
            eligible.append(bid)
    if n_pick > len(eligible):
        warnings.warn(
            f"only {len(eligible)} of {len(leaves)} leaves are long enough to break; "
            f"wanted {n_pick}",
            UserWarning,
            stacklevel=2,
        )
        n_pick = len(eligible)
    chosen = sorted(int(b) for b in rng.choice(eligible, size=n_pick, replace=False)) if n_pick else []

    pts, bids = centerline_points(tree)
    offsets = np.cumsum([0] + [len(b.voxels) for b in tree.branches])
    removed_pt = np.zeros(len(pts), dtype=bool)
    removed = []
    for bid in chosen:
        br = tree.branch(bid)
        n_own = len(br.own_voxels)
        nmin, nmax = _count_bounds(n_own, lo, hi)
        frac = rng.uniform(lo, hi)
        n_rm = int(np.clip(round(frac * n_own), nmin, nmax))
        start = int(rng.integers(0, n_own - n_rm))  # last own voxel (the tip) is never removed
        first = offsets[bid] + (len(br.voxels) - n_own) + start
        removed_pt[first : first + n_rm] = True
        removed.append(RemovedSegment(bid, n_rm / n_own, start, n_rm, n_own))

    gt = np.zeros(fg.shape, dtype=bool)
    if removed:
        vox, owner = nearest_owner(fg, pts, like.spacing)
        hit = removed_pt[owner]
        gt[tuple(vox[hit].T)] = True
    return BreakageSample(
        broken_mask=like.like((fg & ~gt).astype(np.uint8)),
        breakage_gt=like.like(gt.astype(np.uint8)),
        removed_branches=removed,
        seed=int(seed),
        branch_fraction=float(branch_fraction),
        removal_range=(lo, hi),
        tree=tree,
    )


# -------------------------------------------------------------------- patches

@dataclass
class ConnectorPatchRequest:
    ct_patch: Volume
    attention_patch: Volume
    label_patch: Volume
    patch_origin: tuple[int, int, int]
    center: tuple[int, int, int] | None = None  # breakage center, parent-grid voxel


def crop_patch(arr: np.ndarray, origin, size: int, pad_value) -> np.ndarray:
    """``size``-cube starting at ``origin`` (may lie partly outside), padded with ``pad_value``."""
    out = np.full((size,) * 3, pad_value, dtype=arr.dtype)
    src, dst = [], []
    for o, n in zip(origin, arr.shape):
        a, b = max(o, 0), min(o + size, n)
        if a >= b:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - o, b - o))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _patch_volume(like: Volume, data: np.ndarray, origin) -> Volume:
    o = tuple(like.origin[k] + origin[k] * like.spacing[k] for k in range(3))
    return Volume(data, like.spacing, o)


def sample_patches(
    attention: AttentionMap,
    ct: Volume,
    label,
    jitter_vox: int = 8,
    seed: int = 0,
    patch_size: int = PATCH_SIZE,
) -> list[ConnectorPatchRequest]:
    """One early-fusion patch per breakage center, randomly shifted by up to ``jitter_vox``."""
    lab = as_binary(label).astype(np.uint8)
    like = label if isinstance(label, Volume) else attention.normalized
    check_same_grid(attention.normalized, ct, like)
    rng = np.random.default_rng(seed)
    half = patch_size // 2
    ct_data = ct.data.astype(np.int16)
    att = attention.normalized.data.astype(np.float32)
    out = []
    for c in attention.breakage_centers:
        shift = rng.integers(-jitter_vox, jitter_vox + 1, size=3) if jitter_vox > 0 else np.zeros(3, int)
        origin = tuple(int(c[k] + shift[k] - half) for k in range(3))
        out.append(
            ConnectorPatchRequest(
                ct_patch=_patch_volume(ct, crop_patch(ct_data, origin, patch_size, PAD_VALUES["ct"]), origin),
                attention_patch=_patch_volume(
                    ct, crop_patch(att, origin, patch_size, np.float32(PAD_VALUES["attention"])), origin
                ),
                label_patch=_patch_volume(ct, crop_patch(lab, origin, patch_size, PAD_VALUES["label"]), origin),
                patch_origin=origin,
                center=tuple(int(v) for v in c),
            )
        )
    return out


# ------------------------------------------------------------------ connector

Connector = Callable[[ConnectorPatchRequest], np.ndarray]


def _path_cost(ct: np.ndarray, att: np.ndarray) -> np.ndarray:
    """Per-voxel traversal cost: cheap through dark air, cheaper still under high attention."""
    return (1.0 + np.maximum(0.0, (ct.astype(float) + 900.0) / 200.0)) * (2.0 - att.astype(float))


def _min_cost_path(cost: np.ndarray, spacing, a, b) -> np.ndarray:
    """Cheapest 26-connected voxel path from ``a`` to ``b``; stepping onto v costs step_mm * cost[v]."""
    box = np.ones(cost.shape, dtype=bool)
    coords, index, u, v, step = _voxel_edges(box, spacing)
    n = len(coords)
    cv = cost[tuple(coords.T)]
    w = np.concatenate([step * cv[v], step * cv[u]])
    g = csr_matrix((w, (np.concatenate([u, v]), np.concatenate([v, u]))), shape=(n, n))
    src, dst = int(index[tuple(a)]), int(index[tuple(b)])
    _, pred = dijkstra(g, directed=True, indices=src, return_predecessors=True)
    path = [dst]
    while path[-1] != src:
        path.append(int(pred[path[-1]]))
    return coords[path[::-1]]


def connect_geometric(req: ConnectorPatchRequest, probe_vox: int = 3, margin_vox: int = 4) -> np.ndarray:
    """Bridge the two components closest to the breakage center with a tube.

    The bridge follows a minimum-cost path between the mutually closest voxel
    pair of the two components, each moved to the deepest lumen voxel
    nearby so the tube stays centered; its radius is the smaller of the two local
    lumen radii (at least one voxel). Returns a patch-local boolean fill that
    never overlaps the input label.
    """
    label = req.label_patch.data.astype(bool)
    spacing = np.asarray(req.label_patch.spacing)
    cc = connected_components(label)
    empty = np.zeros(label.shape, dtype=bool)
    if cc.count < 2:
        return empty
    if req.center is not None:
        center = np.asarray(req.center) - np.asarray(req.patch_origin)
    else:
        center = np.asarray(np.unravel_index(np.argmax(req.attention_patch.data), label.shape))
    vox = np.argwhere(label)
    comp = cc.labels[tuple(vox.T)]
    d = np.linalg.norm((vox - center) * spacing, axis=1)
    best = np.full(cc.count + 1, np.inf)
    np.minimum.at(best, comp, d)
    order = np.lexsort((np.arange(cc.count), best[1:])) + 1
    ca, cb = int(order[0]), int(order[1])
    va, vb = vox[comp == ca], vox[comp == cb]
    dist, j = cKDTree(vb * spacing).query(va * spacing)
    i = int(np.argmin(dist))
    a, b = va[i], vb[int(j[i])]

    inner = interior_distance(label, spacing)
    vmin = float(spacing.min())

    def local_axis(p, cid):
        """Deepest voxel of ``cid`` near ``p`` (closest to ``p`` on ties) and its lumen radius."""
        lo = np.maximum(p - probe_vox, 0)
        hi = np.minimum(p + probe_vox + 1, label.shape)
        sl = tuple(slice(lo[k], hi[k]) for k in range(3))
        cand = np.argwhere(cc.labels[sl] == cid)
        depth = inner[sl][tuple(cand.T)]
        off = np.linalg.norm((cand + lo - p) * spacing, axis=1)
        k = np.lexsort((off, -depth))[0]
        return cand[k] + lo, float(depth[k]) - 0.5 * vmin

    a, ra = local_axis(a, ca)
    b, rb = local_axis(b, cb)
    radius = max(vmin, min(ra, rb))

    pad = int(math.ceil(radius / vmin)) + margin_vox
    lo = np.maximum(np.minimum(a, b) - pad, 0)
    hi = np.minimum(np.maximum(a, b) + pad + 1, label.shape)
    sl = tuple(slice(lo[k], hi[k]) for k in range(3))
    cost = _path_cost(req.ct_patch.data[sl], req.attention_patch.data[sl])
    path = _min_cost_path(cost, spacing, a - lo, b - lo) + lo

    on_path = np.zeros(label.shape, dtype=bool)
    on_path[tuple(path.T)] = True
    tube = ndimage.distance_transform_edt(~on_path, sampling=spacing) <= radius + 1e-9
    return tube & ~label


def merge_fills(shape, requests, fills) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for req, fill in zip(requests, fills):
        o = req.patch_origin
        src, dst = [], []
        for k in range(3):
            a, b = max(o[k], 0), min(o[k] + fill.shape[k], shape[k])
            src.append(slice(a - o[k], b - o[k]))
            dst.append(slice(a, b))
        out[tuple(dst)] |= fill[tuple(src)].astype(bool)
    return out


@dataclass
class Refinement:
    mask: Volume
    fused: Volume
    attention: AttentionMap
    fill: np.ndarray
    n_patches: int


def connect_breakages(
    mask: Volume,
    ct: Volume,
    connector: Connector = connect_geometric,
    gamma_mm: float = DEFAULT_GAMMA_MM,
    jitter_vox: int = 0,
    seed: int = 0,
    threads: int = 1,
) -> tuple[np.ndarray, AttentionMap, int]:
    """Run the connector on every breakage center of ``mask``; returns the merged fill."""
    att = breakage_attention(mask, gamma_mm)
    reqs = sample_patches(att, ct, mask, jitter_vox=jitter_vox, seed=seed)
    if threads > 1 and len(reqs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fills = list(pool.map(connector, reqs))
    else:
        fills = [connector(r) for r in reqs]
    return merge_fills(mask.dims, reqs, fills), att, len(reqs)


def refine_with_details(pred, ref, ct: Volume, connector: Connector = connect_geometric,
                        gamma_mm: float = DEFAULT_GAMMA_MM, threads: int = 1) -> Refinement:
    p, r = as_binary(pred), as_binary(ref)
    like = pred if isinstance(pred, Volume) else ct
    check_same_grid(ct, like)
    if isinstance(ref, Volume):
        check_same_grid(ct, ref)
    if p.shape != r.shape:
        raise ValueError("prediction and reference grids differ")
    fused = like.like((p | r).astype(np.uint8))
    if not fused.data.any():
        warnings.warn("refine_pseudo_label: empty prediction and reference", UserWarning, stacklevel=2)
        empty = np.zeros(p.shape, dtype=bool)
        return Refinement(fused, fused, None, empty, 0)
    fill, att, n = connect_breakages(fused, ct, connector, gamma_mm, threads=threads)
    merged = fused.data.astype(bool) | fill
    return Refinement(largest_component(like.like(merged.astype(np.uint8))), fused, att, fill, n)


def refine_pseudo_label(pred, ref, ct: Volume, connector: Connector = connect_geometric,
                        gamma_mm: float = DEFAULT_GAMMA_MM, threads: int = 1) -> Volume:
    """Fuse prediction and reference, bridge breakages, keep the largest component."""
    return refine_with_details(pred, ref, ct, connector, gamma_mm, threads).mask
