"""Curve skeletons of tubular masks, branch parsing and skeleton-to-volume propagation."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as graph_components
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .volume import (
    Volume,
    VolumeError,
    as_binary,
    connected_components,
    interior_distance,
    raster_index,
)

# half of the 26-neighbourhood; the other half is implied by symmetry
_FORWARD_OFFSETS = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) > (0, 0, 0)
]

ROOT_SLAB_FRACTION = 0.10
SUPPRESSION_FACTOR = 2.0


class SkeletonError(ValueError):
    pass


@dataclass
class Branch:
    id: int
    voxels: np.ndarray  # (n, 3) int, ordered from the parent junction outwards
    parent: int | None
    generation: int
    length_mm: float
    mean_radius_mm: float

    @property
    def own_voxels(self) -> np.ndarray:
        """Chain voxels excluding the junction voxel shared with the parent."""
        return self.voxels if self.parent is None else self.voxels[1:]


@dataclass
class SkeletonTree:
    branches: list[Branch]
    root: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dims: tuple[int, int, int] | None = None
    _children: dict = field(default=None, init=False, repr=False)

    @property
    def root_branch_id(self) -> int:
        return next(b.id for b in self.branches if b.parent is None)

    @property
    def total_length_mm(self) -> float:
        return float(sum(b.length_mm for b in self.branches))

    @property
    def nodes(self) -> np.ndarray:
        """Unique centerline voxels in raster order."""
        allv = np.concatenate([b.voxels for b in self.branches])
        uniq = np.unique(allv, axis=0)
        shape = self.dims or tuple(int(m) + 1 for m in uniq.max(axis=0))
        return uniq[np.argsort(raster_index(shape, uniq), kind="stable")]

    def branch(self, bid: int) -> Branch:
        return self.branches[bid]

    def children(self, bid: int) -> list[int]:
        if self._children is None:
            self._children = {b.id: [] for b in self.branches}
            for b in self.branches:
                if b.parent is not None:
                    self._children[b.parent].append(b.id)
        return self._children[bid]

    def leaves(self) -> list[int]:
        """Peripheral branches: childless and not the root."""
        return [b.id for b in self.branches if b.parent is not None and not self.children(b.id)]

    def to_dict(self) -> dict:
        return {
            "root": [int(c) for c in self.root],
            "total_length_mm": self.total_length_mm,
            "spacing": list(self.spacing),
            "dims": list(self.dims) if self.dims else None,
            "branches": [
                {
                    "id": b.id,
                    "parent": b.parent,
                    "generation": b.generation,
                    "voxels": b.voxels.tolist(),
                    "length_mm": b.length_mm,
                    "mean_radius_mm": b.mean_radius_mm,
                }
                for b in self.branches
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonTree":
        branches = [
            Branch(
                id=int(b["id"]),
                voxels=np.asarray(b["voxels"], dtype=np.int64).reshape(-1, 3),
                parent=None if b["parent"] is None else int(b["parent"]),
                generation=int(b["generation"]),
                length_mm=float(b["length_mm"]),
                mean_radius_mm=float(b["mean_radius_mm"]),
            )
            for b in d["branches"]
        ]
        dims = tuple(d["dims"]) if d.get("dims") else None
        return cls(branches, tuple(d["root"]), tuple(d.get("spacing", (1.0, 1.0, 1.0))), dims)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "SkeletonTree":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ------------------------------------------------------------------ graphs

def _voxel_edges(fg: np.ndarray, spacing):
    """Undirected 26-adjacency edges between foreground voxels.

    Nodes are numbered in x-fastest raster order. Returns node coordinates,
    the voxel-to-node index volume and edge arrays ``(u, v, step_mm)``.
    """
    shape = fg.shape
    flat = np.flatnonzero(fg.ravel(order="F"))
    coords = np.stack(np.unravel_index(flat, shape, order="F"), axis=1)
    index = np.full(shape, -1, dtype=np.int64)
    index[tuple(coords.T)] = np.arange(len(flat))
    sp = np.asarray(spacing, dtype=float)
    us, vs, ws = [], [], []
    for off in _FORWARD_OFFSETS:
        a = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(off, shape))
        b = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(off, shape))
        both = fg[a] & fg[b]
        us.append(index[a][both])
        vs.append(index[b][both])
        ws.append(np.full(len(us[-1]), float(np.sqrt(np.sum((np.asarray(off) * sp) ** 2)))))
    return coords, index, np.concatenate(us), np.concatenate(vs), np.concatenate(ws)


def _graph(u, v, w, n) -> csr_matrix:
    return csr_matrix((np.concatenate([w, w]), (np.concatenate([u, v]), np.concatenate([v, u]))), shape=(n, n))


def _step_lengths(chain: np.ndarray, spacing) -> np.ndarray:
    if len(chain) < 2:
        return np.zeros(0)
    return np.sqrt(np.sum((np.diff(chain, axis=0) * np.asarray(spacing)) ** 2, axis=1))


def _tree_from_parents(parent: np.ndarray, root: int, coords, spacing, radius, dims) -> SkeletonTree:
    """Split a parent-pointer tree over skeleton nodes into maximal junction-free branches.

    ``parent[i]`` is the parent node of ``i`` (-1 for the root and for nodes
    outside the skeleton). Children are visited in raster order so branch IDs
    are reproducible; IDs are assigned root-first (breadth-first).
    """
    children: dict[int, list[int]] = {}
    for node in np.flatnonzero(parent >= 0):
        children.setdefault(int(parent[node]), []).append(int(node))
    for lst in children.values():
        lst.sort()

    branches: list[Branch] = []
    queue = deque([(None, root, None, 0)])
    while queue:
        junction, first, pbid, gen = queue.popleft()
        chain = [] if junction is None else [junction]
        node = first
        chain.append(node)
        while len(children.get(node, ())) == 1:
            node = children[node][0]
            chain.append(node)
        vox = coords[chain].astype(np.int64)
        bid = len(branches)
        branches.append(
            Branch(
                id=bid,
                voxels=vox,
                parent=pbid,
                generation=gen,
                length_mm=float(_step_lengths(vox, spacing).sum()),
                mean_radius_mm=float(np.mean(radius[chain])) if radius is not None else 0.0,
            )
        )
        for child in children.get(node, ()):
            queue.append((node, child, bid, gen + 1))
    root_xyz = tuple(int(c) for c in coords[root])
    return SkeletonTree(branches, root_xyz, tuple(float(s) for s in spacing), tuple(dims))


# ---------------------------------------------------------------- skeleton

def _find_root(fg: np.ndarray, dist: np.ndarray) -> tuple[int, int, int]:
    """Voxel of maximal interior distance in the top axial slab (highest z)."""
    zs = np.flatnonzero(fg.any(axis=(0, 1)))
    zmin, zmax = int(zs[0]), int(zs[-1])
    depth = max(1, int(math.ceil(ROOT_SLAB_FRACTION * (zmax - zmin + 1))))
    slab = np.zeros_like(fg)
    slab[:, :, zmax - depth + 1 : zmax + 1] = True
    cand = np.argwhere(fg & slab)
    dvals = dist[tuple(cand.T)]
    best = cand[dvals == dvals.max()]
    # highest z first, then raster order
    order = np.lexsort((best[:, 0], best[:, 1], -best[:, 2]))
    return tuple(int(c) for c in best[order[0]])


def _mark_balls(covered: np.ndarray, centers: np.ndarray, radii_mm: np.ndarray, spacing) -> None:
    sp = np.asarray(spacing)
    shape = covered.shape
    for c, r in zip(centers, radii_mm):
        ext = np.floor(r / sp).astype(int)
        lo = np.maximum(c - ext, 0)
        hi = np.minimum(c + ext + 1, shape)
        gx, gy, gz = (
            (np.arange(lo[k], hi[k]) - c[k]) * sp[k] for k in range(3)
        )
        d2 = gx[:, None, None] ** 2 + gy[None, :, None] ** 2 + gz[None, None, :] ** 2
        covered[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] |= d2 <= r * r


def _single_component(mask) -> tuple[np.ndarray, tuple, tuple]:
    fg = as_binary(mask)
    spacing = mask.spacing if isinstance(mask, Volume) else (1.0, 1.0, 1.0)
    cc = connected_components(fg)
    if cc.count == 0:
        raise SkeletonError("cannot skeletonize an empty mask")
    if cc.count > 1:
        fg = cc.labels == cc.order_by_size()[0]
    return fg, spacing, fg.shape


def skeletonize(mask, root_hint=None) -> SkeletonTree:
    """Minimum-cost-path curve skeleton of the largest 26-component of ``mask``.

    Endpoint candidates are local maxima of the geodesic distance from the
    root. Starting from the farthest, each candidate not yet within
    ``2 * radius`` of the skeleton is joined to it along the cheapest path
    under the node cost ``1 / (1 + d**2)`` (``d`` = interior distance in mm),
    which pulls paths onto the medial axis.
    """
    fg, spacing, dims = _single_component(mask)
    dist = interior_distance(fg, spacing)
    if root_hint is not None:
        root_hint = tuple(int(c) for c in root_hint)
        inside = all(0 <= c < n for c, n in zip(root_hint, dims)) and fg[root_hint]
        if not inside:
            raise SkeletonError(f"root hint {root_hint} is outside the mask")
        root_xyz = root_hint
    else:
        root_xyz = _find_root(fg, dist)

    coords, index, eu, ev, step = _voxel_edges(fg, spacing)
    root = int(index[root_xyz])
    n = len(coords)
    radius = dist[tuple(coords.T)]
    parent = np.full(n, -1, dtype=np.int64)
    if n == 1:
        return _tree_from_parents(parent, root, coords, spacing, radius, dims)

    geo = dijkstra(_graph(eu, ev, step, n), directed=False, indices=root)
    node_cost = 1.0 / (1.0 + radius**2)
    graph_cost = _graph(eu, ev, step * 0.5 * (node_cost[eu] + node_cost[ev]), n)

    geo_vol = np.full(dims, -np.inf)
    geo_vol[tuple(coords.T)] = geo
    local_max = ndimage.maximum_filter(geo_vol, size=3, mode="constant", cval=-np.inf)
    is_cand = geo >= local_max[tuple(coords.T)]
    is_cand[root] = False
    cand = np.flatnonzero(is_cand)
    # farthest first; node numbering is raster order so a stable sort breaks ties
    cand = cand[np.argsort(-geo[cand], kind="stable")]

    in_skel = np.zeros(n, dtype=bool)
    in_skel[root] = True
    covered = np.zeros(dims, dtype=bool)
    _mark_balls(covered, coords[[root]], SUPPRESSION_FACTOR * radius[[root]], spacing)
    for c in cand:
        if covered[tuple(coords[c])]:
            continue
        # cheapest path from the candidate to whichever skeleton voxel it reaches first
        _, pred, _ = dijkstra(graph_cost, directed=False, indices=np.flatnonzero(in_skel),
                           return_predecessors=True, min_only=True)
        path = []
        v = int(c)
        while not in_skel[v]:
            path.append(v)
            v = int(pred[v])
        for a, b in zip(path, path[1:] + [v]):
            parent[a] = b
        path = np.asarray(path)
        in_skel[path] = True
        _mark_balls(covered, coords[path], SUPPRESSION_FACTOR * radius[path], spacing)
    return _tree_from_parents(parent, root, coords, spacing, radius, dims)


def _prune_corner_spurs(parent: np.ndarray) -> None:
    """Drop childless nodes whose parent also has a continuing child.

    On staircase chains the shortest-path tree skips corner voxels, leaving
    them as one-voxel side branches; these are removed until none remain.
    """
    n = len(parent)
    while True:
        nchild = np.bincount(parent[parent >= 0], minlength=n)
        inner = (parent >= 0) & (nchild > 0)
        continuing = np.bincount(parent[inner], minlength=n)
        spur = (parent >= 0) & (nchild == 0)
        spur[spur] = continuing[parent[spur]] > 0
        if not spur.any():
            return
        parent[spur] = -1


def _leaf_chain(parent: np.ndarray, nchild: np.ndarray, leaf: int) -> list[int]:
    chain = [leaf]
    node = int(parent[leaf])
    while node >= 0 and nchild[node] == 1 and parent[node] >= 0:
        chain.append(node)
        node = int(parent[node])
    return chain


def _prune_redundant_leaves(parent: np.ndarray, coords: np.ndarray, root: int, dims) -> None:
    """Drop leaf chains lying entirely within one voxel of the rest of the tree.

    Two-voxel-wide ribbons (6-connected staircases) parse into parallel
    26-connected chains; the shorter duplicate is removed one at a time so
    a mutually adjacent pair never disappears together.
    """
    n = len(parent)
    occ = np.zeros(tuple(int(d) + 2 for d in dims), dtype=bool)
    alive = (parent >= 0)
    alive[root] = True
    occ[tuple((coords[alive] + 1).T)] = True
    offs = np.array([d for d in np.ndindex(3, 3, 3) if d != (1, 1, 1)]) - 1
    while True:
        nchild = np.bincount(parent[parent >= 0], minlength=n)
        leaves = np.flatnonzero((parent >= 0) & (nchild == 0))
        best = None
        for leaf in leaves:
            chain = _leaf_chain(parent, nchild, int(leaf))
            if best is not None and len(chain) >= len(best):
                continue
            pts = coords[chain] + 1
            occ[tuple(pts.T)] = False
            near = occ[tuple((pts[:, None, :] + offs[None]).reshape(-1, 3).T)].reshape(len(chain), -1)
            occ[tuple(pts.T)] = True
            if near.any(axis=1).all():
                best = chain
        if best is None:
            return
        parent[best] = -1
        occ[tuple((coords[best] + 1).T)] = False


def parse_branches(skeleton, root, mask=None) -> SkeletonTree:
    """Parse a 26-connected skeleton voxel set into a rooted branch tree.

    The skeleton graph is reduced to its shortest-path tree from ``root``
    (which removes the small cycles 26-adjacency creates at corners); voxels
    with two or more children in that tree are junctions. Radii come from
    the interior distance of ``mask`` when given, else 0.
    """
    skel = as_binary(skeleton)
    spacing = skeleton.spacing if isinstance(skeleton, Volume) else (1.0, 1.0, 1.0)
    root = tuple(int(c) for c in root)
    if not skel.any():
        raise SkeletonError("empty skeleton")
    if not skel[root]:
        raise SkeletonError(f"root {root} is not a skeleton voxel")
    coords, index, eu, ev, step = _voxel_edges(skel, spacing)
    graph = _graph(eu, ev, step, len(coords))
    ncomp, _ = graph_components(graph, directed=False)
    if ncomp != 1:
        raise SkeletonError(f"skeleton is disconnected ({ncomp} components)")
    r = int(index[root])
    _, pred = dijkstra(graph, directed=False, indices=r, return_predecessors=True)
    parent = np.where(pred < 0, -1, pred).astype(np.int64)
    parent[r] = -1
    _prune_corner_spurs(parent)
    _prune_redundant_leaves(parent, coords, r, skel.shape)
    radius = None
    if mask is not None:
        radius = interior_distance(as_binary(mask), spacing)[tuple(coords.T)]
    return _tree_from_parents(parent, r, coords, spacing, radius, skel.shape)


# -------------------------------------------------------------- propagation

def nearest_owner(fg: np.ndarray, points: np.ndarray, spacing) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest point (mm) for every foreground voxel.

    Ties are broken towards the smaller point index. Returns the foreground
    coordinates and the owner index for each.
    """
    sp = np.asarray(spacing, dtype=float)
    vox = np.argwhere(fg)
    if len(vox) == 0:
        return vox, np.zeros(0, dtype=np.int64)
    tree = cKDTree(points * sp)
    q = vox * sp
    k = min(2, len(points))
    d, i = tree.query(q, k=k)
    if k == 1:
        return vox, np.asarray(i, dtype=np.int64)
    owner = i[:, 0].astype(np.int64)
    tol = 1e-9 * np.maximum(d[:, 0], 1.0)
    tied = np.flatnonzero(d[:, 1] - d[:, 0] <= tol)
    if len(tied):
        balls = tree.query_ball_point(q[tied], r=d[tied, 0] + tol[tied])
        owner[tied] = [min(b) for b in balls]
    return vox, owner


def centerline_points(tree: SkeletonTree) -> tuple[np.ndarray, np.ndarray]:
    """All centerline voxels with their owning branch, sorted by (branch id, chain position).

    A junction voxel appears in its parent branch first, so it is owned by the
    smaller branch ID.
    """
    pts = np.concatenate([b.voxels for b in tree.branches])
    bids = np.concatenate([np.full(len(b.voxels), b.id) for b in tree.branches])
    return pts, bids


def propagate_labels(tree: SkeletonTree, branch_classes: dict, mask) -> Volume:
    """Give every mask voxel the class of its nearest centerline voxel."""
    if not tree.branches:
        raise SkeletonError("empty tree")
    fg = as_binary(mask)
    like = mask if isinstance(mask, Volume) else Volume(fg.astype(np.uint8), tree.spacing)
    missing = [b.id for b in tree.branches if b.id not in branch_classes]
    if missing:
        raise SkeletonError(f"branches without a class: {missing}")
    pts, bids = centerline_points(tree)
    vox, owner = nearest_owner(fg, pts, like.spacing)
    lut = np.array([int(branch_classes[b]) for b in range(len(tree.branches))], dtype=np.uint8)
    if lut.min() < 1:
        raise SkeletonError("classes must be integers >= 1")
    out = np.zeros(fg.shape, dtype=np.uint8)
    out[tuple(vox.T)] = lut[bids[owner]]
    return like.like(out)


def branch_ownership(tree: SkeletonTree, mask) -> np.ndarray:
    """Per-voxel owning branch ID (-1 on background) by nearest centerline voxel."""
    fg = as_binary(mask)
    spacing = mask.spacing if isinstance(mask, Volume) else tree.spacing
    pts, bids = centerline_points(tree)
    vox, owner = nearest_owner(fg, pts, spacing)
    out = np.full(fg.shape, -1, dtype=np.int64)
    out[tuple(vox.T)] = bids[owner]
    return out


def skeleton_length_inside(tree: SkeletonTree, pred) -> np.ndarray:
    """Covered centerline length (mm) per branch: steps with both ends inside ``pred``."""
    fg = as_binary(pred)
    if tree.dims is not None and tuple(fg.shape) != tuple(tree.dims):
        raise VolumeError(f"grid mismatch: tree {tree.dims} vs mask {fg.shape}")
    if isinstance(pred, Volume) and not np.allclose(pred.spacing, tree.spacing):
        raise VolumeError(f"spacing mismatch: tree {tree.spacing} vs mask {pred.spacing}")
    out = np.zeros(len(tree.branches))
    for b in tree.branches:
        inside = fg[tuple(b.voxels.T)]
        steps = _step_lengths(b.voxels, tree.spacing)
        out[b.id] = float(steps[inside[:-1] & inside[1:]].sum())
    return out


def skeleton_mask(tree: SkeletonTree, like: Volume | None = None) -> np.ndarray:
    dims = like.dims if like is not None else tree.dims
    out = np.zeros(dims, dtype=bool)
    for b in tree.branches:
        out[tuple(b.voxels.T)] = True
    return out
