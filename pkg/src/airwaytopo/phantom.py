"""Synthetic airway phantoms: recursive binary trees of tapering tubes with known topology."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from .skeleton import Branch, SkeletonTree, _step_lengths
from .volume import Volume, ball

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhantomSpec:
    generations: int = 6
    trunk_radius_mm: float = 4.5
    trunk_length_mm: float = 30.0
    radius_decay: float = 0.75
    length_decay: float = 0.8
    branch_angle_deg: float = 35.0
    angle_jitter_deg: float = 5.0
    children_per_junction: int = 2
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    margin_vox: int = 4
    lumen_hu: float = -1000.0
    wall_hu: float = -50.0
    parenchyma_hu: float = -850.0
    noise_sigma_hu: float = 30.0
    blur_sigma_vox: float = 0.0
    min_clearance_vox: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        for name in ("radius_decay", "length_decay"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.children_per_junction != 2:
            raise ValueError("only binary branching is supported")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")
        if self.trunk_radius_mm < min(self.spacing):
            raise ValueError("trunk radius is below one voxel; nothing to voxelize")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Segment:
    start: np.ndarray
    end: np.ndarray
    radius: float
    generation: int
    parent: int | None
    plane: np.ndarray


@dataclass
class Phantom:
    ct: Volume
    gt_mask: Volume
    gt_tree: SkeletonTree
    spec: PhantomSpec
    generations: int

    def __iter__(self):
        return iter((self.ct, self.gt_mask, self.gt_tree))


def effective_generations(spec: PhantomSpec) -> int:
    """Generations whose radius stays at or above one voxel."""
    g = spec.generations
    vox = min(spec.spacing)
    while g > 1 and spec.trunk_radius_mm * spec.radius_decay ** (g - 1) < vox:
        g -= 1
    return g


def _rotate(d: np.ndarray, p: np.ndarray, angle: float) -> np.ndarray:
    return math.cos(angle) * d + math.sin(angle) * p


def _grow(spec: PhantomSpec, generations: int, rng: np.random.Generator) -> list[Segment]:
    segs = [
        Segment(
            start=np.zeros(3),
            end=np.array([0.0, 0.0, -spec.trunk_length_mm]),
            radius=spec.trunk_radius_mm,
            generation=0,
            parent=None,
            plane=np.array([1.0, 0.0, 0.0]),
        )
    ]
    frontier = [0]
    for gen in range(1, generations):
        nxt = []
        for pid in frontier:
            par = segs[pid]
            d = (par.end - par.start) / np.linalg.norm(par.end - par.start)
            length = spec.trunk_length_mm * spec.length_decay**gen
            radius = spec.trunk_radius_mm * spec.radius_decay**gen
            for sign in (-1.0, 1.0):
                jitter = rng.uniform(-spec.angle_jitter_deg, spec.angle_jitter_deg)
                a = math.radians(spec.branch_angle_deg + jitter)
                cd = _rotate(d, sign * par.plane, a)
                cd /= np.linalg.norm(cd)
                plane = np.cross(cd, par.plane)
                plane /= np.linalg.norm(plane)
                segs.append(Segment(par.end.copy(), par.end + length * cd, radius, gen, pid, plane))
                nxt.append(len(segs) - 1)
        frontier = nxt
    return segs


def _segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between two 3D segments."""
    u, v, w0 = p1 - p0, q1 - q0, p0 - q0
    a, b, c, d, e = u @ u, u @ v, v @ v, u @ w0, v @ w0
    den = a * c - b * b
    cands = []
    if den > 1e-12:
        s = np.clip((b * e - c * d) / den, 0, 1)
        t = np.clip((a * e - b * d) / den, 0, 1)
        cands.append((s, t))
    for s in (0.0, 1.0):
        cands.append((s, np.clip((e + b * s) / c, 0, 1)))
    for t in (0.0, 1.0):
        cands.append((np.clip((t * b - d) / a, 0, 1), t))
    return min(float(np.linalg.norm(w0 + s * u - t * v)) for s, t in cands)


def _collides(segs: list[Segment], clearance_mm: float) -> bool:
    for i in range(len(segs)):
        for j in range(i + 1, len(segs)):
            si, sj = segs[i], segs[j]
            related = si.parent == j or sj.parent == i or (si.parent is not None and si.parent == sj.parent)
            if related:
                continue
            gap = _segment_distance(si.start, si.end, sj.start, sj.end) - si.radius - sj.radius
            if gap < clearance_mm:
                return True
    return False


def _capsule(shape, spacing, p0, p1, radius) -> tuple[tuple[slice, ...], np.ndarray]:
    """Voxels within ``radius`` of segment p0-p1 (all in mm), restricted to its bounding box."""
    sp = np.asarray(spacing)
    lo = np.maximum(np.floor((np.minimum(p0, p1) - radius) / sp).astype(int), 0)
    hi = np.minimum(np.ceil((np.maximum(p0, p1) + radius) / sp).astype(int) + 1, shape)
    axes = [np.arange(lo[k], hi[k]) * sp[k] for k in range(3)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([x, y, z], axis=-1) - p0
    u = p1 - p0
    t = np.clip((pts @ u) / (u @ u), 0.0, 1.0)
    d2 = np.sum((pts - t[..., None] * u) ** 2, axis=-1)
    sl = tuple(slice(lo[k], hi[k]) for k in range(3))
    return sl, d2 <= radius * radius + 1e-9


def _raster_chain(p0, p1, spacing) -> np.ndarray:
    """26-connected voxel chain along a segment (mm endpoints), duplicates removed."""
    sp = np.asarray(spacing)
    n = max(2, int(math.ceil(np.linalg.norm((p1 - p0) / sp) * 4)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    vox = np.rint((p0 + t * (p1 - p0)) / sp).astype(np.int64)
    chain = [vox[0]]
    for v in vox[1:]:
        if np.array_equal(v, chain[-1]):
            continue
        # drop staircase corners: keep the chain minimal under 26-adjacency
        if len(chain) >= 2 and np.abs(v - chain[-2]).max() <= 1:
            chain[-1] = v
        else:
            chain.append(v)
    return np.asarray(chain, dtype=np.int64)


def generate_phantom(spec: PhantomSpec | None = None, max_attempts: int = 50) -> Phantom:
    """Voxelize a recursive airway tree; returns CT, lumen mask and ground-truth tree."""
    spec = spec or PhantomSpec()
    spec.validate()
    gens = effective_generations(spec)
    if gens < spec.generations:
        logger.warning("phantom generations clamped from %d to %d", spec.generations, gens)
    rng = np.random.default_rng(spec.seed)
    vox = min(spec.spacing)
    for _ in range(max_attempts):
        segs = _grow(spec, gens, rng)
        if not _collides(segs, spec.min_clearance_vox * vox):
            break
    else:
        raise ValueError(f"could not place a collision-free tree in {max_attempts} attempts")

    sp = np.asarray(spec.spacing, dtype=float)
    pts = np.concatenate([[s.start, s.end] for s in segs])
    rmax = spec.trunk_radius_mm
    pad = (rmax + (spec.margin_vox + 1) * sp)
    lo = pts.min(axis=0) - pad
    hi = pts.max(axis=0) + pad
    # trachea top sits margin voxels below the top face
    shift = -lo
    shape = tuple(int(n) for n in np.ceil((hi - lo) / sp).astype(int) + 1)
    for s in segs:
        s.start = s.start + shift
        s.end = s.end + shift

    lumen = np.zeros(shape, dtype=bool)
    for s in segs:
        sl, caps = _capsule(shape, sp, s.start, s.end, s.radius)
        lumen[sl] |= caps
    wall = ndimage.binary_dilation(lumen, ball(1)) & ~lumen

    ct = np.full(shape, spec.parenchyma_hu, dtype=np.float64)
    ct[wall] = spec.wall_hu
    ct[lumen] = spec.lumen_hu
    if spec.blur_sigma_vox > 0:
        ct = ndimage.gaussian_filter(ct, spec.blur_sigma_vox)
    if spec.noise_sigma_hu > 0:
        ct = ct + rng.normal(0.0, spec.noise_sigma_hu, size=shape)
    ct = np.clip(np.rint(ct), -32768, 32767).astype(np.int16)

    branches = []
    for bid, s in enumerate(segs):
        chain = _raster_chain(s.start, s.end, sp)
        if s.parent is not None:
            junction = branches[s.parent].voxels[-1]
            if not np.array_equal(chain[0], junction):
                chain = np.vstack([junction, chain])
        branches.append(
            Branch(
                id=bid,
                voxels=chain,
                parent=s.parent,
                generation=s.generation,
                length_mm=float(_step_lengths(chain, sp).sum()),
                mean_radius_mm=float(s.radius),
            )
        )
    root = tuple(int(c) for c in branches[0].voxels[0])
    tree = SkeletonTree(branches, root, tuple(float(v) for v in sp), shape)

    geom = dict(spacing=tuple(sp), origin=(0.0, 0.0, 0.0))
    return Phantom(
        ct=Volume(ct, **geom),
        gt_mask=Volume(lumen.astype(np.uint8), **geom),
        gt_tree=tree,
        spec=replace(spec) if gens == spec.generations else replace(spec, generations=gens),
        generations=gens,
    )
