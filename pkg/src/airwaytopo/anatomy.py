"""Anatomy-aware multi-class labels from a binary airway mask.

Branch generation in the rooted skeleton stands in for anatomic level:
large airways (trachea and main bronchi), medium airways (down to the
segmental level) and small airways.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .skeleton import SkeletonTree, propagate_labels, skeletonize
from .volume import Volume, as_binary, connected_components, read_volume, write_volume

BACKGROUND, LARGE, MEDIUM, SMALL = 0, 1, 2, 3
CLASS_MAP = {BACKGROUND: "background", LARGE: "L", MEDIUM: "M", SMALL: "S"}
DEFAULT_CUTOFFS = (1, 3)


@dataclass
class AmcLabel:
    volume: Volume
    generation_cutoffs: tuple[int, int] = DEFAULT_CUTOFFS
    class_map: dict = None
    tree: SkeletonTree | None = None

    def __post_init__(self):
        if self.class_map is None:
            self.class_map = dict(CLASS_MAP)
        vals = set(np.unique(self.volume.data).tolist())
        if not vals <= set(CLASS_MAP):
            raise ValueError(f"AMC label values must be in {sorted(CLASS_MAP)}, got {sorted(vals)}")

    def support(self, cls: int) -> np.ndarray:
        return self.volume.data == cls

    def counts(self) -> dict[str, int]:
        return {CLASS_MAP[c]: int(self.support(c).sum()) for c in (LARGE, MEDIUM, SMALL)}

    def save(self, path) -> None:
        """Write the label volume plus a ``.json`` sidecar next to it."""
        write_volume(self.volume, path)
        with open(_sidecar(path), "w") as fh:
            json.dump(
                {
                    "class_map": {str(k): v for k, v in self.class_map.items()},
                    "generation_cutoffs": list(self.generation_cutoffs),
                },
                fh,
                indent=2,
            )

    @classmethod
    def load(cls, path) -> "AmcLabel":
        vol = read_volume(path)
        with open(_sidecar(path)) as fh:
            meta = json.load(fh)
        return cls(
            vol,
            tuple(meta["generation_cutoffs"]),
            {int(k): v for k, v in meta["class_map"].items()},
        )


def _sidecar(path) -> str:
    path = str(path)
    return (path[:-4] if path.lower().endswith(".mhd") else path) + ".json"


def class_for_generation(gen: int, cutoffs: tuple[int, int]) -> int:
    g_lm, g_ms = cutoffs
    if gen <= g_lm:
        return LARGE
    if gen <= g_ms:
        return MEDIUM
    return SMALL


def decompose_amc(mask, cutoffs: tuple[int, int] = DEFAULT_CUTOFFS, tree: SkeletonTree | None = None) -> AmcLabel:
    """Split ``mask`` into L/M/S classes by skeleton generation depth.

    A precomputed ``tree`` may be passed to skip skeletonization. Masks with
    several components are reduced to the largest one, with a UserWarning.
    """
    g_lm, g_ms = (int(c) for c in cutoffs)
    if g_lm < 0 or g_ms < g_lm:
        raise ValueError(f"cutoffs must satisfy 0 <= g_LM <= g_MS, got {cutoffs}")
    fg = as_binary(mask)
    like = mask if isinstance(mask, Volume) else Volume(fg.astype(np.uint8))
    cc = connected_components(fg)
    if cc.count == 0:
        raise ValueError("cannot decompose an empty mask")
    if cc.count > 1:
        warnings.warn(
            f"mask has {cc.count} components; decomposing the largest only", UserWarning, stacklevel=2
        )
        fg = cc.labels == cc.order_by_size()[0]
    main = like.like(fg.astype(np.uint8))
    if tree is None:
        tree = skeletonize(main)
    classes = {b.id: class_for_generation(b.generation, (g_lm, g_ms)) for b in tree.branches}
    vol = propagate_labels(tree, classes, main)
    return AmcLabel(like.like(vol.data, class_map=CLASS_MAP), (g_lm, g_ms), dict(CLASS_MAP), tree)


def amc_to_binary(label: AmcLabel | Volume) -> Volume:
    vol = label.volume if isinstance(label, AmcLabel) else label
    return vol.like((vol.data > 0).astype(np.uint8))
