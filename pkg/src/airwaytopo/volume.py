"""3D voxel grids, MetaImage I/O, connected components, exact EDT and morphology.

Arrays are indexed ``[x, y, z]``; the on-disk raster order (x fastest) is the
Fortran order of that array, so ``ravel(order="F")`` is used for every
raster-order operation.
"""

from __future__ import annotations

import errno
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

ELEMENT_KINDS = {
    "label8": (np.dtype("<u1"), "MET_UCHAR"),
    "hu16": (np.dtype("<i2"), "MET_SHORT"),
    "real32": (np.dtype("<f4"), "MET_FLOAT"),
}
_KIND_BY_MET = {met: kind for kind, (_, met) in ELEMENT_KINDS.items()}
_KIND_BY_DTYPE = {dt: kind for kind, (dt, _) in ELEMENT_KINDS.items()}


class VolumeError(ValueError):
    """Malformed volume data, header or payload."""


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    class_map: dict | None = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {data.shape}")
        if data.dtype == np.bool_:
            data = data.astype(np.uint8)
        dt = data.dtype.newbyteorder("<") if data.dtype.byteorder == ">" else data.dtype
        if dt not in _KIND_BY_DTYPE:
            raise VolumeError(f"unsupported element type {data.dtype}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise VolumeError(f"origin must have three values, got {self.origin}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        if self.class_map is not None and data.dtype == np.uint8:
            allowed = {int(k) for k in self.class_map}
            present = set(np.unique(data).tolist())
            if not present <= allowed | {0}:
                raise VolumeError(f"label values {sorted(present - allowed)} not in class map")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def element_kind(self) -> str:
        return _KIND_BY_DTYPE[self.data.dtype]

    def like(self, data, class_map=None) -> "Volume":
        """New volume with the same grid geometry."""
        return Volume(data, self.spacing, self.origin, class_map)

    def same_grid(self, other: "Volume") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
        )

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.same_grid(other)
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


def check_same_grid(*volumes: Volume) -> None:
    first = volumes[0]
    for v in volumes[1:]:
        if not first.same_grid(v):
            raise VolumeError(
                f"grid mismatch: {first.dims}/{first.spacing} vs {v.dims}/{v.spacing}"
            )


def as_binary(mask) -> np.ndarray:
    """Boolean array from a Volume or array holding only 0/1."""
    data = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    if data.dtype == np.bool_:
        return data
    if not np.all((data == 0) | (data == 1)):
        raise VolumeError("mask must be binary (0/1)")
    return data.astype(bool)


def binary_volume(mask: np.ndarray, like: Volume) -> Volume:
    return like.like(np.asarray(mask, dtype=np.uint8))


# --------------------------------------------------------------------- I/O

def _parse_header(path: str) -> dict:
    header = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise VolumeError(f"{path}:{lineno}: malformed header line {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise VolumeError(f"{path}:{lineno}: empty header key")
            header[key] = value
    return header


def _floats(header: dict, key: str, n: int, default=None) -> tuple:
    if key not in header:
        if default is not None:
            return default
        raise VolumeError(f"missing header key {key}")
    try:
        vals = tuple(float(t) for t in header[key].split())
    except ValueError:
        raise VolumeError(f"malformed value for {key}: {header[key]!r}") from None
    if len(vals) != n:
        raise VolumeError(f"{key} needs {n} values, got {len(vals)}")
    return vals


def read_volume(path: str | os.PathLike) -> Volume:
    """Read a MetaImage ``.mhd`` header and its raw payload."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(errno.ENOENT, "no such volume", str(path))
    header = _parse_header(path)
    if header.get("NDims", "3") != "3":
        raise VolumeError(f"only 3D images are supported, NDims={header.get('NDims')}")
    dims = _floats(header, "DimSize", 3)
    if any(d != int(d) or d <= 0 for d in dims):
        raise VolumeError(f"malformed DimSize {header['DimSize']!r}")
    dims = tuple(int(d) for d in dims)
    spacing = _floats(header, "ElementSpacing", 3, default=(1.0, 1.0, 1.0))
    origin = _floats(header, "Offset", 3, default=(0.0, 0.0, 0.0))
    met = header.get("ElementType")
    if met not in _KIND_BY_MET:
        raise VolumeError(f"unsupported ElementType {met!r}")
    if header.get("ElementByteOrderMSB", "False").lower() == "true":
        raise VolumeError("big-endian payloads are not supported")
    if header.get("CompressedData", "False").lower() == "true":
        raise VolumeError("compressed payloads are not supported")
    raw_name = header.get("ElementDataFile")
    if not raw_name:
        raise VolumeError("missing header key ElementDataFile")
    raw_path = os.path.join(os.path.dirname(path), raw_name)
    dtype = ELEMENT_KINDS[_KIND_BY_MET[met]][0]
    payload = np.fromfile(raw_path, dtype=np.uint8)
    expected = int(np.prod(dims)) * dtype.itemsize
    if payload.size != expected:
        raise VolumeError(
            f"payload size mismatch: {raw_path} has {payload.size} bytes, expected {expected}"
        )
    data = payload.view(dtype).reshape(dims, order="F")
    return Volume(np.ascontiguousarray(data), spacing, origin)


def _fmt(vals) -> str:
    return " ".join(repr(float(v)) if not float(v).is_integer() else str(int(v)) for v in vals)


def write_volume(v: Volume, path: str | os.PathLike) -> None:
    """Write ``v`` as a ``.mhd`` header plus a ``.raw`` payload next to it."""
    path = os.fspath(path)
    stem, ext = os.path.splitext(path)
    if ext.lower() != ".mhd":
        raise VolumeError(f"MetaImage header path must end in .mhd: {path}")
    raw_path = stem + ".raw"
    dtype, met = ELEMENT_KINDS[v.element_kind]
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        f"DimSize = {' '.join(str(d) for d in v.dims)}",
        f"ElementSpacing = {_fmt(v.spacing)}",
        f"Offset = {_fmt(v.origin)}",
        f"ElementType = {met}",
        "ElementByteOrderMSB = False",
        f"ElementDataFile = {os.path.basename(raw_path)}",
    ]
    payload = np.asarray(v.data, dtype=dtype).ravel(order="F").tobytes()
    with open(raw_path, "wb") as fh:
        fh.write(payload)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


# ------------------------------------------------------- connected components

STRUCTURE = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


@dataclass
class ComponentLabeling:
    labels: np.ndarray  # int32, 0 = background
    count: int
    sizes: np.ndarray  # sizes[k - 1] = voxels of component k

    def order_by_size(self) -> np.ndarray:
        """Component IDs sorted by decreasing size, ties by smaller ID."""
        return np.lexsort((np.arange(1, self.count + 1), -self.sizes)) + 1


def raster_index(shape, coords) -> np.ndarray:
    """x-fastest linear index of ``(..., 3)`` integer coordinates."""
    return np.ravel_multi_index(tuple(np.asarray(coords).T), shape, order="F")


def connected_components(mask, adjacency: int = 26) -> ComponentLabeling:
    """Label foreground components; IDs follow first-encounter raster order."""
    if adjacency not in STRUCTURE:
        raise ValueError(f"adjacency must be 6 or 26, got {adjacency}")
    fg = as_binary(mask)
    labels, count = ndimage.label(fg, structure=STRUCTURE[adjacency])
    if count == 0:
        return ComponentLabeling(labels.astype(np.int32), 0, np.zeros(0, np.int64))
    flat = labels.ravel(order="F")
    nz = np.flatnonzero(flat)
    ids, first = np.unique(flat[nz], return_index=True)
    order = np.argsort(nz[first], kind="stable")
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[ids[order]] = np.arange(1, count + 1, dtype=np.int32)
    labels = remap[labels]
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:].astype(np.int64)
    return ComponentLabeling(labels, int(count), sizes)


class EmptyMaskWarning(UserWarning):
    """An operation received an empty mask and returned an empty result."""


def largest_component(mask, adjacency: int = 26):
    """Largest component of ``mask`` (Volume or array in, same kind out).

    Ties go to the component with the smaller first raster index, i.e. the
    smaller ID. An empty input yields an empty mask and an EmptyMaskWarning.
    """
    fg = as_binary(mask)
    cc = connected_components(fg, adjacency)
    if cc.count == 0:
        warnings.warn("largest_component: empty input mask", EmptyMaskWarning, stacklevel=2)
        out = np.zeros_like(fg)
    else:
        out = cc.labels == cc.order_by_size()[0]
    return binary_volume(out, mask) if isinstance(mask, Volume) else out


# ----------------------------------------------------------------- distances

def edt(fg: np.ndarray, spacing=(1.0, 1.0, 1.0), return_indices: bool = False):
    """Exact Euclidean distance from every voxel to the nearest True voxel of ``fg``."""
    fg = np.asarray(fg, dtype=bool)
    if not fg.any():
        raise VolumeError("distance map needs at least one foreground voxel")
    return ndimage.distance_transform_edt(
        ~fg, sampling=spacing, return_indices=return_indices
    )


def euclidean_distance_map(component_mask, spacing_aware: bool = True) -> Volume:
    """Exact distance (mm, or voxels) to the nearest foreground voxel as a real32 volume."""
    fg = as_binary(component_mask)
    if isinstance(component_mask, Volume):
        like = component_mask
    else:
        like = Volume(fg.astype(np.uint8))
    spacing = like.spacing if spacing_aware else (1.0, 1.0, 1.0)
    return like.like(edt(fg, spacing).astype(np.float32))


def interior_distance(fg: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Distance from each foreground voxel to the nearest background voxel.

    The grid is padded with background so voxels touching the border get a
    finite, geometric value.
    """
    padded = np.pad(np.asarray(fg, dtype=bool), 1)
    d = ndimage.distance_transform_edt(padded, sampling=spacing)
    return d[1:-1, 1:-1, 1:-1]


# ---------------------------------------------------------------- morphology

def ball(radius_vox: int) -> np.ndarray:
    r = int(radius_vox)
    g = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    return x * x + y * y + z * z <= r * r


def dilate(mask, radius_vox: int):
    if radius_vox < 0 or int(radius_vox) != radius_vox:
        raise ValueError("radius must be a non-negative integer")
    fg = as_binary(mask)
    out = fg.copy() if radius_vox == 0 else ndimage.binary_dilation(fg, ball(radius_vox))
    return binary_volume(out, mask) if isinstance(mask, Volume) else out


def erode(mask, radius_vox: int):
    if radius_vox < 0 or int(radius_vox) != radius_vox:
        raise ValueError("radius must be a non-negative integer")
    fg = as_binary(mask)
    out = fg.copy() if radius_vox == 0 else ndimage.binary_erosion(fg, ball(radius_vox))
    return binary_volume(out, mask) if isinstance(mask, Volume) else out
