"""Voxelization of vessel forests into co-registered image/label grids.

Arrays are indexed [x, y, z] with z along the imaging beam. PNG files
store the transpose so that x runs left to right.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .angiogenesis import GeometryError
from .vessel_graph import VesselForest

DEFAULT_SHAPE_2D = (304, 304)
DEFAULT_SHAPE_3D = (304, 304, 160)
_COVER_TOL = 1e-6


@dataclass
class RasterPair:
    """Grayscale image with its binary label, 2D or 3D.

    ``spacing`` has one entry per array axis; ``origin`` is always the 3D
    position (um) of the low corner of the first voxel.
    """

    image: np.ndarray
    label: np.ndarray
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        self.label = np.asarray(self.label, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if self.image.shape != self.label.shape:
            raise GeometryError(f"image {self.image.shape} and label {self.label.shape} differ in shape")
        if self.image.ndim not in (2, 3) or len(self.spacing) != self.image.ndim:
            raise GeometryError("expected a 2D or 3D grid with one spacing per axis")
        if len(self.origin) != 3:
            raise GeometryError("origin must be a 3-vector")
        if min(self.spacing) <= 0:
            raise GeometryError("spacing must be positive")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise ValueError("image intensities must lie in [0, 1]")
        if self.label.size and self.label.max() > 1:
            raise ValueError("label must be binary")

    @property
    def ndim(self) -> int:
        return self.image.ndim

    @property
    def shape(self) -> tuple:
        return self.image.shape

    def copy(self) -> "RasterPair":
        return RasterPair(self.image.copy(), self.label.copy(), self.spacing, self.origin)

    def with_image(self, image: np.ndarray) -> "RasterPair":
        return RasterPair(image, self.label.copy(), self.spacing, self.origin)

    # -- file formats --------------------------------------------------

    def save_png(self, image_path, label_path) -> None:
        if self.ndim != 2:
            raise GeometryError("PNG output needs a 2D pair, project the volume first")
        _write_png(image_path, to_uint8(self.image))
        _write_png(label_path, self.label * np.uint8(255))

    @classmethod
    def load_png(cls, image_path, label_path, spacing=(1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "RasterPair":
        img = np.asarray(Image.open(image_path), dtype=np.uint8).T
        lab = np.asarray(Image.open(label_path), dtype=np.uint8).T
        return cls(img / 255.0, (lab > 127).astype(np.uint8), spacing, origin)

    def save_raw(self, image_path, label_path) -> None:
        _write_raw(image_path, self.image.astype("<f4"), self.spacing, self.origin)
        _write_raw(label_path, self.label.astype("u1"), self.spacing, self.origin)

    @classmethod
    def load_raw(cls, image_path, label_path) -> "RasterPair":
        img, meta = _read_raw(image_path)
        lab, _ = _read_raw(label_path)
        return cls(img.astype(float), lab, meta["spacing_um"], meta["origin_um"])


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write_png(path, arr: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(arr.T), mode="L").save(path, format="PNG", optimize=False)


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def _write_raw(path, arr: np.ndarray, spacing, origin) -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr).tobytes(order="C"))
    meta = {
        "shape": list(arr.shape),
        "spacing_um": list(spacing),
        "origin_um": list(origin),
        "dtype": arr.dtype.str,
        "order": "C",
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=1) + "\n")


def _read_raw(path):
    meta = json.loads(sidecar_path(path).read_text())
    if meta.get("order", "C") != "C":
        raise ValueError(f"{path}: only C-order raw files are supported")
    arr = np.fromfile(path, dtype=np.dtype(meta["dtype"]))
    shape = tuple(meta["shape"])
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {arr.size} values, sidecar says {shape}")
    return arr.reshape(shape), meta


# ---------------------------------------------------------------------------
# rasterization


def rasterize_volume(forest: VesselForest, shape, spacing, origin=(0.0, 0.0, 0.0),
                     edge: float | None = None) -> RasterPair:
    """Voxelize the forest as a union of capsules.

    label = 1 where the voxel centre is within r of a segment axis. The image
    ramps linearly from 1 at the vessel wall to 0 one ``edge`` further out
    (default: the coarsest voxel spacing), taking the max over segments.
    """
    shape = tuple(int(n) for n in shape)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,)).copy()
    origin = np.asarray(origin, dtype=float)
    if len(shape) != 3 or min(shape) < 1:
        raise GeometryError(f"bad volume shape {shape}")
    lo, hi = origin, origin + np.asarray(shape) * spacing
    if len(forest) and (np.any(forest.domain[0] < lo - _COVER_TOL) or np.any(forest.domain[1] > hi + _COVER_TOL)):
        raise GeometryError("forest domain is not covered by the raster grid")
    edge = float(spacing.max() if edge is None else edge)
    if edge <= 0:
        raise GeometryError("edge width must be positive")

    image = np.zeros(shape)
    label = np.zeros(shape, dtype=np.uint8)
    a, b, r, _ = forest.segments()
    if len(r):
        _kernels.rasterize_capsules(image, label, origin, spacing, np.ascontiguousarray(a),
                                    np.ascontiguousarray(b), np.ascontiguousarray(r), edge)
    return RasterPair(image, label, tuple(spacing), tuple(origin))


def rasterize_forest(forest: VesselForest, shape=DEFAULT_SHAPE_3D) -> RasterPair:
    """Rasterize over the forest's own domain, spacing = extent / shape."""
    shape = tuple(int(n) for n in shape)
    spacing = forest.extent / np.asarray(shape, dtype=float)
    return rasterize_volume(forest, shape, spacing, forest.domain[0])


def enface_projection(volume: RasterPair) -> RasterPair:
    """Maximum intensity projection along the beam axis, image and label separately."""
    if volume.ndim != 3:
        raise GeometryError("en-face projection needs a 3D volume")
    return RasterPair(volume.image.max(axis=2), volume.label.max(axis=2), volume.spacing[:2], volume.origin)


def depth_slab(volume: RasterPair, z_lo: float, z_hi: float) -> RasterPair:
    """Keep the voxels whose centres lie in [z_lo, z_hi) along the beam axis."""
    if volume.ndim != 3:
        raise GeometryError("depth slab needs a 3D volume")
    if not z_lo < z_hi:
        raise ValueError(f"empty depth range [{z_lo}, {z_hi})")
    oz, sz = volume.origin[2], volume.spacing[2]
    centres = oz + (np.arange(volume.shape[2]) + 0.5) * sz
    keep = np.nonzero((centres >= z_lo) & (centres < z_hi))[0]
    if keep.size == 0:
        raise ValueError(f"no voxel centres in [{z_lo}, {z_hi})")
    k0, k1 = int(keep[0]), int(keep[-1]) + 1
    origin = (volume.origin[0], volume.origin[1], oz + k0 * sz)
    return RasterPair(volume.image[:, :, k0:k1].copy(), volume.label[:, :, k0:k1].copy(), volume.spacing, origin)
