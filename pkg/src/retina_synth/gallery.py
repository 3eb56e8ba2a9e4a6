"""One en-face example per artifact family, for eyeballing."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .artifacts import ArtifactSpec, apply_artifact
from .config import RunConfig
from .dataset import rasterize_sample, simulate_sample
from .raster import RasterPair, enface_projection
from .retina import SLAB_GAP_UM, surface_height

# what to look for in each picture
NOTES = {
    "clean": "unaugmented en-face projection",
    "clean_deep": "projection of the deep slab only (below the SVC), no artifacts",
    "flow_projection": "deep slab again: bright tails of the large SVC vessels now show through",
    "motion_shear": "the image past a horizontal or vertical cut is offset along the cut",
    "motion_stretch": "content just past the cut is stretched away from it",
    "motion_buckle": "content near the cut is repeated (folded back over the cut)",
    "motion_whiteout": "a band of B-scans replaced by bright uniform noise",
    "floater": "a dark thread-like shadow",
    "capillary_bg": "grainy background signal between the vessels",
}

# fixed, clearly visible settings per family
_GALLERY_PARAMS = {
    "flow_projection": {"gain": 0.6},
    "motion_shear": {"shift": 10, "position": 0.45},
    "motion_stretch": {"amplitude": 0.05, "position": 0.4},
    "motion_buckle": {"amplitude": 0.05, "position": 0.55},
    "motion_whiteout": {"width": 3, "position": 0.5},
    "floater": {"n_segments": 6, "thickness": [6.0, 15.0], "length": [40.0, 60.0], "attenuation": 0.15},
    "capillary_bg": {"p": 0.25, "sigma": 0.8, "amplitude": 0.6},
}


def deep_view(volume: RasterPair, cut_height: np.ndarray, cut_spacing: float) -> RasterPair:
    """En-face projection of the voxels deeper than a lateral height map."""
    nx, ny, nz = volume.shape
    cx = volume.origin[0] + (np.arange(nx) + 0.5) * volume.spacing[0]
    cy = volume.origin[1] + (np.arange(ny) + 0.5) * volume.spacing[1]
    xy = np.stack(np.meshgrid(cx, cy, indexing="ij"), axis=-1).reshape(-1, 2)
    cut = surface_height(cut_height, cut_spacing, xy).reshape(nx, ny)
    cz = volume.origin[2] + (np.arange(nz) + 0.5) * volume.spacing[2]
    keep = cz[None, None, :] >= cut[:, :, None]
    return enface_projection(RasterPair(volume.image * keep, volume.label * keep, volume.spacing, volume.origin))


def make_gallery(cfg: RunConfig, out, index: int = 0) -> dict:
    """Write clean.png, clean_deep.png and one PNG per family; returns the index doc."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    forest, meta = simulate_sample(cfg, index)
    vol = rasterize_sample(cfg, forest)
    flat = enface_projection(vol)
    # everything below the SVC slab, following the ganglion-cell layer
    surf = cfg.retina.spec(meta["retina_seed"], cfg.base_dir).resolved_surfaces()
    cut = surf.gcl_height + cfg.retina.svc.omega[2] + 0.5 * SLAB_GAP_UM

    images = {"clean": flat, "clean_deep": deep_view(vol, cut, surf.spacing)}
    for k, (kind, params) in enumerate(_GALLERY_PARAMS.items()):
        spec = ArtifactSpec(kind, params, seed=meta["sample_seed"] % (2**63) + k)
        rng = np.random.default_rng([meta["sample_seed"], k])
        if kind == "flow_projection":
            shadowed = apply_artifact(vol, spec, forest, rng)
            images[kind] = deep_view(shadowed, cut, surf.spacing)
        else:
            images[kind] = apply_artifact(flat, spec, forest, rng)

    doc = {"sample_seed": meta["sample_seed"], "images": {}}
    for name, pair in images.items():
        pair.save_png(out / f"{name}.png", out / f"{name}_label.png")
        doc["images"][name] = {"file": f"{name}.png", "label": f"{name}_label.png", "look_for": NOTES[name],
                               "params": _GALLERY_PARAMS.get(name, {})}
    (out / "gallery.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc
