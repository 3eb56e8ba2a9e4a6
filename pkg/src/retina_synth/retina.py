"""Whole-retina assembly: SVC and DVC growth, the foveal avascular zone,
layer-surface deformation and the final remodeling pass."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .angiogenesis import (
    FieldGrid,
    GeometryError,
    PlexusResult,
    ScalarField3D,
    SeedSegment,
    run_plexus,
)
from .vessel_graph import (
    DVC,
    SVC,
    PlexusConfig,
    VesselForest,
    dvc_config,
    merge_forests,
    remodel_forest,
    svc_config,
)

logger = logging.getLogger(__name__)

# independent random streams derived from the retina seed
_STREAM_SURFACES, _STREAM_FAZ, _STREAM_STUMPS, _STREAM_SVC, _STREAM_SPROUTS, _STREAM_DVC = range(6)

FAZ_MARGIN_UM = 16.0
SLAB_GAP_UM = 16.0


class NoSproutsError(RuntimeError):
    """The SVC offered no vertical sprouts, so the DVC cannot start."""


def stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, key])


# ---------------------------------------------------------------------------
# layer surfaces


@dataclass
class LayerSurfaces:
    """Depth of the ganglion cell and inner nuclear layers (um, beam axis).

    Height maps are sampled at ``i * spacing`` along x (first index) and y.
    """

    extent: tuple[float, float]
    spacing: float
    gcl_height: np.ndarray
    inl_height: np.ndarray

    def __post_init__(self):
        self.extent = (float(self.extent[0]), float(self.extent[1]))
        self.spacing = float(self.spacing)
        self.gcl_height = np.asarray(self.gcl_height, dtype=float)
        self.inl_height = np.asarray(self.inl_height, dtype=float)
        if self.gcl_height.ndim != 2 or self.gcl_height.shape != self.inl_height.shape:
            raise ValueError("height maps must be 2D arrays of equal shape")
        if not (np.isfinite(self.gcl_height).all() and np.isfinite(self.inl_height).all()):
            raise ValueError("height maps must be finite")
        if (self.inl_height < self.gcl_height).any():
            raise ValueError("inl_height must not lie above gcl_height")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        span = (np.array(self.gcl_height.shape) - 1) * self.spacing
        if (span < np.array(self.extent) - 1e-6).any():
            raise ValueError("height maps do not cover the extent")

    @property
    def shape(self) -> tuple[int, int]:
        return self.gcl_height.shape

    @property
    def min_separation(self) -> float:
        return float((self.inl_height - self.gcl_height).min())

    def save(self, path) -> None:
        """Write ``<path>`` (raw float32, channels gcl then inl) and ``<path>.json``."""
        path = Path(path)
        data = np.stack([self.gcl_height, self.inl_height]).astype("<f4")
        path.write_bytes(data.tobytes(order="C"))
        meta = {"extent_um": list(self.extent), "spacing_um": self.spacing, "shape": list(data.shape)}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "LayerSurfaces":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        shape = tuple(int(v) for v in meta["shape"])
        if len(shape) != 3 or shape[0] != 2:
            raise ValueError(f"{path}: expected shape [2, nx, ny], got {list(shape)}")
        data = np.frombuffer(path.read_bytes(), dtype="<f4")
        if data.size != math.prod(shape):
            raise ValueError(f"{path}: {data.size} samples, sidecar says {math.prod(shape)}")
        data = data.reshape(shape).astype(float)
        return cls(tuple(meta["extent_um"]), float(meta["spacing_um"]), data[0], data[1])


def _smooth_noise(rng, shape, sigma_cells: float) -> np.ndarray:
    g = ndimage.gaussian_filter(rng.standard_normal(shape), sigma_cells, mode="reflect")
    sd = g.std()
    return g / sd if sd > 0 else g


def synthesize_layer_surfaces(extent, seed: int, spacing: float = 20.0,
                              slab_thickness: float = 64.0) -> LayerSurfaces:
    """Foveal-pit shaped GCL and INL surfaces.

    The GCL sits deepest at the centre (a Gaussian pit) on a gently curved,
    noisy base. The INL follows it at a thickness that never drops below
    one slab plus a small gap, so the two complexes cannot overlap.
    """
    rng = stream(seed, _STREAM_SURFACES)
    ex, ey = float(extent[0]), float(extent[1])
    nx = int(math.ceil(ex / spacing - 1e-9)) + 1
    ny = int(math.ceil(ey / spacing - 1e-9)) + 1
    x = np.arange(nx) * spacing - ex / 2
    y = np.arange(ny) * spacing - ey / 2
    X, Y = np.meshgrid(x, y, indexing="ij")
    r2 = X**2 + Y**2
    half = min(ex, ey) / 2

    depth = rng.uniform(80.0, 130.0)
    width = rng.uniform(0.22, 0.32) * half
    pit = depth * np.exp(-r2 / (2 * width**2))
    bowl = rng.uniform(-30.0, 30.0) * r2 / (2 * half**2)
    noise = rng.uniform(3.0, 8.0) * _smooth_noise(rng, X.shape, 250.0 / spacing)
    gcl = pit + bowl + noise
    gcl += 40.0 - gcl.min()

    # the INL thins over the pit but keeps the slabs apart
    floor = slab_thickness + SLAB_GAP_UM
    extra = rng.uniform(20.0, 40.0) * (1.0 - 0.6 * pit / depth)
    extra += 6.0 * np.abs(_smooth_noise(rng, X.shape, 300.0 / spacing))
    inl = gcl + floor + extra
    return LayerSurfaces((ex, ey), spacing, gcl, inl)


def surface_height(surface: np.ndarray, spacing: float, xy: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a height map at lateral points (um)."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    coords = (xy[:, :2] / spacing).T
    return ndimage.map_coordinates(np.asarray(surface, dtype=float), coords, order=1, mode="nearest")


def deform_to_layers(forest: VesselForest, surface: np.ndarray, spacing: float) -> VesselForest:
    """Offset every node along the beam axis by the surface height below it."""
    surface = np.asarray(surface, dtype=float)
    span = (np.array(surface.shape) - 1) * spacing
    out = forest.copy()
    if len(out) == 0:
        return out
    xy = out.positions[:, :2]
    if (xy < -1e-6).any() or (xy > span + 1e-6).any():
        raise GeometryError("forest extends beyond the layer surface")
    dz = surface_height(surface, spacing, xy)
    out._pos[: len(out), 2] += dz
    lo, hi = out.domain
    out.domain = np.array([[lo[0], lo[1], lo[2] + surface.min()], [hi[0], hi[1], hi[2] + surface.max()]])
    return out


# ---------------------------------------------------------------------------
# retina description and the avascular zone


@dataclass
class RetinaSpec:
    svc_config: PlexusConfig = field(default_factory=svc_config)
    dvc_config: PlexusConfig = field(default_factory=dvc_config)
    faz_radius: float = 350.0
    n_stumps: int = 8
    surfaces: LayerSurfaces | None = None
    seed: int = 0
    p_sprout: float = 0.05
    faz_eccentricity: float = 0.15
    stump_jitter: float = 0.25

    def __post_init__(self):
        ox, oy, _ = self.svc_config.omega
        if tuple(self.dvc_config.omega[:2]) != (ox, oy):
            raise ValueError("svc_config and dvc_config must share the lateral extent")
        if not 0 < self.faz_radius < min(ox, oy) / 2:
            raise ValueError("faz_radius: must be positive and below half the lateral extent")
        if not 0 <= self.faz_eccentricity < 1:
            raise ValueError("faz_eccentricity: must lie in [0, 1)")
        if self.faz_radius * (1 + self.faz_eccentricity) >= min(ox, oy) / 2:
            raise ValueError("faz_radius: jittered FAZ would reach the domain edge")
        if int(self.n_stumps) < 1:
            raise ValueError("n_stumps: must be >= 1")
        if not 0 <= self.p_sprout <= 1:
            raise ValueError("p_sprout: must lie in [0, 1]")
        if not 0 <= self.stump_jitter <= 1:
            raise ValueError("stump_jitter: must lie in [0, 1]")
        if self.surfaces is not None:
            span = (np.array(self.surfaces.shape) - 1) * self.surfaces.spacing
            if (span < np.array([ox, oy]) - 1e-6).any():
                raise ValueError("surfaces: do not cover the lateral extent")

    @property
    def extent(self) -> tuple[float, float]:
        return self.svc_config.omega[0], self.svc_config.omega[1]

    def resolved_surfaces(self) -> LayerSurfaces:
        if self.surfaces is not None:
            return self.surfaces
        return synthesize_layer_surfaces(self.extent, self.seed, slab_thickness=self.svc_config.omega[2])


@dataclass(frozen=True)
class FazRegion:
    """Elliptical cylinder around the beam axis."""

    center: tuple[float, float]
    semi_axes: tuple[float, float]
    angle: float = 0.0

    def _local(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))[:, :2] - np.asarray(self.center)
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = xy[:, 0] * c + xy[:, 1] * s
        v = -xy[:, 0] * s + xy[:, 1] * c
        return np.stack([u / self.semi_axes[0], v / self.semi_axes[1]], axis=1)

    def contains(self, points) -> np.ndarray:
        q = self._local(points)
        return (q**2).sum(axis=1) <= 1.0

    def segment_hits(self, starts, ends, radii, margin: float = 0.0) -> np.ndarray:
        """True where a capsule (plus margin) may touch the region.

        The ellipse is scaled by 1 + (r + margin) / min(a, b), which contains
        its offset curve, so the test is conservative and never misses.
        """
        starts = np.atleast_2d(np.asarray(starts, dtype=float))
        if len(starts) == 0:
            return np.zeros(0, dtype=bool)
        scale = 1.0 + (np.asarray(radii, dtype=float) + margin) / min(self.semi_axes)
        a = self._local(starts) / scale[:, None]
        b = self._local(ends) / scale[:, None]
        d = b - a
        ll = (d**2).sum(axis=1)
        t = np.where(ll > 0, -(a * d).sum(axis=1) / np.where(ll > 0, ll, 1.0), 0.0)
        q = a + np.clip(t, 0.0, 1.0)[:, None] * d
        return (q**2).sum(axis=1) <= 1.0

    def intrusions(self, forest: VesselForest, margin: float = 0.0) -> np.ndarray:
        """Per-node mask: the node or its incoming segment enters the region."""
        n = len(forest)
        bad = self.contains(forest.positions) if n else np.zeros(0, dtype=bool)
        if n:
            s, e, r, ids = forest.segments()
            bad[ids] |= self.segment_hits(s, e, r, margin)
        return bad

    def cell_mask(self, grid: FieldGrid) -> np.ndarray:
        centres = grid.cell_centers().reshape(-1, 3)
        return self.contains(centres).reshape(grid.shape)


def faz_region(spec: RetinaSpec) -> FazRegion:
    rng = stream(spec.seed, _STREAM_FAZ)
    e = rng.uniform(-spec.faz_eccentricity, spec.faz_eccentricity)
    angle = rng.uniform(0.0, math.pi)
    ox, oy = spec.extent
    return FazRegion((ox / 2, oy / 2), (spec.faz_radius * (1 + e), spec.faz_radius * (1 - e)), angle)


def faz_secretion_mask(spec: RetinaSpec, grid: FieldGrid, faz: FazRegion | None = None) -> ScalarField3D:
    faz = faz_region(spec) if faz is None else faz
    values = np.where(faz.cell_mask(grid), 0.0, 1.0)
    return ScalarField3D(grid, values)


# ---------------------------------------------------------------------------
# seeds


def radial_stump_seeds(spec: RetinaSpec, rng: np.random.Generator, length: float | None = None) -> list[SeedSegment]:
    """Arteriole stumps on the lateral boundary, each pointing at the centre."""
    cfg = spec.svc_config
    ox, oy, oz = cfg.omega
    n = int(spec.n_stumps)
    length = cfg.step_lengths[0] if length is None else float(length)
    spread = 2 * math.pi / n
    jitter = rng.uniform(-0.5, 0.5, n) * spec.stump_jitter * spread
    centre = np.array([ox / 2, oy / 2, oz / 2])
    seeds = []
    for k in range(n):
        a = k * spread + jitter[k]
        u = np.array([math.cos(a), math.sin(a), 0.0])
        reach = min(ox / 2 / abs(u[0]) if abs(u[0]) > 1e-12 else math.inf,
                    oy / 2 / abs(u[1]) if abs(u[1]) > 1e-12 else math.inf)
        start = np.clip(centre + reach * u, 0.0, [ox, oy, oz])
        end = start - length * u
        seeds.append(SeedSegment(tuple(start), tuple(end), cfg.r_initial))
    return seeds


def vertical_sprout_seeds(svc: VesselForest, dvc_cfg: PlexusConfig, rng: np.random.Generator, *,
                          p_sprout: float = 0.05, svc_cfg: PlexusConfig | None = None,
                          length: float | None = None) -> list[SeedSegment]:
    """Seeds for the DVC, one per SVC node that sprouts downwards.

    Candidates are non-root SVC nodes with a free child slot and a radius in
    [r_min, 2 r_degen] of the SVC. Seeds are given in DVC slab coordinates:
    they start at the top of the slab under their anchor and point along +z.
    """
    svc_cfg = svc_config() if svc_cfg is None else svc_cfg
    n = len(svc)
    u = rng.random(n)
    if n == 0:
        raise NoSproutsError("empty SVC forest")
    r = svc.radii
    ok = (svc.parents >= 0) & (svc.n_children() < 2) & (svc.plexus == SVC)
    ok &= (r >= svc_cfg.r_min) & (r <= 2 * svc_cfg.r_degen)
    chosen = np.nonzero(ok & (u < p_sprout))[0]
    length = dvc_cfg.omega[2] / 2 if length is None else float(length)
    seeds = []
    for node in chosen:
        x, y = svc.positions[node, :2]
        radius = min(r[node], r[node] / 2.0 ** (1.0 / dvc_cfg.gamma))
        radius = max(radius, dvc_cfg.r_min)
        seeds.append(SeedSegment((x, y, 0.0), (x, y, length), float(radius), int(node)))
    if not seeds and p_sprout > 0:
        raise NoSproutsError(f"no vertical sprouts among {int(ok.sum())} eligible SVC nodes")
    return seeds


# ---------------------------------------------------------------------------
# assembly


@dataclass
class RetinaResult:
    forest: VesselForest
    svc: PlexusResult
    dvc: PlexusResult
    faz: FazRegion
    surfaces: LayerSurfaces
    depth: float


def _growth_keep_out(faz: FazRegion, margin: float):
    def keep_out(starts, ends, radii):
        return faz.segment_hits(starts, ends, radii, margin)
    return keep_out


def _forest_keep_out(faz: FazRegion, margin: float):
    def keep_out(forest):
        return faz.intrusions(forest, margin)
    return keep_out


def _drop_subtrees(forest: VesselForest, bad: np.ndarray) -> VesselForest:
    keep = np.ones(len(forest), dtype=bool)
    par = forest.parents
    for n in forest.preorder():
        if bad[n] or (par[n] >= 0 and not keep[par[n]]):
            keep[n] = False
    return forest.subset(keep)


def simulate_retina(spec: RetinaSpec) -> RetinaResult:
    """Grow, merge, deform and remodel both complexes of one retina."""
    surfaces = spec.resolved_surfaces()
    svc_cfg, dvc_cfg = spec.svc_config, spec.dvc_config
    if surfaces.min_separation < svc_cfg.omega[2]:
        raise GeometryError("layer surfaces leave no room for the SVC slab above the INL")
    faz = faz_region(spec)
    grow_out = _growth_keep_out(faz, FAZ_MARGIN_UM)
    tree_out = _forest_keep_out(faz, FAZ_MARGIN_UM)

    grid = FieldGrid.for_config(svc_cfg)
    seeds = radial_stump_seeds(spec, stream(spec.seed, _STREAM_STUMPS))
    svc = run_plexus(svc_cfg, seeds, faz_secretion_mask(spec, grid, faz), stream(spec.seed, _STREAM_SVC),
                     plexus=SVC, keep_out=grow_out, remodel_keep_out=tree_out)

    sprouts = vertical_sprout_seeds(svc.forest, dvc_cfg, stream(spec.seed, _STREAM_SPROUTS),
                                    p_sprout=spec.p_sprout, svc_cfg=svc_cfg)
    dgrid = FieldGrid.for_config(dvc_cfg)
    dvc = run_plexus(dvc_cfg, sprouts, faz_secretion_mask(spec, dgrid, faz), stream(spec.seed, _STREAM_DVC),
                     plexus=DVC, keep_out=grow_out, remodel_keep_out=tree_out)

    # each DVC root starts exactly below its anchor; match them by position
    by_start = {tuple(np.round(s.start, 9)): s.anchor for s in sprouts}
    anchors = {}
    for root in dvc.forest.roots:
        key = tuple(np.round(dvc.forest.positions[root], 9))
        anchors[int(root)] = by_start[key]

    top = deform_to_layers(svc.forest, surfaces.gcl_height, surfaces.spacing)
    deep = deform_to_layers(dvc.forest, surfaces.inl_height, surfaces.spacing)
    depth = float(surfaces.inl_height.max() + dvc_cfg.omega[2] + SLAB_GAP_UM)
    ox, oy = spec.extent
    domain = np.array([[0.0, 0.0, 0.0], [ox, oy, depth]])
    merged = merge_forests(top, deep, anchors, domain)

    gammas = {"svc": svc_cfg.gamma, "dvc": dvc_cfg.gamma}
    forest = remodel_forest(merged, gammas, keep_out=tree_out)
    # radii grow during remodeling; trim anything that now touches the FAZ
    for _ in range(8):
        bad = faz.intrusions(forest)
        if not bad.any():
            break
        logger.info("FAZ: trimming %d intruding subtrees", int(bad.sum()))
        forest = remodel_forest(_drop_subtrees(forest, bad), gammas, keep_out=tree_out)
    else:
        raise GeometryError("could not clear the FAZ after remodeling")

    forest.meta.update({
        "seed": int(spec.seed),
        "svc_perfused_fraction": svc.perfused_fraction,
        "dvc_perfused_fraction": dvc.perfused_fraction,
        "faz": {"center": list(faz.center), "semi_axes": list(faz.semi_axes), "angle": faz.angle},
        "gamma": gammas,
    })
    return RetinaResult(forest, svc, dvc, faz, surfaces, depth)


def build_retina(spec: RetinaSpec) -> VesselForest:
    return simulate_retina(spec).forest
