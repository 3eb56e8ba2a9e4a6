"""OCTA acquisition artifacts applied to RasterPairs.

Intensity artifacts (flow projection, whiteout, floaters, capillary
background) never touch the label. Geometric ones (shear, stretch, buckle)
move image and label through the same integer index map, so the two stay
co-registered pixel for pixel.

Parameters are given per kind. A scalar fixes a value; a two-element list
is a range sampled uniformly from the step's random stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage

from .angiogenesis import GeometryError
from .raster import RasterPair
from .vessel_graph import VesselForest
from . import _kernels

KINDS = (
    "flow_projection",
    "motion_shear",
    "motion_stretch",
    "motion_buckle",
    "motion_whiteout",
    "floater",
    "capillary_bg",
)
GEOMETRIC = ("motion_shear", "motion_stretch", "motion_buckle")
VOLUME_ONLY = ("flow_projection",)
MAX_DISPLACEMENT = 0.05  # of the image extent along the displaced axis


@dataclass(frozen=True)
class _Param:
    default: object
    lo: float
    hi: float
    integer: bool = False


# hard bounds per parameter; defaults may be ranges inside them
_PARAMS: dict[str, dict[str, _Param]] = {
    "flow_projection": {
        "r_threshold": _Param(10.0, 0.0, math.inf),
        "gain": _Param([0.2, 0.5], 0.0, 1.0),
        "falloff": _Param(200.0, 1e-6, math.inf),
    },
    "motion_shear": {
        "shift": _Param([-8, 8], -64, 64, integer=True),
        "axis": _Param([0, 1], 0, 1, integer=True),
        "position": _Param([0.15, 0.85], 0.0, 1.0),
    },
    "motion_stretch": {
        "amplitude": _Param([0.01, MAX_DISPLACEMENT], 0.0, MAX_DISPLACEMENT),
        "axis": _Param([0, 1], 0, 1, integer=True),
        "position": _Param([0.15, 0.85], 0.0, 1.0),
    },
    "motion_buckle": {
        "amplitude": _Param([0.01, MAX_DISPLACEMENT], 0.0, MAX_DISPLACEMENT),
        "axis": _Param([0, 1], 0, 1, integer=True),
        "position": _Param([0.15, 0.85], 0.0, 1.0),
    },
    "motion_whiteout": {
        "width": _Param([1, 3], 1, 64, integer=True),
        "low": _Param(0.2, 0.0, 1.0),
        "high": _Param(0.9, 0.0, 1.0),
        "axis": _Param([0, 1], 0, 1, integer=True),
        "position": _Param([0.05, 0.95], 0.0, 1.0),
    },
    "floater": {
        "n_segments": _Param([3, 8], 1, 64, integer=True),
        "thickness": _Param([2.0, 15.0], 0.0, 256.0),
        "length": _Param([10.0, 60.0], 0.0, 4096.0),
        "attenuation": _Param([0.1, 0.6], 0.0, 1.0),
        "edge_sigma": _Param(2.0, 0.0, 64.0),
    },
    "capillary_bg": {
        "p": _Param([0.1, 0.3], 0.0, 1.0),
        "sigma": _Param([0.6, 1.2], 1e-6, 64.0),
        "amplitude": _Param([0.3, 0.7], 0.0, 1.0),
    },
}


def _check_value(kind: str, name: str, value):
    spec = _PARAMS[kind][name]
    vals = list(value) if isinstance(value, (list, tuple)) else [value]
    if len(vals) not in (1, 2):
        raise ValueError(f"{kind}.{name}: expected a number or a [lo, hi] range")
    for v in vals:
        if isinstance(v, bool) or not isinstance(v, (int, float, np.integer, np.floating)):
            raise ValueError(f"{kind}.{name}: {v!r} is not a number")
        if not spec.lo <= v <= spec.hi:
            raise ValueError(f"{kind}.{name}: {v} outside [{spec.lo}, {spec.hi}]")
        if spec.integer and int(v) != v:
            raise ValueError(f"{kind}.{name}: {v} is not an integer")
    if len(vals) == 2 and vals[0] > vals[1]:
        raise ValueError(f"{kind}.{name}: range {vals} is reversed")


@dataclass(frozen=True)
class ArtifactSpec:
    """One augmentation: its kind, parameter overrides and a seed."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _PARAMS:
            raise ValueError(f"unknown artifact kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        for name, value in self.params.items():
            if name not in _PARAMS[self.kind]:
                raise ValueError(f"{self.kind}: unknown parameter {name!r}")
            _check_value(self.kind, name, value)
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        p = self.resolved()
        if self.kind == "motion_whiteout":
            lo = min(np.ravel(p["low"]))
            hi = max(np.ravel(p["high"]))
            if lo > hi:
                raise ValueError("motion_whiteout: low exceeds high")

    def resolved(self) -> dict:
        """Parameters with defaults filled in (ranges left unsampled)."""
        out = {k: v.default for k, v in _PARAMS[self.kind].items()}
        out.update(self.params)
        return out

    def sample(self, rng: np.random.Generator) -> dict:
        """Draw concrete values, in a fixed parameter order."""
        out = {}
        for name, value in self.resolved().items():
            spec = _PARAMS[self.kind][name]
            if isinstance(value, (list, tuple)):
                lo, hi = value
                if spec.integer:
                    out[name] = int(rng.integers(int(lo), int(hi) + 1))
                else:
                    out[name] = float(rng.uniform(lo, hi))
            else:
                out[name] = int(value) if spec.integer else float(value)
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": int(self.seed)}


@dataclass
class AugmentationPipeline:
    """Ordered artifact steps, each applied with its own probability."""

    steps: list = field(default_factory=list)
    probabilities: list = field(default_factory=list)
    master_seed: int = 0

    def __post_init__(self):
        if len(self.steps) != len(self.probabilities):
            raise ValueError("one probability per step is required")
        for p in self.probabilities:
            if not 0.0 <= float(p) <= 1.0:
                raise ValueError(f"step probability {p} outside [0, 1]")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")

    def __len__(self) -> int:
        return len(self.steps)

    def step_rng(self, index: int, sample_seed: int = 0) -> np.random.Generator:
        return np.random.default_rng([int(self.master_seed), int(sample_seed), index, int(self.steps[index].seed)])

    def to_dict(self) -> dict:
        return {
            "master_seed": int(self.master_seed),
            "steps": [dict(s.to_dict(), probability=float(p)) for s, p in zip(self.steps, self.probabilities)],
        }

    @classmethod
    def from_dict(cls, doc) -> "AugmentationPipeline":
        steps, probs = [], []
        for i, raw in enumerate(doc.get("steps", [])):
            extra = set(raw) - {"kind", "params", "seed", "probability"}
            if extra:
                raise ValueError(f"augment.steps[{i}]: unknown key {sorted(extra)[0]!r}")
            if "kind" not in raw:
                raise ValueError(f"augment.steps[{i}]: missing 'kind'")
            steps.append(ArtifactSpec(raw["kind"], dict(raw.get("params") or {}), int(raw.get("seed", 0))))
            probs.append(float(raw.get("probability", 1.0)))
        return cls(steps, probs, int(doc.get("master_seed", 0)))


def default_pipeline(master_seed: int = 0) -> AugmentationPipeline:
    kinds = KINDS
    probs = [0.8, 0.2, 0.15, 0.15, 0.2, 0.3, 0.9]
    return AugmentationPipeline([ArtifactSpec(k) for k in kinds], probs, master_seed)


# ---------------------------------------------------------------------------
# flow projection


@njit(cache=True)
def _cast_tails(image, source, decay, gain):
    nx, ny, nz = image.shape
    for i in range(nx):
        for j in range(ny):
            t = 0.0
            for k in range(nz):
                if source[i, j, k]:
                    t = 1.0
                    continue
                t *= decay
                if t > 0.0:
                    v = image[i, j, k] + gain * t
                    image[i, j, k] = 1.0 if v > 1.0 else v


def flow_projection(pair: RasterPair, forest: VesselForest, r_threshold: float = 10.0,
                    gain: float = 0.35, falloff: float = 200.0) -> RasterPair:
    """Brighten the beam-axis shadow below every vessel thicker than r_threshold.

    Below each such vessel the added intensity is gain * exp(-dz / falloff),
    dz measured from the vessel's lowest voxel in that column.
    """
    if pair.ndim != 3:
        raise GeometryError("flow projection is depth dependent: apply it to the 3D volume before projecting")
    if gain < 0 or falloff <= 0:
        raise ValueError("gain must be >= 0 and falloff > 0")
    out = pair.copy()
    a, b, r, _ = forest.segments()
    big = r > r_threshold
    if gain == 0 or not big.any():
        return out
    source = np.zeros(pair.shape, dtype=np.uint8)
    scratch = np.zeros(pair.shape)
    _kernels.rasterize_capsules(scratch, source, np.asarray(pair.origin), np.asarray(pair.spacing),
                                np.ascontiguousarray(a[big]), np.ascontiguousarray(b[big]),
                                np.ascontiguousarray(r[big]), max(pair.spacing))
    _cast_tails(out.image, source, math.exp(-pair.spacing[2] / falloff), float(gain))
    return out


# ---------------------------------------------------------------------------
# eye motion


def _cut(pair: RasterPair, axis: int, position: float) -> int:
    n = pair.shape[axis]
    return int(min(max(round(position * n), 0), n - 1))


def _remap(pair: RasterPair, axis: int, src: np.ndarray) -> RasterPair:
    """out[..., u, ...] = in[..., src[u], ...] along ``axis``; src < 0 or >= n gives 0."""
    n = pair.shape[axis]
    valid = (src >= 0) & (src < n)
    idx = np.clip(src, 0, n - 1)
    img = np.take(pair.image, idx, axis=axis)
    lab = np.take(pair.label, idx, axis=axis)
    shape = [1] * pair.ndim
    shape[axis] = n
    mask = valid.reshape(shape)
    return RasterPair(np.where(mask, img, 0.0), np.where(mask, lab, 0).astype(np.uint8), pair.spacing, pair.origin)


def motion_shear(pair: RasterPair, shift: int, axis: int, position: float) -> RasterPair:
    """Shift everything past the cut by ``shift`` pixels along the cut line.

    The cut is a line at ``position`` along lateral ``axis``; pixels moved in
    from outside the field of view are zero.
    """
    c = _cut(pair, axis, position)
    other = 1 - axis
    if shift == 0:
        return pair.copy()
    img = pair.image.copy()
    lab = pair.label.copy()
    side = [slice(None)] * pair.ndim
    side[axis] = slice(c, None)
    side = tuple(side)
    moved_img = np.zeros_like(img[side])
    moved_lab = np.zeros_like(lab[side])
    n = pair.shape[other]
    k = int(shift)
    dst = [slice(None)] * pair.ndim
    src = [slice(None)] * pair.ndim
    if abs(k) < n:
        dst[other] = slice(max(k, 0), n + min(k, 0))
        src[other] = slice(max(-k, 0), n - max(k, 0))
        moved_img[tuple(dst)] = img[side][tuple(src)]
        moved_lab[tuple(dst)] = lab[side][tuple(src)]
    img[side] = moved_img
    lab[side] = moved_lab
    return RasterPair(img, lab, pair.spacing, pair.origin)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def displacement_map(n: int, cut: int, amplitude_px: float, width_px: float, buckle: bool) -> np.ndarray:
    """Integer source index for each output index along the displaced axis.

    Past the cut the sampling point falls back by a smooth ramp up to
    ``amplitude_px``. A wide ramp stretches the content outward. A ramp
    narrower than the amplitude folds back across the cut, so content
    near the cut appears twice (buckling).
    """
    u = np.arange(n, dtype=float)
    d = np.where(u >= cut, amplitude_px * _smoothstep((u - cut) / max(width_px, 1e-9)), 0.0)
    return np.rint(u - d).astype(np.int64)


def motion_stretch(pair: RasterPair, amplitude: float, axis: int, position: float, *, buckle: bool = False) -> RasterPair:
    n = pair.shape[axis]
    amp = min(amplitude, MAX_DISPLACEMENT) * n
    if amp < 0.5:
        return pair.copy()
    # slope 1.5 A / w: stretch keeps it at 0.5, buckle at 3 (folds)
    width = amp / 2.0 if buckle else 3.0 * amp
    return _remap(pair, axis, displacement_map(n, _cut(pair, axis, position), amp, width, buckle))


def motion_whiteout(pair: RasterPair, rng: np.random.Generator, width: int, axis: int, position: float,
                    low: float = 0.2, high: float = 0.9) -> RasterPair:
    """Replace a band of B-scans at the cut by uniform noise; label untouched."""
    c = _cut(pair, axis, position)
    band = [slice(None)] * pair.ndim
    band[axis] = slice(c, min(c + int(width), pair.shape[axis]))
    band = tuple(band)
    out = pair.copy()
    out.image[band] = rng.uniform(low, high, size=out.image[band].shape)
    return out


def eye_motion(pair: RasterPair, kind: str, rng: np.random.Generator, params: dict | None = None) -> RasterPair:
    """One of shear / stretch / buckle / whiteout with parameters drawn from rng."""
    name = kind if kind.startswith("motion_") else "motion_" + kind
    if name not in ("motion_shear", "motion_stretch", "motion_buckle", "motion_whiteout"):
        raise ValueError(f"unknown eye-motion kind {kind!r}")
    return _apply_step(pair, None, ArtifactSpec(name, dict(params or {})), rng)


# ---------------------------------------------------------------------------
# vitreous floaters


def floater_footprint(shape2d, rng: np.random.Generator, n_segments: int, thickness, length) -> np.ndarray:
    """Binary mask of a thick random polyline. thickness/length are (lo, hi)."""
    nx, ny = shape2d
    p = np.array([rng.uniform(0, nx), rng.uniform(0, ny)])
    gx, gy = np.meshgrid(np.arange(nx) + 0.5, np.arange(ny) + 0.5, indexing="ij")
    mask = np.zeros((nx, ny), dtype=bool)
    # the start pixel is always covered, so the footprint is never empty
    mask[min(int(p[0]), nx - 1), min(int(p[1]), ny - 1)] = True
    for _ in range(n_segments):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        q = p + rng.uniform(*length) * np.array([np.cos(theta), np.sin(theta)])
        half = 0.5 * rng.uniform(*thickness)
        lo = np.floor(np.minimum(p, q) - half - 1).astype(int)
        hi = np.ceil(np.maximum(p, q) + half + 1).astype(int)
        i0, j0 = max(lo[0], 0), max(lo[1], 0)
        i1, j1 = min(hi[0], nx), min(hi[1], ny)
        if i0 < i1 and j0 < j1:
            px, py = gx[i0:i1, j0:j1], gy[i0:i1, j0:j1]
            d = q - p
            ll = float(d @ d)
            t = np.zeros_like(px) if ll == 0 else np.clip(((px - p[0]) * d[0] + (py - p[1]) * d[1]) / ll, 0, 1)
            dist = np.hypot(p[0] + t * d[0] - px, p[1] + t * d[1] - py)
            mask[i0:i1, j0:j1] |= dist <= half
        p = q
    return mask


def vitreous_floater(pair: RasterPair, rng: np.random.Generator, n_segments: int = 5,
                     thickness=(2.0, 15.0), length=(10.0, 60.0), attenuation: float = 0.35,
                     edge_sigma: float = 2.0) -> RasterPair:
    """Darken the beam-axis shadow of a thread-like floater.

    Inside the (blurred) footprint the image is scaled towards
    ``attenuation``; every depth of a volume gets the same factor.
    """
    mask = floater_footprint(pair.shape[:2], rng, n_segments, thickness, length).astype(float)
    if edge_sigma > 0:
        mask = ndimage.gaussian_filter(mask, edge_sigma, mode="constant")
    factor = 1.0 - (1.0 - attenuation) * np.clip(mask, 0.0, 1.0)
    if pair.ndim == 3:
        factor = factor[:, :, None]
    out = pair.copy()
    out.image *= factor
    return out


# ---------------------------------------------------------------------------
# capillary background


def capillary_background(pair: RasterPair, rng: np.random.Generator, p: float, sigma: float,
                         amplitude: float) -> RasterPair:
    """Blurred Bernoulli noise added away from labelled vessels."""
    if not 0.0 <= p <= 1.0 or amplitude < 0 or sigma <= 0:
        raise ValueError("need 0 <= p <= 1, amplitude >= 0, sigma > 0")
    out = pair.copy()
    if p == 0 or amplitude == 0:
        return out
    hits = (rng.random(pair.shape) < p).astype(float)
    noise = ndimage.gaussian_filter(hits, sigma, mode="reflect") * amplitude
    near = ndimage.binary_dilation(pair.label.astype(bool), iterations=1)
    out.image = np.clip(out.image + noise * (~near), 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# pipeline


def _apply_step(pair: RasterPair, forest: VesselForest | None, spec: ArtifactSpec,
                rng: np.random.Generator) -> RasterPair:
    v = spec.sample(rng)
    kind = spec.kind
    if kind == "flow_projection":
        if forest is None:
            raise ValueError("flow projection needs the vessel forest")
        return flow_projection(pair, forest, v["r_threshold"], v["gain"], v["falloff"])
    if kind == "motion_shear":
        return motion_shear(pair, v["shift"], v["axis"], v["position"])
    if kind in ("motion_stretch", "motion_buckle"):
        return motion_stretch(pair, v["amplitude"], v["axis"], v["position"], buckle=kind == "motion_buckle")
    if kind == "motion_whiteout":
        lo, hi = min(v["low"], v["high"]), max(v["low"], v["high"])
        return motion_whiteout(pair, rng, v["width"], v["axis"], v["position"], lo, hi)
    if kind == "floater":
        p = spec.resolved()
        return vitreous_floater(pair, rng, v["n_segments"], _as_range(p["thickness"]), _as_range(p["length"]),
                                v["attenuation"], v["edge_sigma"])
    if kind == "capillary_bg":
        return capillary_background(pair, rng, v["p"], v["sigma"], v["amplitude"])
    raise ValueError(f"unknown artifact kind {kind!r}")


def _as_range(value) -> tuple[float, float]:
    if isinstance(value, (list, tuple)):
        return float(value[0]), float(value[1])
    return float(value), float(value)


def apply_artifact(pair: RasterPair, spec: ArtifactSpec, forest: VesselForest | None = None,
                   rng: np.random.Generator | None = None) -> RasterPair:
    """Apply one artifact unconditionally; the stream defaults to the ArtifactSpec seed."""
    return _apply_step(pair, forest, spec, np.random.default_rng(spec.seed) if rng is None else rng)


def apply_pipeline(pair: RasterPair, forest: VesselForest | None, pipeline: AugmentationPipeline,
                   sample_seed: int = 0, kinds=None) -> RasterPair:
    """Run the steps in order, each gated by its probability.

    Every step draws from its own stream keyed by (master seed, sample seed,
    step index, step seed), so skipping or filtering steps (``kinds``) never
    shifts another step's randomness.
    """
    out = pair.copy()
    for i, (spec, prob) in enumerate(zip(pipeline.steps, pipeline.probabilities)):
        if kinds is not None and spec.kind not in kinds:
            continue
        rng = pipeline.step_rng(i, sample_seed)
        if rng.random() >= prob:
            continue
        out = _apply_step(out, forest, spec, rng)
    return out
