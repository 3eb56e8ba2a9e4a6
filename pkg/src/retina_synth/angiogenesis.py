"""Oxygen/VEGF fields and the iterative multi-scale vessel growth loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import _kernels
from .vessel_graph import (
    SVC,
    PlexusConfig,
    VesselForest,
    optimal_branch_angles,
    prune_forest,
    remodel_forest,
)

logger = logging.getLogger(__name__)

SPROUT, ELONGATE, BIFURCATE = 0, 1, 2
ACTIONS = ("sprout", "elongate", "bifurcate")
PERFUSED_LEVEL = 0.5
CUTOFF_FACTOR = 4.0
SAMPLE_RADIUS_CELLS = 4
REACH_PER_DIFFUSION_LENGTH = 2.0


class GeometryError(ValueError):
    """Grids or forests that do not line up."""


class NonConvergenceError(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class FieldGrid:
    extent: tuple[float, float, float]
    spacing: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(math.ceil(e / self.spacing - 1e-9)) for e in self.extent)

    @classmethod
    def for_config(cls, config: PlexusConfig) -> "FieldGrid":
        return cls(tuple(config.omega), config.grid_spacing)

    def cell_centers(self) -> np.ndarray:
        axes = [self.origin[a] + (np.arange(n) + 0.5) * self.spacing for a, n in enumerate(self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def covers(self, forest: VesselForest) -> bool:
        lo = np.asarray(self.origin)
        hi = lo + np.asarray(self.extent)
        return bool(np.all(forest.domain[0] >= lo - 1e-6) and np.all(forest.domain[1] <= hi + 1e-6))


@dataclass
class ScalarField3D:
    grid: FieldGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise GeometryError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")

    @property
    def extent(self):
        return self.grid.extent

    @property
    def spacing(self) -> float:
        return self.grid.spacing

    @classmethod
    def filled(cls, grid: FieldGrid, value: float = 0.0) -> "ScalarField3D":
        return cls(grid, np.full(grid.shape, float(value)))


def _check_forest_in_grid(forest: VesselForest, grid: FieldGrid) -> None:
    if not grid.covers(forest):
        raise GeometryError("forest domain exceeds the field grid")


class OxygenAccumulator:
    """Oxygen sum, updated segment by segment.

    The kernel is additive and non-negative, so adding segments can only
    raise the field. Accumulation stops in cells that reached 1, so
    ``total`` is exact only below 1; ``field`` clamps it.
    """

    def __init__(self, grid: FieldGrid, r_initial: float, l_o2: float):
        self.grid = grid
        self.r_initial = float(r_initial)
        self.l_o2 = float(l_o2)
        self.cutoff = CUTOFF_FACTOR * self.l_o2
        self.total = np.zeros(grid.shape)
        self._table = _kernels.exp_table(CUTOFF_FACTOR)
        self._origin = np.asarray(grid.origin, dtype=float)

    def add(self, starts, ends, radii) -> None:
        if len(radii) == 0:
            return
        radii = np.asarray(radii, dtype=float)
        # strongest first, so that cells saturate early and are skipped
        order = np.argsort(-radii, kind="stable")
        _kernels.accumulate_oxygen(
            self.total,
            self._origin,
            float(self.grid.spacing),
            np.ascontiguousarray(np.asarray(starts, dtype=float)[order]),
            np.ascontiguousarray(np.asarray(ends, dtype=float)[order]),
            radii[order] / self.r_initial,
            np.ascontiguousarray(radii[order]),
            self.l_o2,
            self.cutoff,
            self._table,
        )

    def add_forest(self, forest: VesselForest, node_ids=None) -> None:
        a, b, r, ids = forest.segments()
        if node_ids is not None:
            sel = np.isin(ids, node_ids)
            a, b, r = a[sel], b[sel], r[sel]
        self.add(a, b, r)

    def field(self) -> ScalarField3D:
        return ScalarField3D(self.grid, np.minimum(self.total, 1.0))


def compute_oxygen_field(forest: VesselForest, grid: FieldGrid, config: PlexusConfig,
                         l_o2: float | None = None) -> ScalarField3D:
    """Oxygen = clamp(sum of r/r_initial * exp(-d/l_o2), 0, 1), 1 inside lumens."""
    _check_forest_in_grid(forest, grid)
    acc = OxygenAccumulator(grid, config.r_initial, config.l_o2 if l_o2 is None else l_o2)
    acc.add_forest(forest)
    return acc.field()


# unit-sigma Gaussian truncated at 3 cells, same taps scipy would use
_VEGF_TAPS = np.exp(-0.5 * np.arange(-3.0, 4.0) ** 2)
_VEGF_TAPS /= _VEGF_TAPS.sum()


def compute_vegf_field(oxygen: ScalarField3D, secretion_mask: ScalarField3D) -> ScalarField3D:
    """VEGF secreted by under-perfused tissue, smoothed by one cell.

    The mask is re-applied after smoothing so masked cells stay exactly 0.
    """
    if oxygen.values.shape != secretion_mask.values.shape or oxygen.spacing != secretion_mask.spacing:
        raise GeometryError("oxygen and secretion mask grids differ")
    mask = np.ascontiguousarray(secretion_mask.values, dtype=np.float64)
    raw = _kernels.secretion(np.ascontiguousarray(oxygen.values, dtype=np.float64), mask)
    out = _kernels.blur3(raw, _VEGF_TAPS)
    _kernels.mask_clip(out, mask)
    return ScalarField3D(oxygen.grid, out)


def field_gradient(f: ScalarField3D) -> np.ndarray:
    """Central-difference gradient over the whole grid, shape (*grid, 3)."""
    return np.stack(np.gradient(f.values, f.spacing), axis=-1)


def gradient_at(f: ScalarField3D, points) -> np.ndarray:
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    return _kernels.gradient_at(f.values, np.asarray(f.grid.origin, float), float(f.spacing), pts)


def _sphere_offsets(radius_cells: int) -> np.ndarray:
    r = int(radius_cells)
    g = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1].reshape(3, -1).T
    return np.ascontiguousarray(g[(g**2).sum(axis=1) <= r * r], dtype=np.int64)


_OFFSETS = _sphere_offsets(SAMPLE_RADIUS_CELLS)


def local_peak(f: ScalarField3D, points, radius_cells: int = SAMPLE_RADIUS_CELLS) -> np.ndarray:
    """Largest field value near each point.

    A peak rather than a mean: the sphere around a node is partly filled by
    its own lumen, where VEGF is zero. Radii beyond the default use a cube
    (a separable max filter) since per-point spheres get expensive.
    """
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    if len(pts) == 0:
        return np.zeros(0)
    origin = np.asarray(f.grid.origin, float)
    if radius_cells <= SAMPLE_RADIUS_CELLS:
        offsets = _OFFSETS if radius_cells == SAMPLE_RADIUS_CELLS else _sphere_offsets(radius_cells)
        return _kernels.sphere_max(f.values, origin, float(f.spacing), pts, offsets)
    size = 2 * int(radius_cells) + 1
    idx = np.floor((pts - origin) / f.spacing).astype(np.int64)
    idx = np.clip(idx, 0, np.array(f.values.shape) - 1)
    if radius_cells >= f.values.shape[2] - 1:
        # the cube spans the whole slab depth: reduce over z first
        # slice-wise maximum: much faster than a reduce over the short last axis
        flat = f.values[:, :, 0].copy()
        for k in range(1, f.values.shape[2]):
            np.maximum(flat, f.values[:, :, k], out=flat)
        peak = ndimage.maximum_filter(flat, size=size, mode="constant", cval=0.0)
        return peak[idx[:, 0], idx[:, 1]]
    peak = ndimage.maximum_filter(f.values, size=size, mode="constant", cval=0.0)
    return peak[idx[:, 0], idx[:, 1], idx[:, 2]]


def perfused_fraction(oxygen: ScalarField3D, secretion_mask: ScalarField3D) -> float:
    tissue = secretion_mask.values > 0
    n = int(tissue.sum())
    if n == 0:
        return 1.0
    return float(np.count_nonzero((oxygen.values >= PERFUSED_LEVEL) & tissue)) / n


# ---------------------------------------------------------------------------
# growth sites


@dataclass(frozen=True)
class GrowthSite:
    node: int
    action: str
    direction: tuple[float, float, float]
    score: float

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        if abs(math.sqrt(sum(c * c for c in self.direction)) - 1.0) > 1e-9:
            raise ValueError("direction must be a unit vector")


@dataclass
class _SiteBatch:
    node: np.ndarray
    action: np.ndarray
    direction: np.ndarray
    score: np.ndarray

    def __len__(self):
        return len(self.node)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def from_sites(cls, sites: Sequence[GrowthSite]):
        if not sites:
            return cls.empty()
        return cls(
            np.array([s.node for s in sites], dtype=np.int64),
            np.array([ACTIONS.index(s.action) for s in sites], dtype=np.int64),
            np.array([s.direction for s in sites], dtype=float),
            np.array([s.score for s in sites], dtype=float),
        )

    def to_sites(self) -> list[GrowthSite]:
        return [
            GrowthSite(int(n), ACTIONS[a], tuple(float(v) for v in d), float(s))
            for n, a, d, s in zip(self.node, self.action, self.direction, self.score)
        ]


def _unit(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 1e-12), n[..., 0]


def _jitter(dirs: np.ndarray, sigma_rad: float, rng: np.random.Generator) -> np.ndarray:
    """Tilt each unit vector by a half-normal angle about a random perpendicular axis."""
    n = len(dirs)
    angle = np.abs(rng.normal(0.0, 1.0, n)) * sigma_rad
    phi = rng.uniform(0.0, 2 * np.pi, n)
    if n == 0 or sigma_rad == 0:
        return dirs.copy()
    a = np.cross(dirs, np.eye(3)[np.argmin(np.abs(dirs), axis=1)])
    a, _ = _unit(a)
    b = np.cross(dirs, a)
    perp = np.cos(phi)[:, None] * a + np.sin(phi)[:, None] * b
    return _unit(np.cos(angle)[:, None] * dirs + np.sin(angle)[:, None] * perp)[0]


def _branch_side(axis: np.ndarray, grad: np.ndarray, lam: float, rng) -> np.ndarray:
    """Unit vectors perpendicular to ``axis`` leaning toward the VEGF gradient.

    The random component lies in the lateral plane so branches stay in the slab.
    """
    n = len(axis)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    lateral, ln = _unit(np.cross(np.array([0.0, 0.0, 1.0]), axis))
    fallback = np.cross(axis, np.eye(3)[np.argmin(np.abs(axis), axis=1)]) if n else lateral
    lateral = np.where((ln > 0.1)[:, None], lateral, _unit(fallback)[0])
    g_perp = grad - (grad * axis).sum(axis=1, keepdims=True) * axis
    g_perp, _ = _unit(g_perp)
    side = lam * g_perp + (1.0 - lam) * sign[:, None] * lateral
    side = side - (side * axis).sum(axis=1, keepdims=True) * axis
    side, sn = _unit(side)
    return np.where((sn > 1e-9)[:, None], side, sign[:, None] * lateral)


def _branch_angle(r_parent: float, r_keep: float, r_new: float, gamma: float) -> float:
    if gamma <= 2:
        return math.pi / 4
    r_p = max(r_parent, r_keep, r_new)
    return optimal_branch_angles(r_p, r_keep, r_new, gamma)[1]


def _candidate_batch(forest: VesselForest, vegf: ScalarField3D, config: PlexusConfig,
                     rng: np.random.Generator, jitter: bool = True,
                     reach: int = SAMPLE_RADIUS_CELLS, run_scale: float = 1.0) -> _SiteBatch:
    n = len(forest)
    if n == 0:
        return _SiteBatch.empty()
    par = forest.parents
    ch = forest.children
    nk = (ch >= 0).sum(axis=1)
    pos = forest.positions
    eligible = np.nonzero((par >= 0) & (nk < 2))[0]
    if len(eligible) == 0:
        return _SiteBatch.empty()
    score = local_peak(vegf, pos[eligible], reach)
    hot = score > config.theta_c - 1.0
    eligible, score = eligible[hot], score[hot]
    if len(eligible) == 0:
        return _SiteBatch.empty()
    run = _kernels.run_lengths(forest.preorder(), par, nk)
    lam = config.lambda_g
    sigma = math.radians(config.jitter_deg) if jitter else 0.0

    leaves = eligible[nk[eligible] == 0]
    leaf_score = score[nk[eligible] == 0]
    interior = eligible[nk[eligible] == 1]
    int_score = score[nk[eligible] == 1]

    # elongation: gradient-following blended with a persistent, jittered heading
    momentum, _ = _unit(pos[leaves] - pos[par[leaves]])
    momentum = _jitter(momentum, sigma, rng)
    grad, _ = _unit(gradient_at(vegf, pos[leaves]))
    d, dn = _unit(lam * grad + (1.0 - lam) * momentum)
    d = np.where((dn > 1e-9)[:, None], d, momentum)
    nodes = [leaves]
    actions = [np.full(len(leaves), ELONGATE)]
    dirs = [d]
    scores = [leaf_score]

    # forced bifurcation: a leaf that ran m_b segments branches at its parent
    due = run[leaves] * run_scale >= config.m_b
    forced = leaves[due]
    forced_score = leaf_score[due]
    bp = par[forced]
    ok = (bp >= 0) & (nk[bp] == 1)
    ok &= par[np.maximum(bp, 0)] >= 0
    bp, forced_score = bp[ok], forced_score[ok]

    sp_ok = (nk[par[interior]] == 1) & (nk[np.maximum(ch[interior, 0], 0)] <= 1)
    sp_ok &= ~np.isin(interior, bp)
    sprouts, sprout_score = interior[sp_ok], int_score[sp_ok]

    r_child = lambda r: np.maximum(config.r_min, r / 2.0 ** (1.0 / config.gamma))
    for group, action, sc in ((bp, BIFURCATE, forced_score), (sprouts, SPROUT, sprout_score)):
        if len(group) == 0:
            continue
        keep = ch[group, 0]
        axis, _ = _unit(pos[keep] - pos[group])
        grad, _ = _unit(gradient_at(vegf, pos[group]))
        side = _branch_side(axis, grad, lam, rng)
        r_par = forest.radii[group]
        r_new = r_child(r_par)
        theta = np.array([
            _branch_angle(rp, rk, rn, config.gamma)
            for rp, rk, rn in zip(r_par, forest.radii[keep], r_new)
        ])
        bd = np.cos(theta)[:, None] * axis + np.sin(theta)[:, None] * side
        nodes.append(group)
        actions.append(np.full(len(group), action))
        dirs.append(_unit(bd)[0])
        scores.append(sc)

    node = np.concatenate(nodes)
    order = np.argsort(node, kind="stable")
    return _SiteBatch(
        node[order],
        np.concatenate(actions)[order],
        np.concatenate(dirs)[order],
        np.concatenate(scores)[order],
    )


def candidate_growth_sites(forest: VesselForest, vegf: ScalarField3D, config: PlexusConfig,
                           rng: np.random.Generator, jitter: bool = True) -> list[GrowthSite]:
    """Nodes whose neighbourhood VEGF exceeds theta_c - 1, with growth direction.

    Leaves elongate along normalize(lambda_g * grad + (1 - lambda_g) * heading),
    where the heading is the parent segment direction perturbed by a seeded
    angular jitter. A leaf that has run m_b segments without branching forces
    a bifurcation at its parent; other single-child interior nodes are
    sprout candidates. Sites are ordered by node id.
    """
    return _candidate_batch(forest, vegf, config, rng, jitter).to_sites()


def _apply_batch(forest: VesselForest, batch: _SiteBatch, config: PlexusConfig,
                 rng: np.random.Generator, step: float,
                 keep_out: Callable | None = None) -> VesselForest:
    n_sites = len(batch)
    u = rng.random(n_sites)
    if n_sites == 0:
        return forest
    accept = (batch.action != SPROUT) | (u < config.sprout_rate * batch.score)
    idx = np.nonzero(accept)[0]
    if len(idx) == 0:
        return forest
    nodes = batch.node[idx]
    act = batch.action[idx]
    d = batch.direction[idx].copy()
    start = forest.positions[nodes]
    end = start + step * d
    lo, hi = forest.domain
    # a thin slab: headings that only leave through the top/bottom are flattened
    z_out = (end[:, 2] < lo[2]) | (end[:, 2] > hi[2])
    if z_out.any():
        zi = np.nonzero(z_out)[0]
        flat, fn = _unit(d[zi] * np.array([1.0, 1.0, 0.0]))
        end[zi] = start[zi] + step * flat
        end[zi[fn <= 1e-9]] = np.nan
    inside = np.all((end >= lo - 1e-9) & (end <= hi + 1e-9), axis=1)
    r_par = forest.radii[nodes]
    split = np.maximum(config.r_min, r_par / 2.0 ** (1.0 / config.gamma))
    r_new = np.where(act == ELONGATE, r_par, split)
    if keep_out is not None:
        blocked = np.zeros(len(idx), dtype=bool)
        blocked[inside] = np.asarray(keep_out(start[inside], end[inside], r_new[inside]), dtype=bool)
        inside &= ~blocked
    ch = forest.children
    for k in np.nonzero(inside)[0]:
        node = int(nodes[k])
        n_kids = int((ch[node] >= 0).sum())
        if act[k] == ELONGATE:
            if n_kids != 0:
                continue
            # the leaf may have been thinned by a split earlier in this batch
            radius = float(forest.radii[node])
        else:
            if n_kids != 1:
                continue
            radius = float(r_new[k])
            if act[k] == BIFURCATE:
                # a bifurcation splits the vessel: the existing branch thins too
                _thin_subtree(forest, int(ch[node][ch[node] >= 0][0]), radius)
        forest.add_node(end[k], radius, node, int(forest.plexus[node]))
        ch = forest.children
    return forest


def _thin_subtree(forest: VesselForest, node: int, radius: float) -> None:
    stack = [node]
    r = forest._radius
    ch = forest.children
    while stack:
        n = stack.pop()
        if r[n] <= radius:
            continue
        r[n] = radius
        stack.extend(int(c) for c in ch[n] if c >= 0)


def apply_growth(forest: VesselForest, sites: Sequence[GrowthSite], config: PlexusConfig,
                 rng: np.random.Generator, step: float | None = None,
                 keep_out: Callable | None = None) -> VesselForest:
    """Add one segment per accepted site (in place); returns the forest.

    Elongation and bifurcation sites are always accepted, sprouts with
    probability sprout_rate * score. Elongation keeps the radius; branches
    get r / 2**(1/gamma), floored at r_min, and a bifurcation thins the
    existing branch (and anything below it) to the same radius, while a
    sprout leaves it alone. Segments ending outside the
    domain or rejected by ``keep_out(starts, ends, radii)`` are dropped.
    """
    step = config.step_lengths[-1] if step is None else float(step)
    return _apply_batch(forest, _SiteBatch.from_sites(list(sites)), config, rng, step, keep_out)


# ---------------------------------------------------------------------------
# plexus loop


@dataclass(frozen=True)
class SeedSegment:
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    radius: float
    anchor: int | None = None


@dataclass
class PlexusResult:
    forest: VesselForest
    perfused_fraction: float
    converged: bool
    iterations: list[int] = field(default_factory=list)
    # perfused fraction per iteration, one list per field rebuild
    history: list[list[float]] = field(default_factory=list)
    seed_nodes: list[int] = field(default_factory=list)


def seed_forest(config: PlexusConfig, seeds: Sequence[SeedSegment], plexus: int = SVC):
    forest = VesselForest(np.asarray(config.omega), config.grid_spacing)
    roots = []
    for s in seeds:
        root = forest.add_node(s.start, s.radius, None, plexus)
        forest.add_node(s.end, s.radius, root, plexus)
        roots.append(root)
    if not forest.contains(forest.positions).all():
        raise GeometryError("seed segments must lie inside the simulation domain")
    return forest, roots


def run_plexus(
    config: PlexusConfig,
    seeds: Sequence[SeedSegment],
    secretion_mask: ScalarField3D,
    rng: np.random.Generator,
    *,
    plexus: int = SVC,
    keep_out=None,
    remodel_keep_out=None,
) -> PlexusResult:
    """Grow a forest from seed segments until the tissue is perfused.

    Scales run coarse to fine with step lengths 8, 4, 2, 1 x grid spacing.
    The VEGF sampling radius grows with the step (four cells at the finest
    scale), since a coarse vessel's own oxygen halo would otherwise hide the
    hypoxic tissue it is meant to reach. A scale ends once the perfused fraction of
    secreting tissue reaches theta_p, when growth stalls, or at the
    iteration cap. The final forest is pruned and remodeled.
    """
    forest, roots = seed_forest(config, seeds, plexus)
    seed_nodes = list(range(len(forest)))
    grid = FieldGrid.for_config(config)
    if secretion_mask.values.shape != grid.shape:
        raise GeometryError("secretion mask does not match the plexus grid")
    steps = config.step_lengths
    iterations, history = [], []
    capped = False
    fresh = False  # last frac was read off a rebuilt finest-scale field
    for step in steps:
        ell = config.l_o2 * step / steps[-1]
        reach = max(SAMPLE_RADIUS_CELLS, int(math.ceil(REACH_PER_DIFFUSION_LENGTH * ell / config.grid_spacing)))
        it = 0
        stalls = 0
        done = False
        while not done:
            # one pass: the field is rebuilt, then only ever added to, so
            # thinning by splits shows up at the next rebuild; the finest
            # scale re-checks convergence on a rebuilt field
            acc = OxygenAccumulator(grid, config.r_initial, ell)
            acc.add_forest(forest)
            trace = []
            history.append(trace)
            while True:
                oxy = acc.field()
                frac = perfused_fraction(oxy, secretion_mask)
                trace.append(frac)
                if frac >= config.theta_p:
                    # coarser scales are rebuilt by the next scale anyway
                    done = len(trace) == 1 or step != steps[-1]
                    fresh = len(trace) == 1 and step == steps[-1]
                    break
                if it >= config.max_iterations:
                    capped = done = True
                    break
                vegf = compute_vegf_field(oxy, secretion_mask)
                batch = _candidate_batch(forest, vegf, config, rng, reach=reach, run_scale=step / steps[-1])
                n0 = len(forest)
                _apply_batch(forest, batch, config, rng, step, keep_out)
                it += 1
                if len(forest) == n0:
                    stalls += 1
                    if len(batch) == 0 or stalls >= 5:
                        done = True
                        break
                    continue
                stalls = 0
                acc.add_forest(forest, np.arange(n0, len(forest)))
        iterations.append(it)
        logger.debug("scale step=%g: %d iterations, perfused %.3f, %d nodes", step, it, frac, len(forest))

    if not fresh:
        frac = perfused_fraction(compute_oxygen_field(forest, grid, config), secretion_mask)
    converged = frac >= config.theta_p
    result = PlexusResult(forest, frac, converged, iterations, history, seed_nodes)
    if not converged and frac < config.theta_p / 2:
        reason = "iteration cap" if capped else "stalled growth"
        raise NonConvergenceError(f"{reason}: perfused fraction {frac:.3f} < theta_p/2", result)

    protect = np.zeros(len(forest), dtype=bool)
    protect[seed_nodes] = True
    pruned = prune_forest(forest, config, rng, protect=protect)
    result.forest = remodel_forest(pruned, config.gamma, keep_out=remodel_keep_out)
    return result
