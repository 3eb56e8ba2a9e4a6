"""Morphology statistics of vessel forests."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .raster import RasterPair
from .vessel_graph import PLEXUS_CODES, VesselForest, murray_residuals

ANGLE_BIN_DEG = 5.0
RADIUS_BIN_UM = 1.0


@dataclass
class Histogram:
    edges: list
    counts: list

    @property
    def total(self) -> int:
        return int(sum(self.counts))


@dataclass
class MorphometryReport:
    n_nodes: int = 0
    n_bifurcations: int = 0
    radius_histogram: Histogram = field(default_factory=lambda: Histogram([0.0], []))
    branch_angle_histogram: Histogram = field(default_factory=lambda: Histogram([0.0], []))
    mean_segment_direction_change: float = 0.0
    mean_branch_angle: float = 0.0
    murray_residual_max: float = 0.0
    vessel_density: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "MorphometryReport":
        d = dict(d)
        d["radius_histogram"] = Histogram(**d["radius_histogram"])
        d["branch_angle_histogram"] = Histogram(**d["branch_angle_histogram"])
        return cls(**d)

    def summary(self) -> str:
        return "\n".join([
            f"nodes                 {self.n_nodes}",
            f"bifurcations          {self.n_bifurcations}",
            f"direction change      {self.mean_segment_direction_change:.2f} deg",
            f"mean branch angle     {self.mean_branch_angle:.2f} deg",
            f"Murray residual max   {self.murray_residual_max:.3e}",
            *(f"density[{k}]{' ' * max(1, 12 - len(k))}{v:.4f}" for k, v in sorted(self.vessel_density.items())),
        ])


def _angle_deg(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    ok = (nu > 0) & (nv > 0)
    c = np.einsum("ij,ij->i", u[ok], v[ok]) / (nu[ok] * nv[ok])
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def _histogram(values: np.ndarray, width: float, top: float | None = None) -> Histogram:
    hi = top if top is not None else width * max(1.0, np.ceil(values.max() / width + 1e-12) if len(values) else 1.0)
    edges = np.arange(0.0, hi + 0.5 * width, width)
    counts, _ = np.histogram(values, bins=edges)
    return Histogram(edges.tolist(), counts.astype(int).tolist())


def branch_angles(forest: VesselForest) -> np.ndarray:
    """Angle (deg) between the two child segments at each bifurcation."""
    ch = forest.children
    bif = np.nonzero((ch[:, 0] >= 0) & (ch[:, 1] >= 0))[0]
    pos = forest.positions
    return _angle_deg(pos[ch[bif, 0]] - pos[bif], pos[ch[bif, 1]] - pos[bif])


def direction_changes(forest: VesselForest) -> np.ndarray:
    """Turning angle (deg) between consecutive segments along unbranched runs.

    A pair is (grandparent -> parent, parent -> node) where the parent has a
    single child; splits are covered by the branch angles instead.
    """
    par = forest.parents
    nodes = np.nonzero(par >= 0)[0]
    p = par[nodes]
    gp = par[p]
    ok = (gp >= 0) & (forest.n_children()[p] == 1) & (forest.plexus[nodes] == forest.plexus[p])
    ok &= forest.plexus[p] == forest.plexus[np.maximum(gp, 0)]
    nodes, p, gp = nodes[ok], p[ok], gp[ok]
    pos = forest.positions
    return _angle_deg(pos[p] - pos[gp], pos[nodes] - pos[p])


def analyze_forest(forest: VesselForest, gamma=3.0) -> MorphometryReport:
    """Counts, histograms, mean turning and branch angles and the Murray residual."""
    if len(forest) == 0:
        return MorphometryReport(
            radius_histogram=Histogram([0.0, RADIUS_BIN_UM], [0]),
            branch_angle_histogram=_histogram(np.zeros(0), ANGLE_BIN_DEG, 180.0),
        )
    angles = branch_angles(forest)
    turns = direction_changes(forest)
    res = murray_residuals(forest, gamma)
    return MorphometryReport(
        n_nodes=len(forest),
        n_bifurcations=int(len(angles)),
        radius_histogram=_histogram(forest.radii, RADIUS_BIN_UM),
        branch_angle_histogram=_histogram(angles, ANGLE_BIN_DEG, 180.0),
        mean_segment_direction_change=float(turns.mean()) if len(turns) else 0.0,
        mean_branch_angle=float(angles.mean()) if len(angles) else 0.0,
        murray_residual_max=float(res.max()) if len(res) else 0.0,
    )


def vessel_density(pair: RasterPair, region_mask: np.ndarray) -> float:
    """Fraction of region voxels that carry a vessel label."""
    region = np.asarray(region_mask).astype(bool)
    if region.shape != pair.label.shape:
        raise ValueError(f"region mask {region.shape} does not match label {pair.label.shape}")
    n = int(region.sum())
    if n == 0:
        raise ValueError("empty region")
    return float(np.count_nonzero(pair.label[region])) / n


def plexus_forest(forest: VesselForest, plexus) -> VesselForest:
    """Nodes of one complex; nodes whose parent lies in the other complex become roots."""
    code = PLEXUS_CODES[plexus] if isinstance(plexus, str) else int(plexus)
    mine = forest.plexus == code
    out = VesselForest(forest.domain.copy(), forest.spacing, capacity=int(mine.sum()))
    new = np.full(len(forest), -1, dtype=np.int64)
    par = forest.parents
    for n in forest.preorder():
        if not mine[n]:
            continue
        p = par[n]
        parent = int(new[p]) if p >= 0 and mine[p] else None
        new[n] = out.add_node(forest.positions[n], float(forest.radii[n]), parent, code)
    out.meta = dict(forest.meta)
    return out


@dataclass
class ComplexComparison:
    svc_direction_change: float
    dvc_direction_change: float
    svc_branch_angle: float
    dvc_branch_angle: float

    @property
    def dvc_more_tortuous(self) -> bool:
        return self.dvc_direction_change > self.svc_direction_change

    @property
    def dvc_wider_branching(self) -> bool:
        return self.dvc_branch_angle > self.svc_branch_angle

    @property
    def dvc_exceeds_svc(self) -> bool:
        return self.dvc_more_tortuous and self.dvc_wider_branching

    def to_dict(self) -> dict:
        return dict(asdict(self), dvc_more_tortuous=self.dvc_more_tortuous,
                    dvc_wider_branching=self.dvc_wider_branching, dvc_exceeds_svc=self.dvc_exceeds_svc)


def compare_complexes(svc: VesselForest, dvc: VesselForest) -> ComplexComparison:
    """Mean turning and branch angles per complex."""
    if len(svc) == 0 or len(dvc) == 0:
        raise ValueError("both forests must be non-empty")
    s, d = analyze_forest(svc), analyze_forest(dvc)
    return ComplexComparison(s.mean_segment_direction_change, d.mean_segment_direction_change,
                             s.mean_branch_angle, d.mean_branch_angle)
