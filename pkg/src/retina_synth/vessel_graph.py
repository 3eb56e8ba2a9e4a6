"""Vessel forests and the fluid-dynamic branching rules applied to them.

A forest is stored as flat numpy arrays indexed by node id (struct of
arrays). Ids are dense integers assigned in insertion order, so a node is
always created after its parent. Each non-root node owns the cylindrical
segment that joins it to its parent; the node's radius is that segment's
radius.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SVC = 0
DVC = 1
PLEXUS_NAMES = {SVC: "svc", DVC: "dvc"}
PLEXUS_CODES = {v: k for k, v in PLEXUS_NAMES.items()}

_DOMAIN_TOL = 1e-6


@dataclass(frozen=True)
class VesselNode:
    id: int
    position: tuple[float, float, float]
    radius: float
    parent: int | None = None
    children: tuple[int, ...] = ()
    plexus: int = SVC


@dataclass(frozen=True)
class PlexusConfig:
    """Growth hyperparameters for one vascular complex.

    The first block holds the retinal growth hyperparameters; the second
    holds the knobs of this implementation of the growth model.
    Lengths are in micrometres.
    """

    omega: tuple[float, float, float] = (3200.0, 3200.0, 64.0)
    theta_c: float = 1.025
    theta_p: float = 0.90
    r_initial: float = 22.5
    r_min: float = 2.25
    r_degen: float = 3.75
    r_prune: float = 1.5
    m_b: int = 16
    lambda_g: float = 1.0
    gamma: float = 3.0
    grid_spacing: float = 8.0

    l_o2: float = 60.0
    sprout_rate: float = 0.02
    jitter_deg: float = 10.0
    max_iterations: int = 200
    n_scales: int = 4

    def __post_init__(self):
        object.__setattr__(self, "omega", tuple(float(v) for v in self.omega))
        if len(self.omega) != 3 or min(self.omega) <= 0:
            raise ValueError("omega: expected three positive extents")
        if not 0 < self.r_prune <= self.r_degen:
            raise ValueError("r_prune: need 0 < r_prune <= r_degen")
        if not 0 < self.r_min < self.r_initial:
            raise ValueError("r_min: need 0 < r_min < r_initial")
        if self.gamma <= 0:
            raise ValueError("gamma: must be positive")
        if not 0.0 <= self.lambda_g <= 1.0:
            raise ValueError("lambda_g: must lie in [0, 1]")
        if self.m_b < 1:
            raise ValueError("m_b: must be >= 1")
        if not 0 < self.theta_p <= 1:
            raise ValueError("theta_p: must lie in (0, 1]")
        if self.theta_c < 1:
            raise ValueError("theta_c: must be >= 1")
        if self.grid_spacing <= 0 or self.l_o2 <= 0:
            raise ValueError("grid_spacing: must be positive")
        if not 0 <= self.sprout_rate <= 1:
            raise ValueError("sprout_rate: must lie in [0, 1]")
        if self.jitter_deg < 0:
            raise ValueError("jitter_deg: must be >= 0")
        if self.max_iterations < 1 or self.n_scales < 1:
            raise ValueError("max_iterations: must be >= 1")

    @property
    def step_lengths(self) -> list[float]:
        """Segment length per scale, coarse to fine (8x, 4x, 2x, 1x grid)."""
        return [self.grid_spacing * 2.0**k for k in range(self.n_scales - 1, -1, -1)]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["omega"] = list(self.omega)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlexusConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(unknown[0])
        return cls(**d)


def svc_config(**overrides) -> PlexusConfig:
    return PlexusConfig(**overrides)


def dvc_config(**overrides) -> PlexusConfig:
    # r_initial for the DVC is 7.5 um, the upper bound of SVC sprout-eligible
    # radii; it only normalizes the DVC oxygen kernel.
    base = dict(
        r_initial=7.5,
        r_min=1.5,
        r_degen=2.5,
        r_prune=1.0,
        m_b=12,
        lambda_g=0.25,
        gamma=2.5,
    )
    base.update(overrides)
    return PlexusConfig(**base)


# ---------------------------------------------------------------------------
# forest container


class VesselForest:
    """Forest of rooted vessel trees inside an axis-aligned domain (um)."""

    def __init__(self, domain, spacing: float = 8.0, capacity: int = 64):
        dom = np.asarray(domain, dtype=float)
        if dom.shape == (3,):
            dom = np.stack([np.zeros(3), dom])
        if dom.shape != (2, 3):
            raise ValueError("domain must be an extent (3,) or a box (2, 3)")
        self.domain = dom
        self.spacing = float(spacing)
        capacity = max(int(capacity), 8)
        self._pos = np.zeros((capacity, 3))
        self._radius = np.zeros(capacity)
        self._parent = np.full(capacity, -1, dtype=np.int64)
        self._children = np.full((capacity, 2), -1, dtype=np.int64)
        self._plexus = np.zeros(capacity, dtype=np.int8)
        self._n = 0
        self.roots: list[int] = []
        self.meta: dict = {}

    def __len__(self) -> int:
        return self._n

    def __repr__(self) -> str:
        return f"VesselForest(nodes={self._n}, roots={len(self.roots)})"

    @property
    def positions(self) -> np.ndarray:
        return self._pos[: self._n]

    @property
    def radii(self) -> np.ndarray:
        return self._radius[: self._n]

    @property
    def parents(self) -> np.ndarray:
        return self._parent[: self._n]

    @property
    def children(self) -> np.ndarray:
        return self._children[: self._n]

    @property
    def plexus(self) -> np.ndarray:
        return self._plexus[: self._n]

    @property
    def extent(self) -> np.ndarray:
        return self.domain[1] - self.domain[0]

    def n_children(self) -> np.ndarray:
        return (self.children >= 0).sum(axis=1)

    def _grow(self, need: int) -> None:
        cap = len(self._radius)
        if need <= cap:
            return
        new = max(need, 2 * cap)
        pad = new - cap
        self._pos = np.concatenate([self._pos, np.zeros((pad, 3))])
        self._radius = np.concatenate([self._radius, np.zeros(pad)])
        self._parent = np.concatenate([self._parent, np.full(pad, -1, dtype=np.int64)])
        self._children = np.concatenate(
            [self._children, np.full((pad, 2), -1, dtype=np.int64)]
        )
        self._plexus = np.concatenate([self._plexus, np.zeros(pad, dtype=np.int8)])

    def add_node(self, position, radius: float, parent: int | None = None, plexus: int = SVC) -> int:
        if not radius > 0:
            raise ValueError(f"radius must be positive, got {radius}")
        if parent is not None:
            if not 0 <= parent < self._n:
                raise ValueError(f"unknown parent {parent}")
            slots = self._children[parent]
            if slots[1] >= 0:
                raise ValueError(f"node {parent} already has two children")
        i = self._n
        self._grow(i + 1)
        self._pos[i] = position
        self._radius[i] = radius
        self._plexus[i] = plexus
        if parent is None:
            self._parent[i] = -1
            self.roots.append(i)
        else:
            self._parent[i] = parent
            slot = 0 if self._children[parent, 0] < 0 else 1
            self._children[parent, slot] = i
        self._n += 1
        return i

    def node(self, i: int) -> VesselNode:
        if not 0 <= i < self._n:
            raise IndexError(i)
        p = int(self._parent[i])
        return VesselNode(
            id=i,
            position=tuple(float(v) for v in self._pos[i]),
            radius=float(self._radius[i]),
            parent=None if p < 0 else p,
            children=tuple(int(c) for c in self._children[i] if c >= 0),
            plexus=int(self._plexus[i]),
        )

    def nodes(self) -> Iterator[VesselNode]:
        for i in range(self._n):
            yield self.node(i)

    def copy(self) -> "VesselForest":
        out = VesselForest(self.domain.copy(), self.spacing, capacity=max(self._n, 8))
        n = self._n
        out._pos[:n] = self.positions
        out._radius[:n] = self.radii
        out._parent[:n] = self.parents
        out._children[:n] = self.children
        out._plexus[:n] = self.plexus
        out._n = n
        out.roots = list(self.roots)
        out.meta = dict(self.meta)
        return out

    def segments(self):
        """Return (starts, ends, radii, node_ids) for every non-root node."""
        ids = np.nonzero(self.parents >= 0)[0]
        return (
            self.positions[self.parents[ids]],
            self.positions[ids],
            self.radii[ids],
            ids,
        )

    def preorder(self) -> np.ndarray:
        """Node ids ordered so that every parent precedes its children."""
        par = self.parents
        ids = np.arange(self._n)
        if np.all(par[par >= 0] < ids[par >= 0]):
            return ids
        out: list[int] = []
        stack = list(reversed(self.roots))
        ch = self.children
        while stack:
            n = stack.pop()
            out.append(n)
            for c in ch[n][::-1]:
                if c >= 0:
                    stack.append(int(c))
        return np.asarray(out, dtype=np.int64)

    def root_of(self) -> np.ndarray:
        """Root id for every node."""
        root = np.full(self._n, -1, dtype=np.int64)
        par = self.parents
        for n in self.preorder():
            p = par[n]
            root[n] = n if p < 0 else root[p]
        return root

    def subset(self, keep: np.ndarray) -> "VesselForest":
        """New forest with only the kept nodes; ids are compacted in order.

        ``keep`` must be closed under taking parents.
        """
        keep = np.asarray(keep, dtype=bool)
        par = self.parents
        if np.any(keep & (par >= 0) & ~keep[np.maximum(par, 0)]):
            raise ValueError("kept node set is not closed under parents")
        old = np.nonzero(keep)[0]
        remap = np.full(self._n + 1, -1, dtype=np.int64)
        remap[old] = np.arange(len(old))
        out = VesselForest(self.domain.copy(), self.spacing, capacity=max(len(old), 8))
        m = len(old)
        out._pos[:m] = self.positions[old]
        out._radius[:m] = self.radii[old]
        out._plexus[:m] = self.plexus[old]
        out._parent[:m] = np.where(par[old] >= 0, remap[par[old]], -1)
        ch = self.children[old]
        ch = np.where(ch >= 0, remap[ch], -1)
        # keep surviving children packed into the first slot
        swap = (ch[:, 0] < 0) & (ch[:, 1] >= 0)
        ch[swap] = ch[swap][:, ::-1]
        out._children[:m] = ch
        out._n = m
        out.roots = [int(remap[r]) for r in self.roots if keep[r]]
        out.meta = dict(self.meta)
        return out

    def contains(self, points: np.ndarray, tol: float = _DOMAIN_TOL) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.domain[0] - tol) & (p <= self.domain[1] + tol), axis=1)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self._n):
            p = int(self._parent[i])
            nodes.append(
                {
                    "id": i,
                    "parent": None if p < 0 else p,
                    "pos_um": [float(v) for v in self._pos[i]],
                    "radius_um": float(self._radius[i]),
                    "plexus": PLEXUS_NAMES[int(self._plexus[i])],
                }
            )
        return {
            "spacing_um": self.spacing,
            "domain_um": [[float(v) for v in row] for row in self.domain],
            "nodes": nodes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "VesselForest":
        report = validate_document(doc)
        if not report.ok:
            raise ValueError(f"invalid vessel graph: {report.violations[0]}")
        nodes = sorted(doc["nodes"], key=lambda n: n["id"])
        index = {n["id"]: k for k, n in enumerate(nodes)}
        forest = cls(doc["domain_um"], doc.get("spacing_um", 8.0), capacity=len(nodes))
        # insert in preorder so that parents always get lower ids
        kids: dict = {}
        roots = []
        for n in nodes:
            if n["parent"] is None:
                roots.append(n["id"])
            else:
                kids.setdefault(n["parent"], []).append(n["id"])
        by_id = {n["id"]: n for n in nodes}
        new_id: dict = {}
        stack = list(reversed(roots))
        while stack:
            nid = stack.pop()
            n = by_id[nid]
            parent = None if n["parent"] is None else new_id[n["parent"]]
            plexus = PLEXUS_CODES.get(n.get("plexus", "svc"), SVC)
            new_id[nid] = forest.add_node(n["pos_um"], n["radius_um"], parent, plexus)
            stack.extend(sorted(kids.get(nid, []), key=index.get, reverse=True))
        return forest

    @classmethod
    def from_json(cls, text: str) -> "VesselForest":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "VesselForest":
        return cls.from_json(Path(path).read_text())


def merge_forests(base: VesselForest, other: VesselForest, anchors: Mapping[int, int] | None = None,
                  domain=None) -> VesselForest:
    """Append ``other`` to ``base``.

    ``anchors`` maps a root id of ``other`` to a node id of ``base``; such
    roots become children of their anchor instead of new roots.
    """
    anchors = dict(anchors or {})
    if domain is None:
        domain = np.stack([np.minimum(base.domain[0], other.domain[0]),
                           np.maximum(base.domain[1], other.domain[1])])
    out = base.copy()
    out.domain = np.asarray(domain, dtype=float)
    offset = len(out)
    remap = {}
    for n in other.preorder():
        n = int(n)
        p = int(other.parents[n])
        if p < 0:
            parent = anchors.get(n)
        else:
            parent = remap[p]
        remap[n] = out.add_node(other.positions[n], other.radii[n], parent, int(other.plexus[n]))
    out.meta = {**base.meta, "merged_offset": offset}
    return out


# ---------------------------------------------------------------------------
# branching rules


def murray_parent_radius(r1: float, r2: float, gamma: float) -> float:
    """Parent radius satisfying r_p**gamma = r1**gamma + r2**gamma."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if r1 < 0 or r2 < 0:
        raise ValueError("radii must be non-negative")
    if r1 == 0 and r2 == 0:
        raise ValueError("at least one child radius must be positive")
    if r2 == 0:
        return float(r1)
    if r1 == 0:
        return float(r2)
    return float((r1**gamma + r2**gamma) ** (1.0 / gamma))


def optimal_branch_angles(r_p: float, r1: float, r2: float, gamma: float = 3.0):
    """Minimum-work deviation angles (radians) of two children from the parent axis.

    Segment cost per unit length scales as r**m with m = 2*gamma - 4, the
    metabolic exponent for which gamma is the optimal Murray exponent. For
    gamma = 3 this is the classic rule
    cos(theta_i) = (r_p**4 + r_i**4 - r_j**4) / (2 r_p**2 r_i**2).

    Returns ``(theta1, None)`` when ``r2 == 0`` (straight continuation).
    """
    if gamma <= 2:
        raise ValueError(f"angle law needs gamma > 2, got {gamma}")
    if r1 <= 0 or r_p <= 0 or r2 < 0:
        raise ValueError("radii must be positive")
    if r_p < max(r1, r2) * (1 - 1e-12):
        raise ValueError("parent radius smaller than a child radius")
    if r2 == 0:
        return 0.0, None
    m = 2.0 * gamma - 4.0
    # normalize by r_p to keep the powers well scaled
    w0, w1, w2 = 1.0, (r1 / r_p) ** m, (r2 / r_p) ** m
    c1 = (w0 * w0 + w1 * w1 - w2 * w2) / (2.0 * w0 * w1)
    c2 = (w0 * w0 + w2 * w2 - w1 * w1) / (2.0 * w0 * w2)
    return math.acos(min(1.0, max(-1.0, c1))), math.acos(min(1.0, max(-1.0, c2)))


def _gamma_per_node(forest: VesselForest, gamma) -> np.ndarray:
    if isinstance(gamma, Mapping):
        table = np.zeros(max(PLEXUS_NAMES) + 1)
        for k, v in gamma.items():
            table[PLEXUS_CODES[k] if isinstance(k, str) else int(k)] = float(v)
        g = table[forest.plexus.astype(np.int64)]
    else:
        g = np.full(len(forest), float(gamma))
    if np.any(g <= 0):
        raise ValueError("gamma must be positive for every plexus present")
    return g


def _perpendicular(v: np.ndarray) -> np.ndarray:
    axis = np.eye(3)[int(np.argmin(np.abs(v)))]
    w = np.cross(v, axis)
    return w / np.linalg.norm(w)


def _rotated_positions(forest, order, gam, frozen, radii):
    """One root-to-leaf pass placing children at their optimal angles.

    Each rotated child carries its whole subtree by translation, so every
    segment keeps its length and every other segment keeps its direction.
    """
    old = forest.positions
    par = forest.parents
    ch = forest.children
    plex = forest.plexus
    shift = np.zeros_like(old)
    rotated = np.zeros(len(forest), dtype=bool)
    for b in order:
        p = par[b]
        c1, c2 = ch[b]
        if c1 >= 0:
            shift[c1] = shift[b]
        if c2 >= 0:
            shift[c2] = shift[b]
        if p < 0 or c1 < 0 or c2 < 0 or plex[c1] != plex[c2] or gam[b] <= 2:
            continue
        pb = old[b] + shift[b]
        pdir = pb - (old[p] + shift[p])
        pdir /= np.linalg.norm(pdir)
        v1 = old[c1] - old[b]
        v2 = old[c2] - old[b]
        l1, l2 = np.linalg.norm(v1), np.linalg.norm(v2)
        u1, u2 = v1 / l1, v2 / l2
        e = (u2 - u1) - np.dot(u2 - u1, pdir) * pdir
        if np.linalg.norm(e) < 1e-9:
            e = u2 - np.dot(u2, pdir) * pdir
            if np.linalg.norm(e) < 1e-9:
                e = _perpendicular(pdir)
        e /= np.linalg.norm(e)
        t1, t2 = optimal_branch_angles(radii[b], radii[c1], radii[c2], gam[b])
        n1 = math.cos(t1) * pdir - math.sin(t1) * e
        n2 = math.cos(t2) * pdir + math.sin(t2) * e
        if c1 not in frozen:
            shift[c1] = pb + l1 * n1 - old[c1]
            rotated[c1] = True
        if c2 not in frozen:
            shift[c2] = pb + l2 * n2 - old[c2]
            rotated[c2] = True
    return old + shift, rotated


def remodel_forest(
    forest: VesselForest,
    gamma,
    *,
    enforce_angles: bool = True,
    keep_out: Callable[[VesselForest], np.ndarray] | None = None,
    max_passes: int = 12,
) -> VesselForest:
    """Recompute radii leaf-to-root by Murray's law and straighten bifurcation angles.

    ``gamma`` is a scalar or a mapping from plexus name/code to exponent;
    the exponent of the bifurcating node applies. Bifurcations whose two
    children belong to different plexuses (vertical SVC->DVC sprouts) keep
    their geometry. A child rotation is abandoned if it would push any node
    of its subtree out of the domain or into ``keep_out`` (a callable
    returning a per-node offending mask). Nodes whose new radius exceeds
    the original radius of their root are listed in
    ``meta["oversized_nodes"]``.
    """
    out = forest.copy()
    n = len(out)
    if n == 0:
        out.meta["oversized_nodes"] = []
        return out
    order = out.preorder()
    gam = _gamma_per_node(out, gamma)
    r = out._radius
    ch = out.children
    for b in order[::-1]:
        c1, c2 = ch[b]
        if c1 >= 0 and c2 >= 0:
            r[b] = murray_parent_radius(r[c1], r[c2], gam[b])
        elif c1 >= 0 or c2 >= 0:
            r[b] = r[max(c1, c2)]

    root = forest.root_of()
    oversized = np.nonzero(r[:n] > forest.radii[root] * (1 + 1e-12))[0]
    out.meta["oversized_nodes"] = [int(i) for i in oversized]
    if len(oversized):
        logger.info("remodel: %d nodes exceed their root's initial radius", len(oversized))

    if enforce_angles:
        frozen: set = set()
        par = out.parents
        new_pos = out.positions.copy()
        for _ in range(max_passes):
            new_pos, rotated = _rotated_positions(out, order, gam, frozen, r)
            trial = out.copy()
            trial._pos[:n] = new_pos
            bad = ~trial.contains(new_pos)
            if keep_out is not None:
                bad |= np.asarray(keep_out(trial), dtype=bool)
            if not bad.any():
                break
            grew = False
            for b in np.nonzero(bad)[0]:
                a = int(b)
                while a >= 0:
                    if rotated[a] and a not in frozen:
                        frozen.add(a)
                        grew = True
                    a = int(par[a])
            if not grew:
                new_pos = out.positions.copy()
                break
        else:
            new_pos = out.positions.copy()
        out._pos[:n] = new_pos
    return out


def murray_residuals(forest: VesselForest, gamma) -> np.ndarray:
    """Relative Murray residual at every bifurcation."""
    gam = _gamma_per_node(forest, gamma)
    ch = forest.children
    bif = np.nonzero((ch[:, 0] >= 0) & (ch[:, 1] >= 0))[0]
    if len(bif) == 0:
        return np.zeros(0)
    g = gam[bif]
    rp = forest.radii[bif] ** g
    s = forest.radii[ch[bif, 0]] ** g + forest.radii[ch[bif, 1]] ** g
    return np.abs(rp - s) / rp


def prune_forest(forest: VesselForest, config: PlexusConfig, rng: np.random.Generator,
                 protect: np.ndarray | None = None) -> VesselForest:
    """Remove thin terminal segments.

    Leaves thinner than ``r_prune`` always go; leaves thinner than
    ``r_degen`` go with probability (r_degen - r) / (r_degen - r_prune).
    One uniform draw per node id is taken up front and removal is repeated
    until no leaf qualifies, so pruning twice with equal streams is a no-op.
    Nodes flagged in ``protect`` are never removed.
    """
    n = len(forest)
    u = rng.random(n)
    if n == 0:
        return forest.copy()
    span = max(config.r_degen - config.r_prune, 1e-12)
    r = forest.radii
    p_remove = np.clip((config.r_degen - r) / span, 0.0, 1.0)
    doomed = (r < config.r_prune) | ((r < config.r_degen) & (u < p_remove))
    if protect is not None:
        doomed &= ~np.asarray(protect, dtype=bool)
    keep = np.ones(n, dtype=bool)
    n_kids = forest.n_children().astype(np.int64)
    par = forest.parents
    frontier = np.nonzero(doomed & (n_kids == 0))[0]
    while len(frontier):
        keep[frontier] = False
        parents = par[frontier]
        parents = parents[parents >= 0]
        np.subtract.at(n_kids, parents, 1)
        cand = np.unique(parents)
        frontier = cand[doomed[cand] & (n_kids[cand] == 0) & keep[cand]]
    return forest.subset(keep)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    kind: str
    node: int | None
    message: str

    def __str__(self) -> str:
        return f"{self.kind} (node {self.node}): {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]


def _validate_graph(ids, parent, children, pos, radius, roots, domain) -> ValidationReport:
    out: list[Violation] = []
    known = set()
    for i in ids:
        if i in known:
            out.append(Violation("duplicate-id", i, "id appears more than once"))
        known.add(i)
    lo, hi = np.asarray(domain[0], float), np.asarray(domain[1], float)
    for i in ids:
        r = radius[i]
        if not (np.isfinite(r) and r > 0):
            out.append(Violation("radius", i, f"radius {r} is not positive"))
        if len(children[i]) > 2:
            out.append(Violation("children", i, f"{len(children[i])} children (max 2)"))
        p = np.asarray(pos[i], float)
        if not np.all(np.isfinite(p)) or np.any(p < lo - _DOMAIN_TOL) or np.any(p > hi + _DOMAIN_TOL):
            out.append(Violation("domain", i, f"position {p.tolist()} outside domain"))
    mismatched = set()
    for i in ids:
        pa = parent[i]
        if pa is None:
            continue
        if pa not in known:
            out.append(Violation("parent", i, f"parent {pa} does not exist"))
            continue
        if i not in children[pa]:
            mismatched.add((pa, i))
        seg = np.linalg.norm(np.asarray(pos[i], float) - np.asarray(pos[pa], float))
        if not seg > 0:
            out.append(Violation("segment-length", i, "zero-length segment"))
    for i in ids:
        for c in children[i]:
            if c not in known or parent[c] != i:
                mismatched.add((i, c))
    for pa, c in sorted(mismatched):
        out.append(Violation("asymmetric", c, f"parent/children links of {pa} and {c} disagree"))
    root_set = set(roots)
    for r in roots:
        if r not in known:
            out.append(Violation("root", r, "listed root does not exist"))
        elif parent[r] is not None:
            out.append(Violation("root", r, "listed root has a parent"))
    for i in ids:
        if parent[i] is None and i not in root_set:
            out.append(Violation("root", i, "parentless node missing from roots"))
    # cycles: walk parent pointers with three-colour marking
    state: dict = {}
    for start in ids:
        if start in state:
            continue
        path = []
        a = start
        while a is not None and a in known and a not in state:
            state[a] = 1
            path.append(a)
            a = parent[a]
        if a is not None and state.get(a) == 1:
            cyc = path[path.index(a):]
            out.append(Violation("cycle", min(cyc), f"cycle through nodes {sorted(cyc)}"))
        for b in path:
            state[b] = 2
    return ValidationReport(out)


def validate_forest(forest) -> ValidationReport:
    """List every structural violation; empty iff the forest is valid.

    Accepts a :class:`VesselForest`, a sequence of :class:`VesselNode`
    (domain taken as unbounded), or a graph document dict.
    """
    if isinstance(forest, Mapping):
        return validate_document(forest)
    if isinstance(forest, VesselForest):
        n = len(forest)
        ids = list(range(n))
        parent = {i: (None if forest.parents[i] < 0 else int(forest.parents[i])) for i in ids}
        children = {i: [int(c) for c in forest.children[i] if c >= 0] for i in ids}
        pos = {i: forest.positions[i] for i in ids}
        radius = {i: float(forest.radii[i]) for i in ids}
        return _validate_graph(ids, parent, children, pos, radius, list(forest.roots), forest.domain)
    nodes: Sequence[VesselNode] = list(forest)
    ids = [nd.id for nd in nodes]
    parent = {nd.id: nd.parent for nd in nodes}
    children = {nd.id: list(nd.children) for nd in nodes}
    pos = {nd.id: nd.position for nd in nodes}
    radius = {nd.id: nd.radius for nd in nodes}
    roots = [nd.id for nd in nodes if nd.parent is None]
    inf = np.full(3, np.inf)
    return _validate_graph(ids, parent, children, pos, radius, roots, (-inf, inf))


def validate_document(doc: Mapping) -> ValidationReport:
    """Validate a graph JSON document; children are derived from parent links."""
    try:
        nodes = doc["nodes"]
        domain = np.asarray(doc["domain_um"], dtype=float).reshape(2, 3)
        ids = [n["id"] for n in nodes]
        parent = {n["id"]: n["parent"] for n in nodes}
        pos = {n["id"]: n["pos_um"] for n in nodes}
        radius = {n["id"]: float(n["radius_um"]) for n in nodes}
    except (KeyError, TypeError, ValueError) as exc:
        return ValidationReport([Violation("schema", None, f"malformed document: {exc!r}")])
    children: dict = {i: [] for i in ids}
    for n in nodes:
        if n["parent"] is not None and n["parent"] in children:
            children[n["parent"]].append(n["id"])
    roots = [i for i in ids if parent[i] is None]
    return _validate_graph(ids, parent, children, pos, radius, roots, domain)
