import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from retina_synth.vessel_graph import (
    DVC,
    SVC,
    PlexusConfig,
    VesselForest,
    VesselNode,
    dvc_config,
    merge_forests,
    murray_parent_radius,
    murray_residuals,
    optimal_branch_angles,
    prune_forest,
    remodel_forest,
    svc_config,
    validate_document,
    validate_forest,
)

from conftest import random_forest

CBRT2 = 2.0 ** (1.0 / 3.0)


def y_tree(r1=10.0, r2=10.0, r_root=30.0):
    f = VesselForest((100.0, 100.0, 100.0))
    a = f.add_node((50, 10, 50), r_root)
    b = f.add_node((50, 30, 50), r_root, a)
    f.add_node((40, 50, 50), r1, b)
    f.add_node((60, 50, 50), r2, b)
    return f


# -- Murray -------------------------------------------------------------------


def test_murray_symmetric():
    assert murray_parent_radius(10, 10, 3.0) == pytest.approx(12.599210498948732, rel=1e-12)


def test_murray_single_child_identity():
    assert murray_parent_radius(10, 0, 3.0) == 10


def test_murray_inverts_symmetric_split_of_initial_radius():
    # 22.5 / 2**(1/3), rounded as quoted
    assert murray_parent_radius(17.858, 17.858, 3.0) == pytest.approx(22.5, abs=1e-3)
    child = 22.5 / CBRT2
    assert murray_parent_radius(child, child, 3.0) == pytest.approx(22.5, rel=1e-12)


@pytest.mark.parametrize("args", [(0, 0, 3.0), (1, 1, 0.0), (1, 1, -2.0), (-1, 2, 3.0)])
def test_murray_domain_errors(args):
    with pytest.raises(ValueError):
        murray_parent_radius(*args)


@given(st.floats(0, 100), st.floats(0.01, 100), st.floats(0.5, 5))
def test_murray_at_least_largest_child(r1, r2, g):
    assert murray_parent_radius(r1, r2, g) >= max(r1, r2) * (1 - 1e-12)


# -- branch angles ------------------------------------------------------------


def test_symmetric_angles_gamma3():
    t1, t2 = optimal_branch_angles(CBRT2 * 4.0, 4.0, 4.0)
    oracle = math.acos(2.0 ** (-1.0 / 3.0))
    assert t1 == pytest.approx(oracle, abs=1e-12) and t2 == pytest.approx(oracle, abs=1e-12)
    assert math.degrees(t1) == pytest.approx(37.47, abs=0.01)
    # 37.47 deg is 0.65393 rad; a rounded 0.6544 would be 37.49 deg
    assert t1 == pytest.approx(0.65393, abs=1e-5)


def test_concrete_angles():
    t1, t2 = optimal_branch_angles(12.599, 10, 10)
    assert math.degrees(t1) == pytest.approx(37.47, abs=0.01)
    assert math.degrees(t2) == pytest.approx(37.47, abs=0.01)


def test_straight_continuation():
    assert optimal_branch_angles(5.0, 5.0, 0.0)[0] == 0.0


def test_classic_cosine_rule_at_gamma3():
    rp, r1, r2 = 10.0, 8.5, 6.0
    c1 = (rp**4 + r1**4 - r2**4) / (2 * rp**2 * r1**2)
    c2 = (rp**4 + r2**4 - r1**4) / (2 * rp**2 * r2**2)
    t1, t2 = optimal_branch_angles(rp, r1, r2, 3.0)
    assert t1 == pytest.approx(math.acos(c1), abs=1e-12)
    assert t2 == pytest.approx(math.acos(c2), abs=1e-12)


def test_larger_child_smaller_angle():
    t1, t2 = optimal_branch_angles(10.0, 9.0, 5.0)
    assert t1 < t2


def test_wider_symmetric_split_for_smaller_gamma():
    # symmetric split at gamma: cos = 2**(-(2 gamma - 4)/gamma) / 2 ... evaluated directly
    def symmetric(g):
        w = (2.0 ** (-1.0 / g)) ** (2 * g - 4)
        return 2 * math.degrees(math.acos(1.0 / (2.0 * w)))

    for g in (2.5, 3.0):
        r = 3.0
        t1, t2 = optimal_branch_angles(r * 2.0 ** (1 / g), r, r, g)
        assert math.degrees(t1 + t2) == pytest.approx(symmetric(g), abs=1e-9)
    assert symmetric(2.5) > symmetric(3.0)


@pytest.mark.parametrize("args", [(0, 1, 1), (5, -1, 1), (5, 0, 1), (1, 2, 1)])
def test_angle_domain_errors(args):
    with pytest.raises(ValueError):
        optimal_branch_angles(*args)


# -- remodel ------------------------------------------------------------------


def test_remodel_single_segment_unchanged():
    f = VesselForest((10, 10, 10))
    a = f.add_node((1, 1, 1), 2.0)
    f.add_node((5, 5, 5), 2.0, a)
    g = remodel_forest(f, 3.0)
    assert np.array_equal(g.positions, f.positions) and np.array_equal(g.radii, f.radii)


def test_remodel_symmetric_y_root_radius():
    g = remodel_forest(y_tree(), 3.0)
    assert g.radii[0] == pytest.approx(murray_parent_radius(10, 10, 3.0), rel=1e-12)
    assert g.radii[1] == pytest.approx(12.599210498948732, rel=1e-12)


def test_remodel_sets_optimal_angle():
    g = remodel_forest(y_tree(), 3.0)
    p = g.positions
    u, v = p[2] - p[1], p[3] - p[1]
    ang = math.degrees(math.acos(u @ v / np.linalg.norm(u) / np.linalg.norm(v)))
    assert ang == pytest.approx(2 * 37.47, abs=0.02)
    # segment lengths unchanged
    f = y_tree()
    for c in (2, 3):
        assert np.linalg.norm(g.positions[c] - g.positions[1]) == pytest.approx(
            np.linalg.norm(f.positions[c] - f.positions[1]), rel=1e-12)


def test_remodel_reports_oversized():
    g = remodel_forest(y_tree(r1=20, r2=20, r_root=5.0), 3.0)
    assert 0 in g.meta["oversized_nodes"]


def _paths_non_increasing(f):
    par = f.parents
    r = f.radii
    kids = np.nonzero(par >= 0)[0]
    return bool(np.all(r[kids] <= r[par[kids]] * (1 + 1e-12)))


@given(st.integers(2, 40), st.integers(0, 2**32 - 1), st.sampled_from([2.5, 3.0]))
def test_remodel_properties(n, seed, gamma):
    f = random_forest(np.random.default_rng(seed), n)
    assert validate_forest(f).ok
    g = remodel_forest(f, gamma)
    assert validate_forest(g).ok
    assert len(g) == len(f) and np.array_equal(g.parents, f.parents)
    res = murray_residuals(g, gamma)
    assert res.size == 0 or res.max() < 1e-9
    assert _paths_non_increasing(g)


@given(st.integers(2, 30), st.integers(0, 2**32 - 1))
def test_remodel_per_plexus_gamma(n, seed):
    f = random_forest(np.random.default_rng(seed), n)
    f._plexus[: len(f)] = np.random.default_rng(seed).integers(0, 2, len(f))
    g = remodel_forest(f, {"svc": 3.0, "dvc": 2.5})
    res = murray_residuals(g, {"svc": 3.0, "dvc": 2.5})
    assert res.size == 0 or res.max() < 1e-9


# -- prune --------------------------------------------------------------------


def test_prune_thick_forest_unchanged():
    cfg = svc_config()
    f = y_tree(10, 10, 30)
    g = prune_forest(f, cfg, np.random.default_rng(0))
    assert np.array_equal(g.positions, f.positions) and len(g) == len(f)


def test_prune_removes_leaf_below_floor():
    cfg = svc_config()
    f = y_tree(10, cfg.r_prune / 2, 30)
    g = prune_forest(f, cfg, np.random.default_rng(0))
    assert len(g) == 3 and g.radii.min() == 10


class _Replay:
    """Stream stand-in that hands out a fixed array of uniforms."""

    def __init__(self, u):
        self.u = np.asarray(u)

    def random(self, n):
        assert n == len(self.u)
        return self.u.copy()


@given(st.integers(2, 40), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_prune_monotone_valid_idempotent(n, seed, stream):
    cfg = PlexusConfig(r_min=0.5, r_prune=1.5, r_degen=4.0)
    f = random_forest(np.random.default_rng(seed), n, r_range=(0.5, 6.0))
    u = np.random.default_rng(stream).random(len(f))
    g = prune_forest(f, cfg, _Replay(u))
    assert len(g) <= len(f)
    assert validate_forest(g).ok
    # ids are compacted in order; give each survivor its original draw
    kept = [int(np.nonzero(np.all(f.positions == p, axis=1))[0][0]) for p in g.positions]
    h = prune_forest(g, cfg, _Replay(u[kept]))
    assert np.array_equal(h.positions, g.positions) and np.array_equal(h.parents, g.parents)


def test_prune_whole_tree_drops_root():
    cfg = svc_config()
    f = VesselForest((100, 100, 100))
    a = f.add_node((10, 10, 10), 0.5)
    f.add_node((20, 10, 10), 0.5, a)
    b = f.add_node((50, 50, 50), 10.0)
    f.add_node((60, 50, 50), 10.0, b)
    g = prune_forest(f, cfg, np.random.default_rng(1))
    assert len(g) == 2 and g.roots == [0]


# -- validation ---------------------------------------------------------------


def test_empty_forest_valid():
    assert validate_forest(VesselForest((1, 1, 1))).ok


def test_three_children_one_violation():
    nodes = [
        VesselNode(0, (0, 0, 0), 5.0, None, (1, 2, 3)),
        VesselNode(1, (1, 0, 0), 1.0, 0),
        VesselNode(2, (0, 1, 0), 1.0, 0),
        VesselNode(3, (0, 0, 1), 1.0, 0),
    ]
    rep = validate_forest(nodes)
    assert len(rep) == 1 and rep.kinds() == ["children"]


def test_cycle_one_violation():
    nodes = [
        VesselNode(0, (0, 0, 0), 5.0, None, (1,)),
        VesselNode(1, (1, 0, 0), 1.0, 0),
        VesselNode(2, (2, 0, 0), 1.0, 3, (3,)),
        VesselNode(3, (3, 0, 0), 1.0, 2, (2,)),
    ]
    rep = validate_forest(nodes)
    assert len(rep) == 1 and rep.kinds() == ["cycle"]


def _node_set(f):
    return sorted((tuple(f.positions[i]), float(f.radii[i]),
                   None if f.parents[i] < 0 else tuple(f.positions[f.parents[i]])) for i in range(len(f)))


def test_document_round_trip():
    f = random_forest(np.random.default_rng(5), 30)
    g = VesselForest.from_json(f.to_json())
    # same nodes, radii and edges; ids are renumbered in preorder on load
    assert _node_set(g) == _node_set(f)
    text = g.to_json()
    assert VesselForest.from_json(text).to_json() == text
    doc = json.loads(text)
    assert list(doc) == sorted(doc)
    assert validate_document(doc).ok


def test_round_trip_keeps_murray_residual():
    g = remodel_forest(random_forest(np.random.default_rng(9), 40), 3.0)
    h = VesselForest.from_json(g.to_json())
    assert murray_residuals(h, 3.0).max() < 1e-9


def test_config_invariants():
    with pytest.raises(ValueError, match="r_prune"):
        PlexusConfig(r_prune=5.0)
    with pytest.raises(ValueError, match="r_min"):
        PlexusConfig(r_min=30.0)
    with pytest.raises(ValueError, match="gamma"):
        PlexusConfig(gamma=0.0)
    with pytest.raises(ValueError, match="lambda_g"):
        PlexusConfig(lambda_g=1.5)
    with pytest.raises(ValueError, match="m_b"):
        PlexusConfig(m_b=0)


def test_plexus_presets():
    s, d = svc_config(), dvc_config()
    assert s.omega == d.omega == (3200.0, 3200.0, 64.0)
    assert (s.theta_c, s.theta_p, s.r_initial, s.r_min, s.r_degen, s.r_prune, s.m_b, s.lambda_g, s.gamma) == \
        (1.025, 0.90, 22.5, 2.25, 3.75, 1.5, 16, 1.0, 3.0)
    assert (d.theta_c, d.theta_p, d.r_min, d.r_degen, d.r_prune, d.m_b, d.lambda_g, d.gamma) == \
        (1.025, 0.90, 1.5, 2.5, 1.0, 12, 0.25, 2.5)


def test_merge_anchors_roots():
    a = y_tree()
    b = VesselForest((100, 100, 100))
    r = b.add_node((40, 50, 60), 3.0, plexus=DVC)
    b.add_node((40, 50, 70), 3.0, r, plexus=DVC)
    m = merge_forests(a, b, {r: 2})
    assert len(m) == 6 and m.roots == [0] and m.parents[4] == 2
    assert m.plexus[4] == DVC and m.plexus[0] == SVC
