import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from retina_synth.angiogenesis import FieldGrid
from retina_synth.retina import (
    LayerSurfaces,
    NoSproutsError,
    RetinaSpec,
    deform_to_layers,
    faz_region,
    faz_secretion_mask,
    radial_stump_seeds,
    synthesize_layer_surfaces,
    vertical_sprout_seeds,
)
from retina_synth.vessel_graph import DVC, SVC, VesselForest, dvc_config, svc_config, validate_forest

from conftest import random_forest


def _angle(v):
    return math.degrees(math.atan2(v[1], v[0])) % 360.0


# -- stumps -------------------------------------------------------------------


def test_four_stumps_without_jitter():
    spec = RetinaSpec(svc_config(), dvc_config(), n_stumps=4, stump_jitter=0.0)
    seeds = radial_stump_seeds(spec, np.random.default_rng(0))
    assert len(seeds) == 4
    centre = np.array([1600.0, 1600.0])
    got = sorted(round(_angle(np.array(s.start[:2]) - centre), 9) for s in seeds)
    assert got == [0.0, 90.0, 180.0, 270.0]
    for s in seeds:
        start = np.array(s.start)
        # on the lateral boundary
        assert min(start[0], start[1], 3200 - start[0], 3200 - start[1]) == pytest.approx(0.0, abs=1e-9)


@given(st.integers(1, 16), st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_stumps_point_inward(n, seed, jitter):
    spec = RetinaSpec(svc_config(), dvc_config(), n_stumps=n, stump_jitter=jitter)
    seeds = radial_stump_seeds(spec, np.random.default_rng(seed))
    assert len(seeds) == n
    centre = np.array([1600.0, 1600.0, 32.0])
    for s in seeds:
        a, b = np.array(s.start), np.array(s.end)
        assert s.radius == 22.5
        assert (b - a) @ (a - centre) < 0
        assert np.all((b >= 0) & (b <= (3200, 3200, 64)))


# -- FAZ ----------------------------------------------------------------------


def test_faz_mask_centre_corner_and_area():
    spec = RetinaSpec(svc_config(), dvc_config(), seed=4)
    grid = FieldGrid.for_config(spec.svc_config)
    mask = faz_secretion_mask(spec, grid).values
    assert mask[200, 200, 3] == 0.0 and mask[0, 0, 0] == 1.0 and mask[-1, -1, -1] == 1.0
    assert set(np.unique(mask)) == {0.0, 1.0}
    masked = (mask[:, :, 0] == 0).mean()
    assert masked == pytest.approx(math.pi * 350.0**2 / 3200.0**2, rel=0.10)
    # every slice is the same cylinder
    assert np.all(mask == mask[:, :, :1])


@given(st.integers(0, 2**32 - 1))
def test_faz_jitter_bounded(seed):
    spec = RetinaSpec(svc_config(), dvc_config(), seed=seed)
    faz = faz_region(spec)
    assert max(faz.semi_axes) <= 350 * 1.15 + 1e-9 and min(faz.semi_axes) >= 350 * 0.85 - 1e-9
    assert faz.contains([[1600.0, 1600.0, 10.0]]).all()


def test_spec_validation():
    with pytest.raises(ValueError, match="faz_radius"):
        RetinaSpec(svc_config(), dvc_config(), faz_radius=1700.0)
    with pytest.raises(ValueError, match="n_stumps"):
        RetinaSpec(svc_config(), dvc_config(), n_stumps=0)


# -- vertical sprouts ---------------------------------------------------------


def _svc_sample():
    f = random_forest(np.random.default_rng(2), 120, extent=(3200, 3200, 64), r_range=(1.0, 12.0), step=(20, 60))
    assert validate_forest(f).ok
    return f


def _eligible(f, cfg):
    r = f.radii
    return (f.parents >= 0) & (f.n_children() < 2) & (r >= cfg.r_min) & (r <= 2 * cfg.r_degen)


def test_no_sprouts_at_zero_probability():
    assert vertical_sprout_seeds(_svc_sample(), dvc_config(), np.random.default_rng(0), p_sprout=0.0) == []


def test_every_eligible_node_sprouts_at_probability_one():
    f = _svc_sample()
    seeds = vertical_sprout_seeds(f, dvc_config(), np.random.default_rng(0), p_sprout=1.0)
    assert sorted(s.anchor for s in seeds) == np.nonzero(_eligible(f, svc_config()))[0].tolist()
    for s in seeds:
        d = np.subtract(s.end, s.start)
        assert np.allclose(d / np.linalg.norm(d), (0.0, 0.0, 1.0))
        assert np.allclose(s.start[:2], f.positions[s.anchor, :2])
        assert s.radius <= f.radii[s.anchor]


def test_no_eligible_nodes_raises():
    f = VesselForest((100, 100, 64))
    a = f.add_node((10, 10, 10), 22.5)
    f.add_node((20, 10, 10), 22.5, a)
    with pytest.raises(NoSproutsError):
        vertical_sprout_seeds(f, dvc_config(), np.random.default_rng(0), p_sprout=0.5)


# -- layer deformation --------------------------------------------------------


def _forest_in(extent=(200.0, 200.0, 64.0), n=30, seed=0):
    return random_forest(np.random.default_rng(seed), n, extent=extent)


def test_flat_surface_is_identity():
    f = _forest_in()
    g = deform_to_layers(f, np.zeros((11, 11)), 20.0)
    assert np.array_equal(g.positions, f.positions)


def test_constant_surface_translates():
    f = _forest_in()
    g = deform_to_layers(f, np.full((11, 11), 37.25), 20.0)
    assert np.array_equal(g.positions[:, :2], f.positions[:, :2])
    assert np.allclose(g.positions[:, 2] - f.positions[:, 2], 37.25, atol=1e-12)


def test_bilinear_offset():
    surf = np.zeros((3, 3))
    surf[1, 1], surf[2, 1], surf[1, 2], surf[2, 2] = 10.0, 20.0, 30.0, 60.0
    f = VesselForest((40, 40, 10))
    f.add_node((25.0, 35.0, 1.0), 1.0)
    # manual blend of the four samples around (1.25, 1.75) in grid units
    tx, ty = 0.25, 0.75
    oracle = (1 - tx) * (1 - ty) * 10 + tx * (1 - ty) * 20 + (1 - tx) * ty * 30 + tx * ty * 60
    g = deform_to_layers(f, surf, 20.0)
    assert g.positions[0, 2] - 1.0 == pytest.approx(oracle, abs=1e-12)


@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_deformation_preserves_structure(n, seed):
    f = _forest_in(n=n, seed=seed)
    surf = np.random.default_rng(seed).uniform(0, 80, (11, 11))
    g = deform_to_layers(f, surf, 20.0)
    assert len(g) == len(f)
    assert np.array_equal(g.parents, f.parents) and np.array_equal(g.radii, f.radii)
    assert np.array_equal(g.positions[:, :2], f.positions[:, :2])
    assert validate_forest(g).ok


def test_surface_too_small():
    with pytest.raises(ValueError):
        deform_to_layers(_forest_in(), np.zeros((3, 3)), 20.0)


# -- layer surfaces -----------------------------------------------------------


def test_surfaces_deterministic_and_ordered():
    a = synthesize_layer_surfaces((3200, 3200), 5)
    b = synthesize_layer_surfaces((3200, 3200), 5)
    c = synthesize_layer_surfaces((3200, 3200), 6)
    assert np.array_equal(a.gcl_height, b.gcl_height) and np.array_equal(a.inl_height, b.inl_height)
    assert not np.array_equal(a.gcl_height, c.gcl_height)
    assert np.all(a.inl_height - a.gcl_height > 0)
    # slabs cannot overlap
    assert a.min_separation >= 64.0


def test_surface_has_a_pit():
    s = synthesize_layer_surfaces((3200, 3200), 1)
    n = s.shape[0]
    centre = s.gcl_height[n // 2, n // 2]
    rim = np.concatenate([s.gcl_height[0], s.gcl_height[-1], s.gcl_height[:, 0], s.gcl_height[:, -1]])
    # depth grows along the beam axis: the pit is the deepest spot
    assert centre > rim.max()


def test_surface_file_round_trip(tmp_path):
    s = synthesize_layer_surfaces((800, 600), 3)
    s.save(tmp_path / "layers.raw")
    t = LayerSurfaces.load(tmp_path / "layers.raw")
    assert t.extent == s.extent and t.spacing == s.spacing
    assert np.allclose(t.gcl_height, s.gcl_height, atol=1e-4)
    assert np.allclose(t.inl_height, s.inl_height, atol=1e-4)


def test_surface_invariants_enforced():
    with pytest.raises(ValueError):
        LayerSurfaces((40, 40), 20.0, np.ones((3, 3)), np.zeros((3, 3)))


# -- whole retina -------------------------------------------------------------


def test_built_retina_shape(retina_result):
    res = retina_result
    f = res.forest
    assert validate_forest(f).ok
    assert len(f.roots) >= 8
    assert not res.faz.contains(f.positions).any()
    svc_z = f.positions[f.plexus == SVC, 2]
    dvc_z = f.positions[f.plexus == DVC, 2]
    assert len(dvc_z) > 0 and dvc_z.mean() > svc_z.mean()


def test_built_retina_slabs(retina_result):
    res = retina_result
    for part, cfg in ((res.svc.forest, svc_config()), (res.dvc.forest, dvc_config())):
        z = part.positions[:, 2]
        assert z.min() >= -1e-9 and z.max() <= cfg.omega[2] + 1e-9


def test_built_retina_deterministic(retina_result):
    from retina_synth.retina import simulate_retina

    again = simulate_retina(RetinaSpec(seed=11))
    assert again.forest.to_json() == retina_result.forest.to_json()
