import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from retina_synth.angiogenesis import GeometryError
from retina_synth.raster import (
    RasterPair,
    depth_slab,
    enface_projection,
    rasterize_forest,
    rasterize_volume,
    to_uint8,
)
from retina_synth.vessel_graph import VesselForest

from conftest import random_forest


def brute_force(forest, shape, spacing, origin=(0.0, 0.0, 0.0), edge=None):
    """Exhaustive per-voxel capsule distance, every voxel against every segment."""
    spacing = np.broadcast_to(np.asarray(spacing, float), (3,))
    edge = spacing.max() if edge is None else edge
    axes = [origin[d] + (np.arange(shape[d]) + 0.5) * spacing[d] for d in range(3)]
    c = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    image = np.zeros(len(c))
    label = np.zeros(len(c), dtype=np.uint8)
    a, b, r, _ = forest.segments()
    for s in range(len(r)):
        ab = b[s] - a[s]
        ll = ab @ ab
        t = np.clip((c - a[s]) @ ab / ll, 0.0, 1.0) if ll > 0 else np.zeros(len(c))
        d = np.linalg.norm(c - (a[s] + t[:, None] * ab), axis=1)
        label |= (d <= r[s]).astype(np.uint8)
        image = np.maximum(image, np.clip(1.0 - (d - r[s]) / edge, 0.0, 1.0))
    return image.reshape(shape), label.reshape(shape)


def small_forest(seed, n_segments=5, extent=32.0):
    rng = np.random.default_rng(seed)
    return random_forest(rng, n_segments + 1, extent=(extent,) * 3, r_range=(0.5, 4.0), step=(3.0, 12.0))


def test_empty_forest_empty_volume():
    v = rasterize_volume(VesselForest((32, 32, 32)), (32, 32, 32), 1.0)
    assert not v.image.any() and not v.label.any()


def test_centerline_voxel():
    f = VesselForest((32, 32, 32))
    a = f.add_node((2.5, 16.5, 16.5), 2.0)
    f.add_node((28.5, 16.5, 16.5), 2.0, a)
    v = rasterize_volume(f, (32, 32, 32), 1.0)
    assert np.all(v.image[2:29, 16, 16] == 1.0) and np.all(v.label[2:29, 16, 16] == 1)


@pytest.mark.parametrize("seed", range(50))
def test_matches_brute_force(seed):
    f = small_forest(seed)
    v = rasterize_volume(f, (32, 32, 32), 1.0)
    img, lab = brute_force(f, (32, 32, 32), 1.0)
    assert np.array_equal(v.label, lab)
    assert np.abs(v.image - img).max() < 1e-9


@given(st.integers(0, 2**32 - 1))
def test_anisotropic_matches_brute_force(seed):
    f = small_forest(seed, extent=32.0)
    shape, spacing = (16, 20, 8), (2.0, 1.6, 4.0)
    v = rasterize_volume(f, shape, spacing)
    img, lab = brute_force(f, shape, spacing)
    assert np.array_equal(v.label, lab)
    assert np.abs(v.image - img).max() < 1e-9


@given(st.integers(0, 2**32 - 1))
def test_label_within_image_support(seed):
    v = rasterize_volume(small_forest(seed), (32, 32, 32), 1.0)
    assert np.all(v.image[v.label == 1] >= 1.0 - 1e-9)
    assert np.all((v.image >= 0) & (v.image <= 1))


def _quantized_forest(seed):
    rng = np.random.default_rng(seed)
    f = small_forest(seed, extent=20.0)
    # dyadic coordinates keep whole-voxel shifts exact in floating point
    f._pos[: len(f)] = np.round(f.positions * 64) / 64
    f.domain = np.array([[0.0] * 3, [32.0] * 3])
    return f, rng.integers(0, 10, 3)


@given(st.integers(0, 2**32 - 1))
def test_whole_voxel_translation(seed):
    f, k = _quantized_forest(seed)
    g = f.copy()
    g._pos[: len(g)] += k.astype(float)
    v = rasterize_volume(f, (32, 32, 32), 1.0)
    w = rasterize_volume(g, (32, 32, 32), 1.0)
    sx, sy, sz = (slice(0, 32 - int(n)) for n in k)
    tx, ty, tz = (slice(int(n), 32) for n in k)
    assert np.array_equal(w.label[tx, ty, tz], v.label[sx, sy, sz])
    # distances come from absolute coordinates, so allow rounding in the ramp
    assert np.abs(w.image[tx, ty, tz] - v.image[sx, sy, sz]).max() < 1e-12


def test_domain_must_be_covered():
    with pytest.raises(GeometryError):
        rasterize_volume(_one_segment(64), (32, 32, 32), 1.0)


def _one_segment(extent):
    f = VesselForest((extent,) * 3)
    a = f.add_node((1, 1, 1), 1.0)
    f.add_node((3, 3, 3), 1.0, a)
    return f


def test_forest_grid_spacing():
    f = _one_segment(64)
    v = rasterize_forest(f, (32, 16, 8))
    assert v.spacing == (2.0, 4.0, 8.0) and v.shape == (32, 16, 8)


# -- projections and slabs ----------------------------------------------------


def test_single_bright_voxel_projection():
    img = np.zeros((5, 6, 7))
    lab = np.zeros((5, 6, 7), dtype=np.uint8)
    img[2, 4, 3], lab[2, 4, 3] = 0.7, 1
    p = enface_projection(RasterPair(img, lab, (1, 1, 1)))
    assert p.shape == (5, 6) and p.image[2, 4] == 0.7 and p.label[2, 4] == 1
    assert p.image.sum() == 0.7 and p.label.sum() == 1
    z = enface_projection(RasterPair(np.zeros((3, 3, 3)), np.zeros((3, 3, 3)), (1, 1, 1)))
    assert not z.image.any() and not z.label.any()


@given(st.integers(0, 2**32 - 1))
def test_projection_of_flat_forest_is_its_footprint(seed):
    f = small_forest(seed)
    # every node on the same voxel-centre plane: the nearest voxel of each
    # column is in that plane, so the MIP label is the 2D capsule footprint
    f._pos[: len(f), 2] = 16.5
    p = enface_projection(rasterize_volume(f, (32, 32, 32), 1.0))
    _, lab = brute_force(f, (32, 32, 1), 1.0, origin=(0.0, 0.0, 16.0))
    assert np.array_equal(p.label, lab[:, :, 0])


def _volume(seed=0):
    return rasterize_volume(small_forest(seed), (32, 32, 32), 1.0)


def test_full_range_slab_is_identity():
    v = _volume()
    s = depth_slab(v, 0.0, 32.0)
    assert np.array_equal(s.image, v.image) and np.array_equal(s.label, v.label) and s.origin == v.origin


@given(st.integers(0, 2**32 - 1), st.floats(0.6, 31.4))
def test_complementary_slabs_rebuild_projection(seed, cut):
    v = _volume(seed)
    top, bottom = depth_slab(v, 0.0, cut), depth_slab(v, cut, 32.0)
    assert top.shape[2] + bottom.shape[2] == 32
    assert bottom.origin[2] == top.origin[2] + top.shape[2]
    full = enface_projection(v)
    both = np.maximum(enface_projection(top).image, enface_projection(bottom).image)
    assert np.array_equal(both, full.image)


def test_upper_slab_excludes_deep_vessels():
    f = VesselForest((32, 32, 32))
    a = f.add_node((4, 8, 6), 1.5)
    f.add_node((28, 8, 6), 1.5, a)
    b = f.add_node((4, 20, 26), 1.5)
    f.add_node((28, 20, 26), 1.5, b)
    top = depth_slab(rasterize_volume(f, (32, 32, 32), 1.0), 0.0, 16.0)
    assert top.label[:, 8, :].any() and not top.label[:, 20, :].any()


def test_empty_slab_rejected():
    with pytest.raises(ValueError):
        depth_slab(_volume(), 10.0, 10.0)
    with pytest.raises(ValueError):
        depth_slab(_volume(), 40.0, 50.0)


# -- files --------------------------------------------------------------------


def test_raw_round_trip(tmp_path):
    v = _volume(3)
    v.save_raw(tmp_path / "v.raw", tmp_path / "l.raw")
    meta = json.loads((tmp_path / "v.raw.json").read_text())
    assert meta["shape"] == [32, 32, 32] and meta["dtype"] == "<f4" and meta["order"] == "C"
    assert (tmp_path / "v.raw").stat().st_size == 4 * 32**3
    w = RasterPair.load_raw(tmp_path / "v.raw", tmp_path / "l.raw")
    assert np.array_equal(w.label, v.label)
    assert np.array_equal(w.image, v.image.astype(np.float32).astype(float))
    # z is the fastest axis on disk
    flat = np.fromfile(tmp_path / "v.raw", dtype="<f4")
    assert flat[1] == np.float32(v.image[0, 0, 1])


def test_png_round_trip(tmp_path):
    p = enface_projection(_volume(4))
    p.save_png(tmp_path / "i.png", tmp_path / "l.png")
    q = RasterPair.load_png(tmp_path / "i.png", tmp_path / "l.png")
    assert np.array_equal(to_uint8(q.image), to_uint8(p.image))
    assert np.array_equal(q.label, p.label)
    with pytest.raises(GeometryError):
        _volume().save_png(tmp_path / "x.png", tmp_path / "y.png")


def test_pair_validation():
    with pytest.raises(GeometryError):
        RasterPair(np.zeros((2, 2)), np.zeros((2, 3)), (1, 1))
    with pytest.raises(ValueError):
        RasterPair(np.full((2, 2), 1.5), np.zeros((2, 2)), (1, 1))
    with pytest.raises(ValueError):
        RasterPair(np.zeros((2, 2)), np.full((2, 2), 2), (1, 1))
