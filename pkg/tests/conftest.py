import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from retina_synth.angiogenesis import FieldGrid, ScalarField3D, SeedSegment, run_plexus
from retina_synth.retina import RetinaSpec, simulate_retina
from retina_synth.vessel_graph import VesselForest, svc_config

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")
logging.getLogger("numba").setLevel(logging.WARNING)


def random_forest(rng: np.random.Generator, n_nodes: int, extent=(100.0, 100.0, 100.0),
                  r_range=(1.0, 6.0), step=(4.0, 15.0)) -> VesselForest:
    """Random binary forest grown by attaching nodes to random open slots."""
    ext = np.asarray(extent, dtype=float)
    f = VesselForest(ext, 4.0)
    root = f.add_node(rng.uniform(0.2, 0.8, 3) * ext, rng.uniform(*r_range))
    for _ in range(n_nodes - 1):
        open_ = np.nonzero(f.n_children() < 2)[0]
        p = int(rng.choice(open_)) if rng.random() < 0.9 or len(f.roots) > 2 else None
        if p is None:
            f.add_node(rng.uniform(0.2, 0.8, 3) * ext, rng.uniform(*r_range))
            continue
        for _try in range(20):
            d = rng.normal(size=3)
            q = f.positions[p] + rng.uniform(*step) * d / np.linalg.norm(d)
            if np.all((q > 0) & (q < ext)):
                f.add_node(q, rng.uniform(*r_range), p)
                break
    assert root == 0
    return f


@pytest.fixture(scope="session")
def small_plexus():
    cfg = svc_config(omega=(800.0, 800.0, 64.0))
    seeds = [SeedSegment((0.0, 400.0, 32.0), (64.0, 400.0, 32.0), 22.5),
             SeedSegment((800.0, 300.0, 32.0), (736.0, 300.0, 32.0), 22.5)]
    mask = ScalarField3D.filled(FieldGrid.for_config(cfg), 1.0)
    return cfg, seeds, mask, run_plexus(cfg, seeds, mask, np.random.default_rng(0))


@pytest.fixture(scope="session")
def retina_result():
    return simulate_retina(RetinaSpec(seed=11))
