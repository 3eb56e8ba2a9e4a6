import pytest
from hypothesis import given, strategies as st

from retina_synth.config import ConfigError, RunConfig, parse_config, parse_config_text
from retina_synth.raster import DEFAULT_SHAPE_3D
from retina_synth.vessel_graph import dvc_config, svc_config


def test_empty_text_gives_defaults():
    cfg = parse_config_text("")
    assert cfg.n_samples == 1 and cfg.master_seed == 0 and cfg.workers == 1
    assert cfg.retina.svc == svc_config() and cfg.retina.dvc == dvc_config()
    assert cfg.raster.shape == DEFAULT_SHAPE_3D
    assert cfg.output.format == "png" and cfg.output.write_2d and not cfg.output.write_3d


def test_printed_config_parses_back():
    cfg = RunConfig()
    again = parse_config_text(cfg.to_yaml())
    assert again.to_dict() == cfg.to_dict() and again.digest() == cfg.digest()


def test_unknown_key_reports_line():
    text = "n_samples: 2\nretina:\n  faz_radius: 300\n  fooo: 1\n"
    with pytest.raises(ConfigError, match=r"<string>:4: retina\.fooo: unknown key 'fooo'"):
        parse_config_text(text)


def test_unknown_plexus_key_reports_line():
    with pytest.raises(ConfigError, match=r":3: retina\.svc\.gama"):
        parse_config_text("retina:\n  svc:\n    gama: 2.0\n")


@pytest.mark.parametrize("text, key", [
    ("n_samples: -3\n", "n_samples"),
    ("n_samples: 0\n", "n_samples"),
    ("workers: 0\n", "workers"),
    ("master_seed: -1\n", "master_seed"),
    ("n_samples: 2.5\n", "n_samples"),
    ("retina:\n  svc:\n    theta_c: 0.9\n", "theta_c"),
    ("raster:\n  shape: [64, 64]\n", "raster.shape"),
    ("output:\n  format: tiff\n", "output.format"),
    ("output:\n  write_3d: true\n", "output.write_3d"),
    ("retina:\n  faz_radius: 5000\n", "faz_radius"),
])
def test_invalid_values_rejected(text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config_text(text)


def test_yaml_syntax_error_has_position():
    with pytest.raises(ConfigError, match=r"<string>:2:"):
        parse_config_text("a: 1\n b: [\n")


def test_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("n_samples: 1\nn_samples: 2\n")


def test_partial_plexus_keeps_other_defaults():
    cfg = parse_config_text("retina:\n  dvc:\n    lambda_g: 0.5\n")
    assert cfg.retina.dvc.lambda_g == 0.5
    assert cfg.retina.dvc.gamma == dvc_config().gamma


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="nope.yaml"):
        parse_config(tmp_path / "nope.yaml")


def test_relative_surface_path_resolves_to_config_dir(tmp_path):
    (tmp_path / "run.yaml").write_text("retina:\n  surfaces: layers.raw\n")
    cfg = parse_config(tmp_path / "run.yaml")
    assert cfg.base_dir == tmp_path


@given(st.integers(0, 2**64 - 1), st.integers(1, 10**6))
def test_digest_ignores_workers_and_dir(seed, workers):
    a = RunConfig(master_seed=seed)
    b = RunConfig(master_seed=seed, workers=workers)
    b.output.dir = "elsewhere"
    assert a.digest() == b.digest()
    c = RunConfig(master_seed=(seed + 1) % 2**64)
    assert c.digest() != a.digest()
