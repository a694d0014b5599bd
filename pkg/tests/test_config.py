import json
from pathlib import Path

import pytest
import yaml

from delaybsde.config import ConfigError, ExperimentConfig, config_from_dict, load_config
from delaybsde.generators import Affine, LinearY

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert isinstance(cfg, ExperimentConfig)


def test_defaults():
    cfg = config_from_dict({})
    assert cfg.grid.T == 1.0 and cfg.grid.n_steps == 50 and cfg.n_paths == 10000
    assert cfg.beta == "optimize" and cfg.fixed_beta() is None


@pytest.mark.parametrize("data", [
    {"n_path": 10},
    {"grid": {"T": 1.0, "steps": 5}},
    {"solver": {"tolerance": 1e-3}},
    {"alpha": {"type": "dirac", "v": 0.5}},
    {"alpha": {"type": "weighted", "atoms": [[-0.2, 0.0]]}},
    {"generator": {"name": "quadratic"}},
    {"generator": {"name": "linear_y", "coefficients": {"c": 1.0, "d": 2.0}}},
    {"terminal": {"name": "call"}},
    {"beta": -1.0},
    {"beta": "fast"},
    {"n_paths": 1},
    {"solver": {"scheme": "euler"}},
    {"malliavin": {"marks": [3]}},
    {"output": {"format": "xml"}},
])
def test_rejects_bad_configs(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_yaml_exponent_strings_coerced(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("solver: {tol: 1e-14}\nbeta: 2e0\n")
    cfg = load_config(p)
    assert cfg.solver.tol == 1e-14 and cfg.beta == 2.0


def test_generator_gets_model_mass():
    cfg = config_from_dict({"model": {"marks": [[1.0, 2.0], [0.5, 4.0]]},
                            "generator": {"name": "affine", "coefficients": {"c": 0.5}}})
    gen = cfg.make_generator()
    assert isinstance(gen, Affine) and gen.m_total == pytest.approx(3.0)
    assert gen.lipschitz_K == pytest.approx(0.25 * 3.0)


def test_hash_is_stable_and_sensitive():
    a = config_from_dict({"generator": {"name": "linear_y", "coefficients": {"c": 0.5}}})
    b = config_from_dict({"generator": {"name": "linear_y", "coefficients": {"c": 0.5}}})
    assert a.config_hash() == b.config_hash()
    assert a.with_seed(7).config_hash() != a.config_hash()
    assert isinstance(a.make_generator(), LinearY)


def test_dict_roundtrip_through_json():
    cfg = load_config(CONFIGS[0])
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_manifest_embedding(tmp_path):
    cfg = load_config(CONFIGS[0])
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps({"config_hash": cfg.config_hash(), "config": cfg.to_dict()}))
    assert load_config(p) == cfg


def test_malformed_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("grid: {T: 1.0,\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_solver_overrides():
    cfg = config_from_dict({"solver": {"degree": 3}})
    assert cfg.solver_config(scheme="plain").degree == 3
    assert cfg.solver_config(scheme="plain").scheme == "plain"


def test_yaml_dump_roundtrip(tmp_path):
    cfg = config_from_dict({"model": {"marks": [[1.0, 2.0]]}, "malliavin": {"enabled": True, "marks": [0, "brownian"]}})
    p = tmp_path / "x.yaml"
    p.write_text(yaml.safe_dump(cfg.to_dict()))
    assert load_config(p) == cfg
