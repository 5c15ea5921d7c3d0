from __future__ import annotations

import math

import pytest

from ehsaging.config import ConfigError, ExperimentConfig
from pathlib import Path

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_build_reference_instance():
    cfg = ExperimentConfig.from_dict({})
    assert cfg.system.space.size == 5832
    assert cfg.bounds.is_unconstrained
    assert cfg.battery.q_nom == 8.0


@pytest.mark.parametrize("name", ["reference.yaml", "heavy_load.yaml"])
def test_shipped_configs_load(name):
    cfg = ExperimentConfig.load(CONFIGS / name)
    assert cfg.system.space.size == 5832
    assert math.isfinite(cfg.bounds.mean_charge)
    assert math.isinf(cfg.bounds.cycle_rate)


def test_heavy_load_parameters():
    cfg = ExperimentConfig.load(CONFIGS / "heavy_load.yaml")
    assert (cfg.load_params.phi, cfg.load_params.b) == (0.8, 12)
    assert (cfg.harvest_params.phi, cfg.harvest_params.b) == (0.9, 10)


@pytest.mark.parametrize(
    "data,key",
    [
        ({"sytem": {}}, "sytem"),
        ({"system": {"qmax": 3}}, "system.qmax"),
        ({"system": {"q_max": "eight"}}, "system.q_max"),
        ({"system": {"q_max": 2.5}}, "system.q_max"),
        ({"harvest": {"phi": 1.5, "b": 10}}, "harvest"),
        ({"harvest": {"rate": 0.5}}, "harvest.rate"),
        ({"load": {"phi": 0.9, "b": 2}}, "load"),
        ({"bounds": {"mean_charg": 3}}, "bounds.mean_charg"),
        ({"bounds": {"persistence": 2.0}}, "bounds"),
        ({"battery": {"a_coef": 1.0}}, "battery"),
        ({"battery": {"profile": "lfp"}}, "battery.profile"),
        ({"objective": "cube"}, "objective"),
        ({"theta": 1.5}, "theta"),
        ({"horizon": 0}, "horizon"),
        ({"runs": 0}, "runs"),
        ({"walk": {"tau_max": 3}}, "walk.tau_max"),
    ],
)
def test_errors_name_the_key(data, key):
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict(data)
    assert err.value.key.startswith(key)
    assert key in str(err.value)


def test_bounds_null_means_unconstrained():
    cfg = ExperimentConfig.from_dict({"bounds": {"mean_charge": None, "persistence": 0.1}})
    assert math.isinf(cfg.bounds.mean_charge) and cfg.bounds.persistence == 0.1


def test_battery_overrides_profile():
    cfg = ExperimentConfig.from_dict({"battery": {"profile": "illustrative", "d_coef": 0.0}})
    assert cfg.battery.d_coef == 0.0 and cfg.battery.a_coef == 1e-5
    full = dict(a_coef=1, b_coef=1, c_coef=1, d_coef=1, t_life=10, q_nom=4)
    assert ExperimentConfig.from_dict({"battery": full}).battery.t_life == 10


def test_emission_override():
    cfg = ExperimentConfig.from_dict({"harvest": {"phi": 0.5, "b": 2, "emissions": [{0: 1.0}, {1: 0.5, 2: 0.5}]}})
    assert cfg.system.harvest.emission.max_units() == 2


def test_hashes():
    a = ExperimentConfig.from_dict({})
    b = ExperimentConfig.from_dict({"bounds": {"mean_charge": 3}})
    c = ExperimentConfig.from_dict({"out": "/tmp/x"})
    assert a.model_hash == b.model_hash  # bounds do not change the state space
    assert a.config_hash != b.config_hash
    assert a.config_hash == c.config_hash  # output location is not part of the experiment


def test_yaml_syntax_error(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("system: [unclosed\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)


def test_json_accepted(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"system": {"q_max": 3, "w_max": 3, "y_levels": 4}, "theta": 0.3}')
    assert ExperimentConfig.load(p).system.space.size == 2 * 4 * 4 * 4 * 2 * 2


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg = ExperimentConfig.from_dict({"out": str(tmp_path / "from_config")})
    monkeypatch.setenv("EHSAGING_OUT", str(tmp_path / "from_env"))
    assert cfg.output_dir(str(tmp_path / "from_flag")).name == "from_flag"
    assert cfg.output_dir().name == "from_env"
    monkeypatch.delenv("EHSAGING_OUT")
    assert cfg.output_dir().name == "from_config"
