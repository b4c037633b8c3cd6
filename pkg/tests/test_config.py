import glob
import json
import os

import pytest

from src.config import ExperimentConfig, apply_env_overrides, load_config, parse_config, strip_comments
from src.errors import ConfigError

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def issues_of(data, **kwargs):
    with pytest.raises(ConfigError) as exc:
        parse_config(data, env=kwargs.pop("env", {}), **kwargs)
    return exc.value.issues


def test_load_base_config(write_config, base_config):
    cfg = load_config(write_config(base_config), env={})
    assert isinstance(cfg, ExperimentConfig)
    assert cfg.scenario == "amplitude-sweep"
    assert cfg.seed == 11
    assert cfg.amplitude_sweep.amplitudes == [0.2, 0.3, 0.4, 0.5, 0.6]
    assert cfg.fit.multistart is True
    assert cfg.tau_grid().size == 40
    assert cfg.signal_params().omega == pytest.approx(7.766, rel=1e-3)


def test_ints_become_floats(base_config):
    base_config["physics"]["detuning"] = 140
    cfg = parse_config(base_config, env={})
    assert isinstance(cfg.physics.detuning, float)


def test_unknown_key(base_config):
    base_config["physics"]["colour"] = "blue"
    assert "physics.colour: unknown key" in issues_of(base_config)


def test_every_issue_is_reported(base_config):
    base_config["camera"]["sigma_s"] = "big"
    base_config["grid"]["points"] = 2.5
    base_config["extra"] = 1
    issues = issues_of(base_config)
    assert "camera.sigma_s: invalid type str" in issues
    assert "grid.points: invalid type float" in issues
    assert "extra: unknown key" in issues


def test_missing_seed(base_config):
    del base_config["seed"]
    assert "seed: required key missing" in issues_of(base_config)


def test_seed_argument_fills_and_wins(base_config):
    del base_config["seed"]
    assert parse_config(dict(base_config), env={}, seed=3).seed == 3
    base_config["seed"] = 11
    assert parse_config(base_config, env={"ACZ_SEED": "9"}, seed=4).seed == 4


def test_schema_version(base_config):
    base_config["schema_version"] = 2
    issues = issues_of(base_config)
    assert any(i.startswith("schema_version:") for i in issues)


@pytest.mark.parametrize("section, key, value", [
    ("physics", "contrast", 1.5),
    ("physics", "shift_mode", "rough"),
    ("grid", "points", 3),
    ("protocol", "sequence", "hahn"),
    ("camera", "total_time", 0.0),
])
def test_range_checks(base_config, section, key, value):
    base_config[section][key] = value
    assert any(i.startswith(f"{section}.{key}:") for i in issues_of(base_config))


def test_scenario_needs_its_section(base_config):
    del base_config["amplitude_sweep"]
    assert "amplitude_sweep: required for scenario 'amplitude-sweep'" in issues_of(base_config)


def test_comb_cutoff_below_nyquist(base_config):
    base_config["scenario"] = "comb-study"
    base_config["comb_study"] = {"start": 0.05, "stop": 2.0, "points": 40, "cutoff": 20.0}
    assert any(i.startswith("comb_study.cutoff:") for i in issues_of(base_config))


def test_comments_are_ignored(base_config):
    base_config["_comment"] = "top"
    base_config["physics"]["_comment_units"] = "MHz"
    assert parse_config(base_config, env={}).physics.detuning == 140.0
    assert strip_comments([{"_comment": 1, "a": 2}]) == [{"a": 2}]


def test_env_overrides(base_config):
    env = {"ACZ_PHYSICS__T2": "5.5", "ACZ_GRID__SPACING": "log", "HOME": "/root"}
    cfg = parse_config(base_config, env=env)
    assert cfg.physics.t2 == 5.5
    assert cfg.grid.spacing == "log"


def test_env_override_paths():
    data = {"physics": {"t2": 3.2}}
    applied = apply_env_overrides(data, {"ACZ_PHYSICS__T2": "null", "ACZ_CAMERA__SIGMA_S": "0.5"})
    assert applied == ["camera.sigma_s", "physics.t2"]
    assert data == {"physics": {"t2": None}, "camera": {"sigma_s": 0.5}}


def test_config_hash(base_config):
    a = parse_config(json.loads(json.dumps(base_config)), env={})
    b = parse_config(json.loads(json.dumps(base_config)), env={})
    assert a.config_hash() == b.config_hash()
    assert len(a.config_hash()) == 64
    base_config["seed"] = 12
    assert parse_config(base_config, env={}).config_hash() != a.config_hash()


def test_bad_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError) as exc:
        load_config(str(bad), env={})
    assert exc.value.issues[0].startswith(str(bad))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"), env={})


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(ROOT, "*_config.json"))))
def test_shipped_configs_load(path):
    cfg = load_config(path, env={})
    assert cfg.scenario in os.path.basename(path).replace("_", "-") or cfg.scenario == "sensitivity-scan"


def test_comb_baseline_degree_range(base_config):
    base_config["scenario"] = "comb-study"
    base_config["comb_study"] = {"baseline_degree": 12}
    assert any(i.startswith("comb_study.baseline_degree:") for i in issues_of(base_config))
