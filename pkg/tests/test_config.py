# Testing of configuration resolution and the resolved snapshot

import pytest

from routebench import config as cfg
from routebench.planners import IdmParams
from routebench.routegan import RouteGanConfig


def test_flatten():
    assert cfg.flatten({"planner": {"idm": {"v0": 0.3}}, "seed": 1}) == {"planner.idm.v0": 0.3, "seed": 1}
    assert cfg.flatten({"eval": {"seeds": [0, 1]}}) == {"eval.seeds": [0, 1]}
    assert cfg.flatten({}) == {}


def test_defaults_cover_dataclasses():
    assert cfg.routegan_config(cfg.DEFAULTS) == RouteGanConfig()
    assert IdmParams(**cfg.section(cfg.DEFAULTS, "planner.idm")) == IdmParams()
    assert cfg.DEFAULTS["routegan.alpha"] == 0.5
    assert cfg.DEFAULTS["routegan.lambda2"] == 10.0
    assert cfg.DEFAULTS["eval.episodes"] == 200
    assert cfg.scene_params(cfg.DEFAULTS) == {"lane_width_px": 12, "inner_radius": 0.3, "outer_radius": 0.6,
                                              "arms": 4}


def test_load_config_precedence(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('seed = 3\n[routegan]\nalpha = 1\nsteps = 10.0\n[eval]\nplanners = ["idm"]\n')
    config = cfg.load_config(str(path), {"seed": 5, "routegan.lr": None})
    assert config["seed"] == 5
    assert config["routegan.alpha"] == 1.0 and isinstance(config["routegan.alpha"], float)
    assert config["routegan.steps"] == 10 and isinstance(config["routegan.steps"], int)
    assert config["routegan.lr"] == cfg.DEFAULTS["routegan.lr"]
    assert config["eval.planners"] == ["idm"]
    assert cfg.load_config() == cfg.DEFAULTS


def test_load_config_errors(tmp_path):
    with pytest.raises(ValueError):
        cfg.load_config(overrides={"routegan.gamma": 1.0})
    with pytest.raises(ValueError):
        cfg.load_config(overrides={"sweep.joint": "yes"})
    with pytest.raises(ValueError):
        cfg.load_config(overrides={"eval.seeds": 3})
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 1\n")
    with pytest.raises(ValueError):
        cfg.load_config(str(bad))


def test_scene_size_follows_model_settings(tmp_path):
    assert "scene.width_px" not in cfg.DEFAULTS and "scene.height_px" not in cfg.DEFAULTS
    path = tmp_path / "scene.toml"
    path.write_text("[scene]\nwidth_px = 32\n")
    with pytest.raises(ValueError, match="scene.width_px"):
        cfg.load_config(str(path))
    path.write_text("[routegan]\nwidth_px = 32\nheight_px = 32\n")
    config = cfg.load_config(str(path))
    assert cfg.routegan_config(config).width_px == 32


def test_section():
    config = {"planner.idm.v0": 0.3, "planner.idm.T": 1.0, "planner.astar.horizon": 15}
    assert cfg.section(config, "planner.idm") == {"v0": 0.3, "T": 1.0}
    assert cfg.section(config, "planner.idm.") == {"v0": 0.3, "T": 1.0}


def test_output_root(monkeypatch):
    monkeypatch.delenv(cfg.OUTPUT_ROOT_VAR, raising=False)
    assert cfg.output_root() == "./runs"
    monkeypatch.setenv(cfg.OUTPUT_ROOT_VAR, "/tmp/bench")
    assert cfg.output_root() == "/tmp/bench"
    assert cfg.output_root("out") == "out"


def test_write_resolved_round_trip(tmp_path):
    config = cfg.load_config(overrides={"seed": 4, "planner.astar.accel_grid": [-0.1, 0.1]})
    path = cfg.write_resolved(config, str(tmp_path / "run"))
    assert path.endswith(cfg.RESOLVED_CONFIG)
    assert cfg.load_config(path) == config

    partial = cfg.write_resolved(config, str(tmp_path / "partial"), keys=["seed", "routegan.alpha"])
    with open(partial) as f:
        text = f.read()
    assert "seed = 4" in text
    assert "[routegan]" in text
    assert "planner" not in text
