# Testing of the routebench command line on a tiny configuration

import json
import logging
import os

import pandas as pd
import pytest
from pytest_unordered import unordered

from routebench import cli
from routebench import config as cfg
from routebench.cli import main
from routebench.routegan import METRIC_COLUMNS, NonFiniteLossError, RouteGanModel

CONFIG = "tests/data/tiny.toml"
EPISODES = "tests/data/episodes.jsonl"


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert main(["gen-data", "--config", CONFIG, "--out", str(root / "data")]) == cli.EXIT_OK
    assert main(["train", "--config", CONFIG, "--data", str(root / "data"), "--out", str(root / "train")]) == \
        cli.EXIT_OK
    return root


def test_gen_data(runs):
    files = os.listdir(runs / "data")
    assert {"episodes.jsonl", "manifest.json", cfg.RESOLVED_CONFIG} <= set(files)
    with open(runs / "data" / "episodes.jsonl") as f:
        assert len(f.readlines()) == 8
    resolved = cfg.load_config(str(runs / "data" / cfg.RESOLVED_CONFIG))
    assert resolved["seed"] == 1
    assert resolved["data.n_safe"] == 4


def test_train(runs):
    model, meta = RouteGanModel.load(str(runs / "train" / "checkpoint.json"))
    assert model.config.hidden == 8
    assert meta["extra"] == {"steps": 2}
    metrics = pd.read_csv(runs / "train" / "metrics.csv")
    assert list(metrics.columns) == list(METRIC_COLUMNS)
    assert len(metrics) == 2


def test_train_is_reproducible(runs, capsys):
    assert main(["train", "--config", CONFIG, "--data", str(runs / "data"), "--out", str(runs / "again"),
                 "--quiet"]) == cli.EXIT_OK
    digest = capsys.readouterr().out.strip()
    first, _ = RouteGanModel.load(str(runs / "train" / "checkpoint.json"))
    assert digest == first.hash


def test_train_logs_style_reconstruction(runs, caplog):
    caplog.set_level(logging.INFO, logger="routebench")
    assert main(["train", "--config", CONFIG, "--data", str(runs / "data"), "--out", str(runs / "logged")]) == \
        cli.EXIT_OK
    assert "Style reconstruction on training conditions" in caplog.text


def test_train_non_finite_loss(runs, monkeypatch):
    def failing(model, dataset, rng, **kwargs):
        error = NonFiniteLossError(0, {"road": float("nan")})
        error.metrics = pd.DataFrame(columns=list(METRIC_COLUMNS))
        raise error

    monkeypatch.setattr(cli, "train", failing)
    out = runs / "failed"
    assert main(["train", "--config", CONFIG, "--data", str(runs / "data"), "--out", str(out)]) == cli.EXIT_NUMERIC
    _, meta = RouteGanModel.load(str(out / "checkpoint.json"))
    assert meta["extra"] == {"failed_step": 0}
    assert os.path.exists(out / "metrics.csv")


def test_eval(runs):
    out = runs / "eval"
    assert main(["eval", "--config", CONFIG, "--checkpoint", str(runs / "train" / "checkpoint.json"),
                 "--out", str(out), "--quiet"]) == cli.EXIT_OK
    table = pd.read_csv(out / "report.csv")
    assert table["planner"].tolist() == ["data", "idm"]
    assert (table["n_q-2"] + table["invalid_q-2"]).tolist() == [1, 1]
    with open(out / "report.json") as f:
        assert json.load(f)["q_values"] == [-2.0, 2.0]


def test_sweep_and_render(runs):
    out = runs / "sweep"
    assert main(["sweep", "--config", CONFIG, "--checkpoint", str(runs / "train" / "checkpoint.json"),
                 "--out", str(out)]) == cli.EXIT_OK
    cells = [f"q1={a}_q2={b}.svg" for a in (-2, 0, 2) for b in (-2, 0, 2)]
    assert os.listdir(out) == unordered(cells + ["grid.svg", "rollouts.jsonl", cfg.RESOLVED_CONFIG])

    rendered = runs / "sweep_svg"
    assert main(["render", "--episodes", str(out / "rollouts.jsonl"), "--out", str(rendered)]) == cli.EXIT_OK
    assert len(os.listdir(rendered)) == 9


def test_render(tmp_path):
    assert main(["render", "--episodes", EPISODES, "--out", str(tmp_path / "all")]) == cli.EXIT_OK
    assert os.listdir(tmp_path / "all") == unordered(["episode_0001.svg", "episode_0002.svg"])
    assert main(["render", "--episodes", EPISODES, "--line", "2", "--out", str(tmp_path / "one")]) == cli.EXIT_OK
    assert os.listdir(tmp_path / "one") == ["episode_0002.svg"]
    with open(tmp_path / "one" / "episode_0002.svg") as f:
        assert "head-on" in f.read()
    assert main(["render", "--episodes", EPISODES, "--line", "3", "--out", str(tmp_path / "none")]) == cli.EXIT_USAGE


def test_usage_errors(tmp_path):
    assert main([]) == cli.EXIT_USAGE
    assert main(["--help"]) == cli.EXIT_OK
    assert main(["train", "--config", CONFIG]) == cli.EXIT_USAGE
    assert main(["train", "--config", CONFIG, "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == \
        cli.EXIT_USAGE
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert main(["render", "--episodes", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path)]) == cli.EXIT_USAGE

    bad = tmp_path / "bad.toml"
    bad.write_text("[routegan]\ngamma = 1.0\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_train_resolution_mismatch(runs, tmp_path):
    # A 32 x 32 model cannot run on the 64 x 64 dataset scenes
    small = tmp_path / "small.toml"
    with open(CONFIG) as f:
        small.write_text(f.read().replace("[routegan]\n", "[routegan]\nwidth_px = 32\nheight_px = 32\n"))
    assert main(["train", "--config", str(small), "--data", str(runs / "data"), "--out", str(tmp_path)]) == \
        cli.EXIT_USAGE
