# Testing of closed-loop rollouts, the collision-rate table and latent sweeps

import json
import math

import numpy as np
import pandas as pd
import pytest

from routebench import sim
from routebench.geometry import Trajectory
from routebench.planners import DataPlanner, Planner, PlannerOutput, RouteGanPlanner
from routebench.routegan import NoiseCode, RouteGanConfig, RouteGanModel, StyleCode
from routebench.scene import Case, SceneKind, ScenarioSpec, make_scene, sample_scenario
from routebench.sim import EvaluationReport, RolloutResult


def straight(start, velocity, n=101):
    return np.asarray(start, float) + np.arange(n)[:, None] * np.asarray(velocity, float)


def make_spec(start1, velocity1, start2, velocity2, n=101):
    p1, p2 = straight(start1, velocity1, n), straight(start2, velocity2, n)
    return ScenarioSpec(Case.III, SceneKind.INTERSECTION, "intersection", p1[0], p2[0], p1, p2,
                        Trajectory(p1), Trajectory(p2), p2[-1])


class Broken(Planner):
    def plan(self, inp):
        raise RuntimeError("boom")


class Short(Planner):
    def plan(self, inp):
        return PlannerOutput(np.repeat(inp.position[None], 2, axis=0))


@pytest.fixture(scope="module")
def model():
    return RouteGanModel.create(RouteGanConfig(d_h=8, hidden=8, embed_dim=8, z_dim=4), seed=0)


@pytest.fixture(scope="module")
def scenes():
    return [make_scene(SceneKind.STRAIGHT), make_scene(SceneKind.INTERSECTION)]


@pytest.fixture(scope="module")
def scenario(scenes):
    return sample_scenario(scenes[1], Case.III, np.random.default_rng(1), steps=20)


def test_data_against_data_follows_references():
    spec = make_spec((-0.5, 0.0), (0.01, 0.0), (-0.5, 0.2), (0.01, 0.0))
    result = sim.rollout_pair(spec, DataPlanner(), DataPlanner(), T_max=30)
    assert result.valid and not result.collision
    assert result.collision_time is None
    assert len(result.x1) == len(result.x2) == 31
    assert np.array_equal(result.x1.positions, spec.v1_reference.positions[:31])
    assert np.array_equal(result.x2.positions, spec.v2_reference.positions[:31])
    assert result.min_distance == pytest.approx(0.2)
    assert result.to_episode("intersection").source == "rollout"


def test_collision_ends_rollout():
    # Both reach the origin at step 25; the discs overlap from step 23
    spec = make_spec((-0.5, 0.0), (0.02, 0.0), (0.0, -0.5), (0.0, 0.02))
    result = sim.rollout_pair(spec, DataPlanner(), DataPlanner(), T_max=100)
    assert result.collision
    assert result.collision_time == 23
    assert len(result.x1) == 24
    assert result.min_distance < 2 * 0.03


def test_collision_at_start_and_empty_horizon():
    spec = make_spec((0.0, 0.0), (0.01, 0.0), (0.01, 0.0), (0.01, 0.0))
    result = sim.rollout_pair(spec, Broken(), Broken())
    assert result.collision and result.collision_time == 0
    assert len(result.x1) == 1

    spec = make_spec((-0.5, 0.0), (0.01, 0.0), (-0.5, 0.2), (0.01, 0.0))
    result = sim.rollout_pair(spec, DataPlanner(), DataPlanner(), T_max=0)
    assert not result.collision and result.valid
    assert np.array_equal(result.x1.positions, [spec.v1_start])

    odd = sim.rollout_pair(spec, DataPlanner(), DataPlanner(), T_max=7)
    assert len(odd.x1) == 8
    with pytest.raises(ValueError):
        sim.rollout_pair(spec, DataPlanner(), DataPlanner(), T_max=-1)


def test_planner_failure_marks_rollout_invalid():
    spec = make_spec((-0.5, 0.0), (0.01, 0.0), (-0.5, 0.2), (0.01, 0.0))
    result = sim.rollout_pair(spec, DataPlanner(), Broken(), T_max=20)
    assert not result.valid
    assert result.error.startswith("RuntimeError")
    assert not result.collision

    result = sim.rollout_pair(spec, Short(), DataPlanner(), T_max=20)
    assert not result.valid
    assert "returned 2 positions" in result.error


def bernoulli_runner(task):
    p = 0.1 * (task.q1 + 2.0) + 0.05
    rng = np.random.default_rng([task.seed, task.episode, int(round((task.q1 + 2.0) * 10))])
    empty = Trajectory(np.zeros((1, 2)))
    return RolloutResult(empty, empty, bool(rng.random() < p), None, 0.0, False, False)


def test_evaluate_table_estimates_rates(model, scenes):
    report = sim.evaluate_table(model, {"data": "data"}, scenes, n_episodes=300, T_max=30,
                                runner=bernoulli_runner)
    assert report.q_values == list(sim.Q_VALUES)
    for q in sim.Q_VALUES:
        p = 0.1 * (q + 2.0) + 0.05
        sigma = math.sqrt(p * (1 - p) / 300)
        assert abs(report.rate("data", q) - p) < 4 * sigma
    assert report.cells["n"].tolist() == [300] * 5
    assert report.cells["invalid_n"].tolist() == [0] * 5

    threaded = sim.evaluate_table(model, {"data": "data"}, scenes, n_episodes=300, T_max=30,
                                  runner=bernoulli_runner, workers=4)
    pd.testing.assert_frame_equal(report.cells, threaded.cells)
    with pytest.raises(ValueError):
        report.rate("idm", 0.0)


def test_evaluate_table_uses_common_scenarios(model, scenes):
    seen = []

    def runner(task):
        seen.append(task)
        return bernoulli_runner(task)

    sim.evaluate_table(model, {"a": "data", "b": "idm"}, scenes, q_values=(-1.0, 1.0), n_episodes=3, seeds=(0, 1),
                       T_max=30, runner=runner)
    assert len(seen) == 2 * 2 * 3 * 2
    for seed in (0, 1):
        for e in range(3):
            same = [t for t in seen if t.seed == seed and t.episode == e]
            assert len(same) == 4
            assert all(t.scenario is same[0].scenario for t in same)
            assert all(np.array_equal(t.z, same[0].z) for t in same)
    assert not np.array_equal(seen[0].scenario.v2_reference.positions, seen[1].scenario.v2_reference.positions)


def test_evaluate_table_without_valid_episodes(model, scenes):
    def runner(task):
        result = bernoulli_runner(task)
        result.valid = False
        return result

    report = sim.evaluate_table(model, {"data": "data"}, scenes, q_values=(0.0,), n_episodes=4, T_max=30,
                                runner=runner)
    assert math.isnan(report.rate("data", 0.0))
    assert report.cells["invalid_n"].tolist() == [4]

    empty = sim.evaluate_table(model, {"data": "data"}, scenes, q_values=(0.0,), n_episodes=0)
    assert math.isnan(empty.rate("data", 0.0))
    with pytest.raises(ValueError):
        sim.evaluate_table(model, {}, scenes)
    with pytest.raises(ValueError):
        sim.evaluate_table(model, {"data": "data"}, [])


def test_evaluate_table_end_to_end(model, scenes, tmp_path):
    start = model.hash
    report = sim.evaluate_table(model, {"data": "data", "idm": "idm"}, scenes, q_values=(-2.0, 2.0), n_episodes=2,
                                T_max=20)
    assert model.hash == start
    assert report.planners == ["data", "idm"]
    assert (report.cells["n"] + report.cells["invalid_n"]).tolist() == [2] * 4
    assert report.to_frame().shape == (2, 2)

    report.to_csv(str(tmp_path / "report.csv"))
    table = pd.read_csv(tmp_path / "report.csv")
    assert list(table.columns) == ["planner", "rate_q-2", "n_q-2", "invalid_q-2", "rate_q2", "n_q2", "invalid_q2"]
    assert table["planner"].tolist() == ["data", "idm"]

    report.to_json(str(tmp_path / "report.json"))
    restored = EvaluationReport.from_json(str(tmp_path / "report.json"))
    assert restored.seeds == [0] and restored.n_episodes == 2
    assert np.allclose(restored.cells["rate"], report.cells["rate"], equal_nan=True)


def test_evaluation_report_nan_in_json(tmp_path):
    cells = pd.DataFrame([{"planner": "idm", "q": 0.0, "collisions": 0, "n": 0, "invalid_n": 3,
                           "rate": float("nan")}])
    path = str(tmp_path / "report.json")
    EvaluationReport(cells, [0], 3, [0.0]).to_json(path)
    with open(path) as f:
        assert json.load(f)["cells"][0]["rate"] is None
    assert math.isnan(EvaluationReport.from_json(path).rate("idm", 0.0))


def test_sweep_values():
    assert sim.sweep_values() == [-2.0, -1.0, 0.0, 1.0, 2.0]
    assert sim.sweep_values(0.0, 1.0, 0.25) == [0.0, 0.25, 0.5, 0.75, 1.0]
    with pytest.raises(ValueError):
        sim.sweep_values(1.0, 0.0)
    with pytest.raises(ValueError):
        sim.sweep_values(step=0.0)


def test_latent_sweep(model, scenario, scenes):
    grid = sim.latent_sweep(model, scenario, scenes[1], T_max=20)
    assert len(grid) == 25
    assert grid.cells[(-2.0, 1.0)].name == "q1=-2_q2=1"
    assert grid.min_distances().shape == (5, 5)
    assert not grid.min_distances().isna().any().any()

    # The (0, 0) cell is the plain rollout with zero style and zero noise
    again = sim.rollout_pair(scenario, RouteGanPlanner(model, StyleCode(np.zeros(2)), NoiseCode(np.zeros(4))),
                             DataPlanner(), scenes[1], 20, s=model.config.s)
    assert np.array_equal(grid.cells[(0.0, 0.0)].x1.positions, again.x1.positions)

    with pytest.raises(ValueError):
        sim.latent_sweep(model, scenario, scenes[1], dims=(0, 0))
    with pytest.raises(ValueError):
        sim.latent_sweep(model, scenario, scenes[1], dims=(0, 2))


def test_joint_sweep(model, scenario, scenes):
    grid = sim.latent_sweep(model, scenario, scenes[1], dims=(0, 0), values=[-1.0, 1.0], joint=True, T_max=10)
    assert len(grid) == 4
    assert grid.cells[(1.0, -1.0)].name == "q1=1_v2_q1=-1"
    assert grid.joint

    result = sim.joint_generation(model, scenario, scenes[1], StyleCode([1.0, 0.0]), StyleCode([-1.0, 0.0]),
                                  NoiseCode(np.zeros(4)), NoiseCode(np.zeros(4)), T_max=10)
    assert np.array_equal(result.x1.positions, grid.cells[(1.0, -1.0)].x1.positions)
    assert np.array_equal(result.x1.positions[0], scenario.v1_start)
    assert np.array_equal(result.x2.positions[0], scenario.v2_start)


def test_joint_generation_is_mirror_symmetric(model, scenario, scenes):
    swapped = ScenarioSpec(scenario.case, scenario.kind, scenario.scene_id, scenario.v2_start, scenario.v1_start,
                           scenario.v2_route, scenario.v1_route, scenario.v2_reference, scenario.v1_reference,
                           scenario.v1_goal)
    rng = np.random.default_rng(7)
    q1, q2 = StyleCode([1.5, -0.5]), StyleCode([-1.0, 0.5])
    z1, z2 = NoiseCode.sample(rng, 4), NoiseCode.sample(rng, 4)
    forward = sim.joint_generation(model, scenario, scenes[1], q1, q2, z1, z2, T_max=15)
    mirrored = sim.joint_generation(model, swapped, scenes[1], q2, q1, z2, z1, T_max=15)
    assert forward.valid and mirrored.valid
    assert np.array_equal(forward.x1.positions, mirrored.x2.positions)
    assert np.array_equal(forward.x2.positions, mirrored.x1.positions)
    assert forward.collision_time == mirrored.collision_time


def test_dump_rollouts(tmp_path):
    spec = make_spec((-0.5, 0.0), (0.01, 0.0), (-0.5, 0.2), (0.01, 0.0))
    result = sim.rollout_pair(spec, DataPlanner(), DataPlanner(), T_max=10, name="plain")
    path = str(tmp_path / "rollouts.jsonl")
    sim.dump_rollouts([result, result], path, "intersection", s=5)
    with open(path) as f:
        records = [json.loads(line) for line in f]
    assert len(records) == 2
    assert records[0]["name"] == "plain"
    assert records[0]["stride"] == 5
    assert records[0]["collision"] is False
    assert len(records[0]["x1"]) == 11
