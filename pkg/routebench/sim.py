"""
Closed-loop two-vehicle simulation: lock-step rollouts with disc collision checks, the style-sweep
collision-rate table, joint RouteGAN-RouteGAN generation and latent-space sweeps.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from logger.logger import logger
from routebench.data import COLLISION_RADIUS, CRITICAL_MARGIN, InteractionEpisode
from routebench.geometry import Trajectory, heading_of
from routebench.planners import DataPlanner, Planner, PlannerInput, RouteGanPlanner, make_planner
from routebench.routegan import NoiseCode, RouteGanModel, StyleCode
from routebench.scene import Case, Scene, ScenarioSpec, on_road_mask, sample_scenario

Q_VALUES = (-2.0, -1.0, 0.0, 1.0, 2.0)
T_MAX = 100


@dataclass
class RolloutResult:
    """
    Realized trajectories of V1 (adversary slot) and V2 (tested slot) and what happened between them
    """
    x1: Trajectory
    x2: Trajectory
    collision: bool
    collision_time: Optional[int]
    min_distance: float
    offroad_v1: bool
    offroad_v2: bool
    valid: bool = True
    error: Optional[str] = None
    name: str = ""

    def to_episode(self, scene_id: str, r: float = COLLISION_RADIUS,
                   margin: float = CRITICAL_MARGIN) -> InteractionEpisode:
        return InteractionEpisode.from_trajectories(self.x1, self.x2, scene_id, r, margin, "rollout")


def _heading(history: List[np.ndarray], reference: Trajectory) -> float:
    if len(history) >= 2 and np.any(history[-1] != history[-2]):
        return heading_of(history[-1] - history[-2])
    ref = reference.positions
    moving = np.flatnonzero(np.hypot(*np.diff(ref, axis=0).T) > 0) if len(ref) > 1 else []
    return heading_of(ref[moving[0] + 1] - ref[moving[0]]) if len(moving) else 0.0


def _summarize(x1: List[np.ndarray], x2: List[np.ndarray], dt: float, r: float, scene: Optional[Scene],
               collision_time: Optional[int], name: str, error: Optional[str] = None) -> RolloutResult:
    p1, p2 = np.array(x1), np.array(x2)
    distances = np.hypot(*(p1 - p2).T)
    offroad1 = bool(scene is not None and not on_road_mask(scene, p1).all())
    offroad2 = bool(scene is not None and not on_road_mask(scene, p2).all())
    return RolloutResult(Trajectory(p1, dt), Trajectory(p2, dt), collision_time is not None, collision_time,
                         float(distances.min()), offroad1, offroad2, error is None, error, name)


def rollout_pair(scenario: ScenarioSpec, planner_v1: Planner, planner_v2: Planner, scene: Optional[Scene] = None,
                 T_max: int = T_MAX, r: float = COLLISION_RADIUS, dt: Optional[float] = None, s: int = 5,
                 name: str = "") -> RolloutResult:
    """
    Lock-step closed loop: every s steps both planners produce their next s positions from the current
    observations, then both vehicles advance one dt at a time. Collision (centre distance < 2r) is checked
    at every timestep including t = 0 and ends the rollout. A planner exception marks the rollout invalid.

    :param scenario:    Starts, references and goal
    :param planner_v1:  Adversary slot
    :param planner_v2:  Tested slot
    :param scene:       Scene for planners that need it and for off-road flags
    :param T_max:       Horizon in timesteps (0 gives start-only trajectories)
    :param r:           Disc radius of each vehicle
    :param dt:          Timestep (default that of the V2 reference)
    :param s:           Replanning period
    :param name:        Label kept in the result
    :return:            RolloutResult
    """
    if T_max < 0:
        raise ValueError(f"T_max must be non-negative, got {T_max}")
    if s <= 0:
        raise ValueError(f"s must be positive, got {s}")
    dt = scenario.v2_reference.dt if dt is None else float(dt)
    x1, x2 = [np.asarray(scenario.v1_start, float)], [np.asarray(scenario.v2_start, float)]
    if float(np.hypot(*(x1[0] - x2[0]))) < 2.0 * r:
        return _summarize(x1, x2, dt, r, scene, 0, name)
    if T_max == 0:
        return _summarize(x1, x2, dt, r, scene, None, name)
    try:
        planner_v1.reset(scenario, "V1", scene)
        planner_v2.reset(scenario, "V2", scene)
        t = 0
        while t < T_max:
            plans = []
            for planner, own, other, reference in ((planner_v1, x1, x2, scenario.v1_reference),
                                                   (planner_v2, x2, x1, scenario.v2_reference)):
                inp = PlannerInput(own[-1], _heading(own, reference), np.array(own), np.array(other), reference,
                                   t, dt, s)
                out = planner.plan(inp)
                if len(out) != s:
                    raise RuntimeError(f"{planner!r} returned {len(out)} positions, expected {s}")
                plans.append(out.positions)
            for k in range(min(s, T_max - t)):
                x1.append(plans[0][k])
                x2.append(plans[1][k])
                t += 1
                if float(np.hypot(*(x1[-1] - x2[-1]))) < 2.0 * r:
                    return _summarize(x1, x2, dt, r, scene, t, name)
    except Exception as ex:
        logger.debug(f"Rollout {name} invalid: {ex}")
        return _summarize(x1, x2, dt, r, scene, None, name, f"{type(ex).__name__}: {ex}")
    return _summarize(x1, x2, dt, r, scene, None, name)


############################################################################################
#                                                                                          #
#                                      EVALUATION TABLE                                    #
#                                                                                          #
############################################################################################

@dataclass
class EvaluationReport:
    """
    cells:  one row per (planner, q) with collisions, n (valid episodes), invalid_n and rate (NaN when n = 0)
    seeds:  seeds the episodes were drawn from
    """
    cells: pd.DataFrame
    seeds: List[int]
    n_episodes: int
    q_values: List[float] = field(default_factory=lambda: list(Q_VALUES))

    def rate(self, planner: str, q: float) -> float:
        row = self.cells[(self.cells["planner"] == planner) & np.isclose(self.cells["q"], q)]
        if row.empty:
            raise ValueError(f"No cell for planner `{planner}` and q={q}")
        return float(row["rate"].iloc[0])

    @property
    def planners(self) -> List[str]:
        return list(dict.fromkeys(self.cells["planner"]))

    def to_frame(self) -> pd.DataFrame:
        """
        Collision rates, rows = planners, columns = q values
        """
        frame = self.cells.pivot(index="planner", columns="q", values="rate")
        return frame.reindex(index=self.planners, columns=self.q_values)

    def to_csv(self, path: str) -> None:
        """
        One row per planner; for every q the columns rate_q<q>, n_q<q>, invalid_q<q>
        """
        rows = []
        for planner in self.planners:
            row = {"planner": planner}
            for q in self.q_values:
                cell = self.cells[(self.cells["planner"] == planner) & np.isclose(self.cells["q"], q)].iloc[0]
                row[f"rate_q{q:g}"] = cell["rate"]
                row[f"n_q{q:g}"] = int(cell["n"])
                row[f"invalid_q{q:g}"] = int(cell["invalid_n"])
            rows.append(row)
        pd.DataFrame(rows).to_csv(path, index=False, float_format="%.6f")

    def to_json(self, path: str) -> None:
        record = {"seeds": self.seeds, "n_episodes": self.n_episodes, "q_values": self.q_values,
                  "cells": [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}
                            for row in self.cells.to_dict(orient="records")]}
        with open(path, "w") as f:
            json.dump(record, f, indent=2, sort_keys=True)

    @staticmethod
    def from_json(path: str) -> "EvaluationReport":
        with open(path) as f:
            record = json.load(f)
        cells = pd.DataFrame(record["cells"], columns=["planner", "q", "collisions", "n", "invalid_n", "rate"])
        cells["rate"] = cells["rate"].astype(float)
        return EvaluationReport(cells, record["seeds"], record["n_episodes"], record["q_values"])


@dataclass(frozen=True)
class EpisodeTask:
    planner: str
    q1: float
    seed: int
    episode: int
    scenario: ScenarioSpec
    scene: Scene
    z: np.ndarray


PlannerFactory = Union[str, Callable[[], Planner]]


def _factory(spec: PlannerFactory, config: Optional[dict]) -> Callable[[], Planner]:
    if isinstance(spec, str):
        return lambda: make_planner(spec, config)
    return spec


def evaluate_table(model: RouteGanModel, tested_planners: Dict[str, PlannerFactory], scenes: Sequence[Scene],
                   q_values: Sequence[float] = Q_VALUES, n_episodes: int = 200, seeds: Sequence[int] = (0,),
                   cases: Sequence = tuple(Case), T_max: int = T_MAX, r: float = COLLISION_RADIUS,
                   workers: int = 1, planner_config: Optional[dict] = None,
                   runner: Optional[Callable[[EpisodeTask], RolloutResult]] = None,
                   verbose: bool = False) -> EvaluationReport:
    """
    Collision rates of each tested planner (V2) against RouteGAN(q1) (V1, other style dims 0) for every q1.
    Episode e of seed k draws its scene, case, scenario and noise z from its own RNG stream, so every cell sees the
    same scenarios (common random numbers). rate = collisions / valid episodes; cells with no valid episode are NaN.
    Results are collected in task order, so the report does not depend on `workers`.

    :param model:           Trained RouteGanModel (never modified)
    :param tested_planners: name -> planner kind ("data", "idm", "astar") or zero-argument factory
    :param scenes:          Scenes to draw scenarios on
    :param q_values:        Criticality values swept
    :param n_episodes:      Episodes per seed and cell
    :param seeds:           Root seeds
    :param cases:           Cases drawn uniformly
    :param T_max:           Rollout horizon
    :param r:               Collision radius
    :param workers:         Thread pool size
    :param planner_config:  Flat config for planner factories given by kind
    :param runner:          Replaces the rollout of one task (used for testing the estimator)
    :param verbose:         Log one line per cell at INFO
    :return:                EvaluationReport
    """
    if not tested_planners:
        raise ValueError("At least one tested planner is required")
    if n_episodes < 0:
        raise ValueError(f"n_episodes must be non-negative, got {n_episodes}")
    if not scenes:
        raise ValueError("At least one scene is required")
    factories = {name: _factory(spec, planner_config) for name, spec in tested_planners.items()}
    cases = [Case(c) for c in cases]
    s = model.config.s

    episodes = []
    for seed in seeds:
        for e in range(n_episodes):
            erng = np.random.default_rng(np.random.SeedSequence([int(seed), e]))
            scene = scenes[int(erng.integers(len(scenes)))]
            case = cases[int(erng.integers(len(cases)))]
            scenario = sample_scenario(scene, case, erng, dt=model.config.dt, steps=T_max, seed=int(seed))
            episodes.append((int(seed), e, scenario, scene, erng.standard_normal(model.config.z_dim)))
    tasks = [EpisodeTask(name, float(q1), seed, e, scenario, scene, z)
             for name in factories for q1 in q_values for seed, e, scenario, scene, z in episodes]

    def run(task: EpisodeTask) -> RolloutResult:
        v1 = RouteGanPlanner(model, StyleCode.of([task.q1], model.config.c), NoiseCode(task.z))
        return rollout_pair(task.scenario, v1, factories[task.planner](), task.scene, T_max, r, s=s,
                            name=f"{task.planner}/q{task.q1:g}/seed{task.seed}/ep{task.episode}")

    run_one = runner or run
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, tasks))
    else:
        results = [run_one(task) for task in tasks]

    rows = []
    for name in factories:
        for q1 in q_values:
            cell = [res for task, res in zip(tasks, results) if task.planner == name and task.q1 == float(q1)]
            valid = [res for res in cell if res.valid]
            collisions = sum(1 for res in valid if res.collision)
            rate = collisions / len(valid) if valid else float("nan")
            rows.append({"planner": name, "q": float(q1), "collisions": collisions, "n": len(valid),
                         "invalid_n": len(cell) - len(valid), "rate": rate})
            message = f"{name:>8s} q1={q1:+.1f}: rate={rate:.3f} ({collisions}/{len(valid)}, " \
                      f"{len(cell) - len(valid)} invalid)"
            if verbose:
                logger.info(message)
            else:
                logger.debug(message)
    cells = pd.DataFrame(rows, columns=["planner", "q", "collisions", "n", "invalid_n", "rate"])
    return EvaluationReport(cells, [int(sd) for sd in seeds], n_episodes, [float(q) for q in q_values])


############################################################################################
#                                                                                          #
#                                   JOINT GENERATION AND SWEEPS                            #
#                                                                                          #
############################################################################################

def joint_generation(model: RouteGanModel, scenario: ScenarioSpec, scene: Scene, q1, q2, z1, z2,
                     T_max: int = T_MAX, r: float = COLLISION_RADIUS) -> RolloutResult:
    """
    Both vehicles on RouteGAN with their own styles and noise, each conditioned on the other's live positions
    """
    v1 = RouteGanPlanner(model, q1, z1)
    v2 = RouteGanPlanner(model, q2, z2)
    return rollout_pair(scenario, v1, v2, scene, T_max, r, s=model.config.s, name="joint")


@dataclass
class SweepGrid:
    """
    cells[(a, b)]: rollout with the first swept dimension at a and the second at b
    """
    dims: Tuple[int, int]
    values: List[float]
    joint: bool
    cells: Dict[Tuple[float, float], RolloutResult]

    def __len__(self) -> int:
        return len(self.cells)

    def min_distances(self) -> pd.DataFrame:
        frame = pd.DataFrame(index=self.values, columns=self.values, dtype=float)
        for (a, b), result in self.cells.items():
            frame.loc[a, b] = result.min_distance
        return frame


def sweep_values(low: float = -2.0, high: float = 2.0, step: float = 1.0) -> List[float]:
    if step <= 0 or high < low:
        raise ValueError(f"Invalid sweep range [{low}, {high}] step {step}")
    count = int(math.floor((high - low) / step + 1e-9)) + 1
    return [float(low + i * step) for i in range(count)]


def latent_sweep(model: RouteGanModel, scenario: ScenarioSpec, scene: Scene, dims: Tuple[int, int] = (0, 1),
                 values: Optional[Sequence[float]] = None, z=None, joint: bool = False, z2=None,
                 T_max: int = T_MAX, r: float = COLLISION_RADIUS) -> SweepGrid:
    """
    Grid of rollouts over two style dimensions with the noise and every other dimension fixed.

    Single mode: V1's q[i] and q[j] vary, V2 follows its reference.
    Joint mode: V1's q[i] against V2's q[j], both vehicles on RouteGAN.

    :param dims:    (i, j) zero-based style dimensions; must differ in single mode
    :param values:  Values of each swept dimension (default -2, -1, 0, 1, 2)
    :param z:       V1 noise (default zeros)
    :param z2:      V2 noise in joint mode (default zeros)
    """
    c = model.config.c
    i, j = dims
    if not (0 <= i < c and 0 <= j < c):
        raise ValueError(f"Sweep dims {dims} out of range for c={c}")
    if not joint and i == j:
        raise ValueError(f"Single-vehicle sweep needs two different dims, got {dims}")
    values = list(sweep_values()) if values is None else [float(v) for v in values]
    z = NoiseCode(np.zeros(model.config.z_dim) if z is None else z)
    z2 = NoiseCode(np.zeros(model.config.z_dim) if z2 is None else z2)
    cells = {}
    for a in values:
        for b in values:
            q1 = np.zeros(c)
            q1[i] = a
            if joint:
                q2 = np.zeros(c)
                q2[j] = b
                result = joint_generation(model, scenario, scene, StyleCode(q1), StyleCode(q2), z, z2, T_max, r)
            else:
                q1[j] = b
                result = rollout_pair(scenario, RouteGanPlanner(model, StyleCode(q1), z), DataPlanner(), scene,
                                      T_max, r, s=model.config.s)
            result.name = f"q{i + 1}={a:g}_{'v2_' if joint else ''}q{j + 1}={b:g}"
            cells[(a, b)] = result
    return SweepGrid((i, j), values, joint, cells)


def dump_rollouts(results: Sequence[RolloutResult], path: str, scene_id: str, s: Optional[int] = None) -> None:
    """
    JSON Lines of rollouts in the dataset episode format plus name, collision and keypoint stride
    """
    with open(path, "w") as f:
        for result in results:
            record = result.to_episode(scene_id).to_dict()
            record.update({"name": result.name, "collision": result.collision, "valid": result.valid,
                           "collision_time": result.collision_time, "stride": s})
            f.write(json.dumps(record) + "\n")
