"""
Tested decision-making systems behind one receding-horizon interface: reference following (Data),
IDM car following integrated with RK4, A* over acceleration primitives, and RouteGAN as a planner.
Each call returns the next s positions.
"""

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from logger.logger import logger
from routebench import geometry
from routebench.geometry import Trajectory
from routebench.routegan import NoiseCode, StyleCode, encode_context, generator_goal, generator_step
from routebench.scene import Scene, ScenarioSpec

AHEAD_EPS = 1e-6
MIN_GAP = 1e-3           # floor on the IDM gap inside the integrator


@dataclass(frozen=True)
class PlannerInput:
    """
    position, heading:  own current state
    own_history:        own positions at times 0..t
    opponent_history:   opponent positions at times 0..t (last row = newest observation)
    reference:          own reference trajectory
    t:                  current time index
    dt:                 timestep
    s:                  positions to return
    """
    position: np.ndarray
    heading: float
    own_history: np.ndarray
    opponent_history: np.ndarray
    reference: Trajectory
    t: int
    dt: float
    s: int

    def __post_init__(self):
        if len(self.reference) == 0:
            raise ValueError("Planner reference must be nonempty")
        if len(self.opponent_history) == 0 or len(self.own_history) == 0:
            raise ValueError("Planner needs at least the current observation of both vehicles")
        if len(self.opponent_history) > self.t + 1:
            raise ValueError(f"Opponent history has {len(self.opponent_history)} rows at time {self.t}")
        if self.s <= 0:
            raise ValueError(f"s must be positive, got {self.s}")

    @property
    def opponent(self) -> np.ndarray:
        return self.opponent_history[-1]


@dataclass(frozen=True)
class PlannerOutput:
    positions: np.ndarray
    collision_risk: bool = False
    cost: Optional[float] = None

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != 2 or not np.all(np.isfinite(positions)):
            raise ValueError(f"Planner output must be finite (s, 2) positions, got shape {positions.shape}")
        object.__setattr__(self, "positions", positions)

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class IdmParams:
    v0: float = 0.25
    T: float = 1.0
    a: float = 0.15
    b: float = 0.2
    s0: float = 0.06
    delta: float = 4.0

    def __post_init__(self):
        for name in ("v0", "T", "a", "b", "s0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IDM parameter {name} must be positive, got {getattr(self, name)}")
        if self.delta < 1:
            raise ValueError(f"IDM exponent delta must be >= 1, got {self.delta}")

    def acceleration(self, v: float, gap: Optional[float], dv: float = 0.0) -> float:
        """
        dv/dt = a (1 - (v/v0)^delta - (s*(v, dv)/gap)^2), s* = s0 + vT + v dv / (2 sqrt(ab));
        free road (gap None) keeps only the first two terms
        """
        free = self.a * (1.0 - (max(v, 0.0) / self.v0) ** self.delta)
        if gap is None:
            return free
        s_star = self.s0 + v * self.T + v * dv / (2.0 * math.sqrt(self.a * self.b))
        return free - self.a * (s_star / gap) ** 2


############################################################################################
#                                                                                          #
#                                          RK4                                             #
#                                                                                          #
############################################################################################

def rk4_step(f: Callable[[float, np.ndarray], np.ndarray], t: float, y, dt: float) -> np.ndarray:
    """
    One classical four-stage Runge-Kutta step of dy/dt = f(t, y)
    """
    y = np.asarray(y, dtype=float)
    k1 = np.asarray(f(t, y), dtype=float)
    k2 = np.asarray(f(t + 0.5 * dt, y + 0.5 * dt * k1), dtype=float)
    k3 = np.asarray(f(t + 0.5 * dt, y + 0.5 * dt * k2), dtype=float)
    k4 = np.asarray(f(t + dt, y + dt * k3), dtype=float)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(f: Callable[[float, np.ndarray], np.ndarray], t0: float, y0, dt: float, n: int,
                  project: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
    """
    n RK4 steps from (t0, y0).

    :param project: Applied to the state after every step (e.g. clamping speed at zero)
    :return:        Array (n + 1, dim) of states, row 0 = y0
    """
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    states = [np.atleast_1d(np.asarray(y0, dtype=float))]
    for i in range(n):
        y = rk4_step(f, t0 + i * dt, states[-1], dt)
        states.append(project(y) if project is not None else y)
    return np.array(states)


############################################################################################
#                                                                                          #
#                                     PLANNER FUNCTIONS                                    #
#                                                                                          #
############################################################################################

def data_planner(inp: PlannerInput) -> PlannerOutput:
    """
    The next s reference positions verbatim; past the end of the reference the final position is held
    """
    reference = inp.reference.positions
    index = np.minimum(np.arange(inp.t + 1, inp.t + inp.s + 1), len(reference) - 1)
    return PlannerOutput(reference[index].copy())


def _own_speed(inp: PlannerInput) -> float:
    if len(inp.own_history) >= 2:
        return float(np.hypot(*(inp.own_history[-1] - inp.own_history[-2]))) / inp.dt
    reference = inp.reference.positions
    if len(reference) >= 2:
        return float(np.hypot(*(reference[1] - reference[0]))) / inp.dt
    return 0.0


def _project_history(reference: np.ndarray, arclength: np.ndarray, history: np.ndarray, dt: float) -> Tuple[float, float]:
    """
    (arc length of the newest observation on the reference, its speed along the reference)
    """
    s_now, _ = geometry.project_to_polyline(reference, history[-1], arclength)
    if len(history) < 2:
        return s_now, 0.0
    s_prev, _ = geometry.project_to_polyline(reference, history[-2], arclength)
    return s_now, (s_now - s_prev) / dt


def idm_planner(inp: PlannerInput, params: IdmParams = IdmParams()) -> PlannerOutput:
    """
    Longitudinal IDM along the own reference. The opponent is projected onto the reference (nearest point,
    ties to the smaller arc length); when it lies ahead it is the leader, moving at its projected speed.
    Arc length and speed are integrated with RK4 at step dt and mapped back to positions on the reference.
    A non-positive gap holds the current position.
    """
    reference = inp.reference.positions
    arclength = geometry.polyline_arclength(reference)
    s_own, _ = geometry.project_to_polyline(reference, inp.position, arclength)
    s_lead, v_lead = _project_history(reference, arclength, inp.opponent_history, inp.dt)
    has_leader = s_lead - s_own > AHEAD_EPS
    if not has_leader and abs(s_lead - s_own) <= AHEAD_EPS:
        return PlannerOutput(np.repeat(np.asarray(inp.position, float)[None], inp.s, axis=0))
    v = _own_speed(inp)

    def dynamics(tau: float, y: np.ndarray) -> np.ndarray:
        speed = max(y[1], 0.0)
        if not has_leader:
            return np.array([speed, params.acceleration(speed, None)])
        gap = max(s_lead + v_lead * tau - y[0], MIN_GAP)
        return np.array([speed, params.acceleration(speed, gap, speed - v_lead)])

    def clamp(y: np.ndarray) -> np.ndarray:
        return np.array([y[0], max(y[1], 0.0)])

    states = rk4_integrate(dynamics, 0.0, [s_own, v], inp.dt, inp.s, clamp)
    # arc length never decreases
    progress = np.maximum.accumulate(states[1:, 0])
    return PlannerOutput(geometry.point_at_arclength(reference, progress, arclength))


@dataclass(frozen=True)
class SearchNode:
    k: int
    s: float
    v: float


@dataclass
class AccelerationSearch:
    """
    Best-first search over constant-acceleration primitives along a reference.

    Node (k, s, v): k steps into the plan, arc length s, speed v. Edge for acceleration a:
        v' = clip(v + a dt, 0, v_max), ds = (v + v') dt / 2,
        cost = (v_max dt - ds) + w_c * [own position within `clearance` of the predicted opponent] + w_j * |a|
    The progress regret v_max dt - ds is -progress up to a constant and non-negative. The heuristic is the
    regret left when accelerating at the largest grid value every remaining step, with no collisions and no
    jerk, which is admissible and consistent.
    """
    reference: np.ndarray
    accel_grid: Tuple[float, ...]
    horizon: int
    dt: float
    v_max: float
    opponent: np.ndarray
    opponent_velocity: np.ndarray
    clearance: float = 0.06
    w_collision: float = 10.0
    w_jerk: float = 1e-3
    s_resolution: Optional[float] = 0.005
    v_resolution: Optional[float] = 0.01
    arclength: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.accel_grid:
            raise ValueError("Acceleration grid must be nonempty")
        if self.horizon <= 0 or self.v_max <= 0 or self.dt <= 0:
            raise ValueError(f"horizon, v_max and dt must be positive, got {self.horizon}, {self.v_max}, {self.dt}")
        self.accel_grid = tuple(sorted(float(a) for a in self.accel_grid))
        self.arclength = geometry.polyline_arclength(self.reference)

    def step(self, node: SearchNode, a: float) -> Tuple[SearchNode, float, bool]:
        v_next = min(max(node.v + a * self.dt, 0.0), self.v_max)
        ds = 0.5 * (node.v + v_next) * self.dt
        child = SearchNode(node.k + 1, node.s + ds, v_next)
        hit = self.collides(child)
        cost = (self.v_max * self.dt - ds) + self.w_jerk * abs(a) + (self.w_collision if hit else 0.0)
        return child, cost, hit

    def position(self, node: SearchNode) -> np.ndarray:
        return geometry.point_at_arclength(self.reference, node.s, self.arclength)

    def collides(self, node: SearchNode) -> bool:
        predicted = self.opponent + self.opponent_velocity * node.k * self.dt
        return float(np.hypot(*(self.position(node) - predicted))) < self.clearance

    def heuristic(self, node: SearchNode) -> float:
        a_best = self.accel_grid[-1]
        v, total = node.v, 0.0
        for _ in range(self.horizon - node.k):
            v_next = min(max(v + a_best * self.dt, 0.0), self.v_max)
            total += self.v_max * self.dt - 0.5 * (v + v_next) * self.dt
            v = v_next
        return total

    def key(self, node: SearchNode) -> tuple:
        if self.s_resolution is None or self.v_resolution is None:
            return node.k, node.s, node.v
        return node.k, int(round(node.s / self.s_resolution)), int(round(node.v / self.v_resolution))

    def solve(self, s0: float, v0: float) -> Tuple[List[SearchNode], List[float], float, bool]:
        """
        :return:    (nodes from start to depth `horizon`, accelerations, plan cost, collision flag)
        """
        start = SearchNode(0, float(s0), min(max(float(v0), 0.0), self.v_max))
        counter = 0
        # entries: (f, |a| of the incoming edge, insertion order, g, node key, node, link to parent);
        # node and link travel with the entry since several nodes can share a bucket
        queue = [(self.heuristic(start), 0.0, counter, 0.0, self.key(start), start, None)]
        enqueued = {self.key(start): 0.0}
        nodes: Dict[tuple, SearchNode] = {}
        explored: Dict[tuple, Optional[Tuple[tuple, float, bool]]] = {}
        while queue:
            _, _, _, g, current, node, link = heapq.heappop(queue)
            if current in explored:
                continue
            explored[current] = link
            nodes[current] = node
            if node.k == self.horizon:
                return self._path(current, nodes, explored, g)
            for a in self.accel_grid:
                child, cost, hit = self.step(node, a)
                child_key = self.key(child)
                if child_key in explored:
                    continue
                g_child = g + cost
                if child_key in enqueued and enqueued[child_key] <= g_child:
                    continue
                enqueued[child_key] = g_child
                counter += 1
                heapq.heappush(queue, (g_child + self.heuristic(child), abs(a), counter, g_child, child_key, child,
                                       (current, a, hit)))
        raise RuntimeError("A* search exhausted the queue without reaching the horizon")

    def _path(self, goal: tuple, nodes: dict, explored: dict, cost: float):
        path, accels, collision = [nodes[goal]], [], False
        link = explored[goal]
        while link is not None:
            parent, a, hit = link
            path.append(nodes[parent])
            accels.append(a)
            collision = collision or hit
            link = explored[parent]
        path.reverse()
        accels.reverse()
        return path, accels, cost, collision


def astar_planner(inp: PlannerInput, accel_grid: Sequence[float] = (-0.3, -0.15, 0.0, 0.15, 0.3),
                  horizon: Optional[int] = None, w_collision: float = 10.0, w_jerk: float = 1e-3,
                  v_max: float = 0.3, clearance: float = 0.06, s_resolution: Optional[float] = 0.005,
                  v_resolution: Optional[float] = 0.01) -> PlannerOutput:
    """
    Search accelerations along the own reference over `horizon` steps (default 3s) against a constant-velocity
    prediction of the opponent (from its last two observations) and return the first s positions of the best plan.
    When every plan collides the cheapest one is returned with collision_risk set.
    """
    horizon = 3 * inp.s if horizon is None else int(horizon)
    if horizon < inp.s:
        raise ValueError(f"A* horizon {horizon} is shorter than the planning step {inp.s}")
    reference = inp.reference.positions
    history = inp.opponent_history
    velocity = (history[-1] - history[-2]) / inp.dt if len(history) >= 2 else np.zeros(2)
    search = AccelerationSearch(reference, tuple(accel_grid), horizon, inp.dt, v_max, np.asarray(history[-1], float),
                                velocity, clearance, w_collision, w_jerk, s_resolution, v_resolution)
    s0, _ = geometry.project_to_polyline(reference, inp.position, search.arclength)
    path, _, cost, collision = search.solve(s0, _own_speed(inp))
    if collision:
        logger.debug(f"A* at t={inp.t}: no collision-free plan, returning cost {cost:.4f}")
    positions = np.array([search.position(node) for node in path[1:inp.s + 1]])
    return PlannerOutput(positions, collision, cost)


############################################################################################
#                                                                                          #
#                                      PLANNER OBJECTS                                     #
#                                                                                          #
############################################################################################

class Planner:
    """
    Receding-horizon planner: reset() once per episode, then plan() every s steps
    """
    kind = "planner"

    def reset(self, scenario: ScenarioSpec, role: str, scene: Scene) -> None:
        self.scenario = scenario
        self.role = role
        self.scene = scene

    def plan(self, inp: PlannerInput) -> PlannerOutput:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class DataPlanner(Planner):
    kind = "data"

    def plan(self, inp: PlannerInput) -> PlannerOutput:
        return data_planner(inp)


class IdmPlanner(Planner):
    kind = "idm"

    def __init__(self, params: IdmParams = IdmParams()):
        self.params = params

    def plan(self, inp: PlannerInput) -> PlannerOutput:
        return idm_planner(inp, self.params)


class AStarPlanner(Planner):
    kind = "astar"

    def __init__(self, **options):
        self.options = options

    def plan(self, inp: PlannerInput) -> PlannerOutput:
        return astar_planner(inp, **self.options)


def routegan_planner(model, q, z, inp: PlannerInput, state, heading: Optional[float]):
    """
    One generator step on the opponent's newest observation, then interpolation from the current position
    to the new key waypoint (linear for the first call of an episode, Bezier afterwards).

    :return:    (PlannerOutput, next GeneratorState, heading at the new key waypoint)
    """
    state, keypoint = generator_step(model, state, q, z, inp.opponent)
    positions, heading = geometry.interpolate_segment(inp.position, keypoint, heading, inp.s, heading is None,
                                                      model.config.bezier_k)
    positions[-1] = keypoint
    return PlannerOutput(positions), state, heading


class RouteGanPlanner(Planner):
    """
    RouteGAN with a fixed style and noise; the generator state lives for one episode
    """
    kind = "routegan"

    def __init__(self, model, q, z):
        self.model = model
        self.q = q if isinstance(q, StyleCode) else StyleCode(q)
        self.z = z if isinstance(z, NoiseCode) else NoiseCode(z)
        self.state = None
        self.heading = None

    def reset(self, scenario: ScenarioSpec, role: str, scene: Scene) -> None:
        super().reset(scenario, role, scene)
        other = scenario.reference("V2" if role == "V1" else "V1")
        goal = generator_goal(other, self.model)
        _, self.state = encode_context(self.model, scene, goal, scenario.start(role), self.q, self.z)
        self.heading = None

    def plan(self, inp: PlannerInput) -> PlannerOutput:
        if self.state is None:
            raise RuntimeError("RouteGanPlanner.plan() called before reset()")
        out, self.state, self.heading = routegan_planner(self.model, self.q, self.z, inp, self.state, self.heading)
        return out

    def __repr__(self):
        return f"RouteGanPlanner(q={self.q.q.tolist()})"


PLANNER_KINDS = ("data", "idm", "astar", "routegan")


def make_planner(kind: str, config: Optional[dict] = None, model=None, q=None, z=None) -> Planner:
    """
    Build a planner from a flat config ("planner.idm.v0", "planner.astar.horizon", ...)

    :param kind:    data, idm, astar or routegan
    :param config:  Flat dotted-key settings; missing keys fall back to defaults
    :param model:   RouteGanModel (routegan only)
    :param q:       Style (routegan only)
    :param z:       Noise (routegan only)
    """
    config = config or {}
    kind = str(kind).lower()
    if kind == "data":
        return DataPlanner()
    if kind == "idm":
        prefix = "planner.idm."
        values = {k[len(prefix):]: v for k, v in config.items() if k.startswith(prefix)}
        return IdmPlanner(IdmParams(**values))
    if kind == "astar":
        prefix = "planner.astar."
        options = {k[len(prefix):]: v for k, v in config.items() if k.startswith(prefix)}
        if "accel_grid" in options:
            options["accel_grid"] = tuple(options["accel_grid"])
        for key in ("s_resolution", "v_resolution", "horizon"):
            if options.get(key) in (0, "none", "None"):
                options[key] = None
        return AStarPlanner(**options)
    if kind == "routegan":
        if model is None or q is None or z is None:
            raise ValueError("routegan planner needs a model, a style code and a noise code")
        return RouteGanPlanner(model, q, z)
    raise ValueError(f"Unknown planner kind `{kind}`, expected one of {PLANNER_KINDS}")
