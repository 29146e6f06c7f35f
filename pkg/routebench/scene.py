"""
Road structure: the bird-eye drivable grid y, its coordinate frame, lane centre-line routes,
synthetic two-vehicle scenarios (Cases I-III) and the road-constraint loss.
"""

import functools
import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from logger.logger import logger
from routebench import geometry
from routebench.geometry import Frame, KeyWaypoints, Trajectory
from routebench.nn import Tensor, as_tensor, no_grad

MAX_SCENARIO_TRIES = 1000
ROUTE_SPACING = 0.01
BORDER = 0.97
MIN_START_GAP = 0.1


class SceneKind(str, Enum):
    STRAIGHT = "StraightRoad"
    INTERSECTION = "Intersection"
    ROUNDABOUT = "Roundabout"


class Case(str, Enum):
    I = "I"          # same direction, V1 behind
    II = "II"        # same direction, V1 ahead
    III = "III"      # opposite direction, or crossing paths


DEFAULT_SCENE_PARAMS = {
    "lane_width_px": 12,
    "inner_radius": 0.3,
    "outer_radius": 0.6,
    "arms": 4,
}


@dataclass(frozen=True)
class Scene:
    """
    drivable: (H, W) array, 1 = drivable road, 0 = off-road
    kind:     which road layout the grid was rasterized from
    frame:    normalized <-> pixel transform
    params:   geometry parameters the grid was built with (JSON-friendly)
    """
    drivable: np.ndarray
    kind: SceneKind
    frame: Frame
    params: dict = field(default_factory=dict)
    scene_id: str = "scene"

    @property
    def width_px(self) -> int:
        return self.frame.width_px

    @property
    def height_px(self) -> int:
        return self.frame.height_px

    @property
    def offroad(self) -> np.ndarray:
        """(1 - y) as floats"""
        return 1.0 - self.drivable.astype(float)

    def routes(self) -> Dict[str, np.ndarray]:
        """
        Lane centre-line routes of the layout, each a polyline (N, 2) sampled every ROUTE_SPACING units
        in the direction of travel
        """
        return {name: route.copy() for name, route in _cached_routes(*self.layout_key).items()}

    @property
    def layout_key(self) -> tuple:
        return (self.kind.value, self.width_px, self.height_px, json.dumps(self.params, sort_keys=True))


############################################################################################
#                                                                                          #
#                                    SCENE CONSTRUCTION                                    #
#                                                                                          #
############################################################################################

def _band(size: int, width: int) -> Tuple[int, int]:
    start = size // 2 - width // 2
    return start, start + width - 1


def make_scene(kind, width_px: int = 64, height_px: int = 64, params: Optional[dict] = None,
               scene_id: Optional[str] = None) -> Scene:
    """
    Rasterize a road layout.

    StraightRoad = horizontal band of rows; Intersection = horizontal and vertical bands;
    Roundabout = annulus plus `arms` (0, 3 or 4) axis-aligned entry/exit bands.

    EXAMPLES:
        make_scene("StraightRoad", 64, 64, {"lane_width_px": 9})     # rows 28..36 drivable
        make_scene("Roundabout", params={"inner_radius": 0.3, "outer_radius": 0.6, "arms": 0})

    :param kind:        SceneKind or its string value
    :param width_px:    Grid width, at least 32
    :param height_px:   Grid height, at least 32
    :param params:      Overrides of DEFAULT_SCENE_PARAMS (lane_width_px, inner_radius, outer_radius, arms)
    :param scene_id:    Name used for files and episode records
    :return:            Scene
    """
    kind = SceneKind(kind)
    if width_px < 32 or height_px < 32:
        raise ValueError(f"Scene must be at least 32x32 pixels, got {width_px}x{height_px}")
    merged = dict(DEFAULT_SCENE_PARAMS)
    merged.update(params or {})
    lane_width = int(merged["lane_width_px"])
    if lane_width <= 0:
        raise ValueError(f"lane_width_px must be positive, got {lane_width}")
    frame = Frame(int(width_px), int(height_px))
    grid = np.zeros((height_px, width_px), dtype=np.uint8)

    r0, r1 = _band(height_px, lane_width)
    c0, c1 = _band(width_px, lane_width)
    if kind == SceneKind.STRAIGHT:
        grid[max(r0, 0):r1 + 1, :] = 1
    elif kind == SceneKind.INTERSECTION:
        grid[max(r0, 0):r1 + 1, :] = 1
        grid[:, max(c0, 0):c1 + 1] = 1
    else:
        inner, outer = float(merged["inner_radius"]), float(merged["outer_radius"])
        arms = int(merged["arms"])
        if inner < 0 or outer <= inner:
            raise ValueError(f"Roundabout radii must satisfy 0 <= inner < outer, got {inner}, {outer}")
        if arms not in (0, 3, 4):
            raise ValueError(f"Roundabout supports 0, 3 or 4 arms, got {arms}")
        xs = frame.column_centers()[None, :]
        ys = frame.row_centers()[:, None]
        radius = np.hypot(xs, ys)
        grid[(radius >= inner) & (radius <= outer)] = 1
        outside_island = radius >= inner
        rows = np.arange(height_px)[:, None]
        cols = np.arange(width_px)[None, :]
        in_row_band = (rows >= r0) & (rows <= r1)
        in_col_band = (cols >= c0) & (cols <= c1)
        for name in ARM_ORDER[:arms]:
            if name == "east":
                arm = in_row_band & (xs >= 0)
            elif name == "west":
                arm = in_row_band & (xs <= 0)
            elif name == "south":
                arm = in_col_band & (ys >= 0)
            else:
                arm = in_col_band & (ys <= 0)
            grid[arm & outside_island] = 1
    if not grid.any():
        raise ValueError(f"Scene parameters {merged} leave no drivable cell")
    scene_id = scene_id or kind.value.lower()
    return Scene(grid, kind, frame, merged, scene_id)


ARM_ORDER = ("east", "west", "south", "north")
ARM_ANGLE = {"east": 0.0, "south": math.pi / 2, "west": math.pi, "north": -math.pi / 2}


def is_on_road(scene: Scene, p) -> bool:
    """
    True iff p lies inside [-1, 1]^2 and the pixel containing it is drivable
    """
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)) or abs(x) > 1.0 or abs(y) > 1.0:
        return False
    i, j = scene.frame.cell_of((x, y))
    return bool(scene.drivable[i, j])


def on_road_mask(scene: Scene, points: np.ndarray) -> np.ndarray:
    return np.array([is_on_road(scene, p) for p in np.asarray(points).reshape(-1, 2)], dtype=bool)


############################################################################################
#                                                                                          #
#                                        LANE ROUTES                                       #
#                                                                                          #
############################################################################################

def _band_center_and_offset(frame_size: int, lane_width: int) -> Tuple[float, float]:
    # Band centre and lane offset (a quarter of the band) in normalized units
    start, stop = _band(frame_size, lane_width)
    low = 2.0 * start / frame_size - 1.0
    high = 2.0 * (stop + 1) / frame_size - 1.0
    return 0.5 * (low + high), 0.25 * (high - low)


def _line(p0, p1) -> np.ndarray:
    return geometry.resample_polyline(np.array([p0, p1], dtype=float), ROUTE_SPACING)


@functools.lru_cache(maxsize=32)
def _cached_routes(kind: str, width_px: int, height_px: int, params_json: str) -> Dict[str, np.ndarray]:
    kind = SceneKind(kind)
    params = json.loads(params_json)
    lane_width = int(params["lane_width_px"])
    cy, off_y = _band_center_and_offset(height_px, lane_width)
    cx, off_x = _band_center_and_offset(width_px, lane_width)
    routes = {}
    if kind in (SceneKind.STRAIGHT, SceneKind.INTERSECTION):
        routes["east"] = _line((-BORDER, cy + off_y), (BORDER, cy + off_y))
        routes["west"] = _line((BORDER, cy - off_y), (-BORDER, cy - off_y))
    if kind == SceneKind.INTERSECTION:
        routes["south"] = _line((cx - off_x, -BORDER), (cx - off_x, BORDER))
        routes["north"] = _line((cx + off_x, BORDER), (cx + off_x, -BORDER))
    if kind == SceneKind.ROUNDABOUT:
        arms = ARM_ORDER[:int(params["arms"])]
        ring = 0.5 * (float(params["inner_radius"]) + float(params["outer_radius"]))
        offset = min(off_x, off_y)
        along = math.sqrt(max(ring ** 2 - offset ** 2, 0.0))
        for entry in arms:
            for exit_ in arms:
                if entry != exit_:
                    routes[f"{entry}-{exit_}"] = _roundabout_route(entry, exit_, ring, offset, along)
    return routes


def _roundabout_route(entry: str, exit_: str, ring: float, offset: float, along: float) -> np.ndarray:
    """
    Inbound lane of `entry` -> counterclockwise (increasing atan2 angle) along the ring -> outbound lane of `exit_`
    """
    phi_in, phi_out = ARM_ANGLE[entry], ARM_ANGLE[exit_]
    u_in, n_in = geometry.unit(phi_in), geometry.unit(phi_in + math.pi / 2)
    u_out, n_out = geometry.unit(phi_out), geometry.unit(phi_out + math.pi / 2)
    start = BORDER * u_in + offset * n_in
    enter = along * u_in + offset * n_in
    leave = along * u_out - offset * n_out
    finish = BORDER * u_out - offset * n_out
    theta_in = geometry.heading_of(enter)
    theta_out = geometry.heading_of(leave)
    sweep = (theta_out - theta_in) % (2.0 * math.pi)
    steps = max(int(math.ceil(sweep * ring / ROUTE_SPACING)), 2)
    angles = theta_in + np.linspace(0.0, sweep, steps + 1)
    arc = ring * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    polyline = np.concatenate([np.array([start]), arc, np.array([finish])])
    return geometry.resample_polyline(polyline, ROUTE_SPACING)


############################################################################################
#                                                                                          #
#                                         SCENARIOS                                        #
#                                                                                          #
############################################################################################

@dataclass(frozen=True)
class ScenarioSpec:
    """
    One two-vehicle situation: lane routes for both vehicles, their start points and nominal
    reference trajectories (constant-ish speed along the routes), and V2's goal.
    """
    case: Case
    kind: SceneKind
    scene_id: str
    v1_start: np.ndarray
    v2_start: np.ndarray
    v1_route: np.ndarray
    v2_route: np.ndarray
    v1_reference: Trajectory
    v2_reference: Trajectory
    v2_goal: np.ndarray
    seed: int = 0

    @property
    def v1_goal(self) -> np.ndarray:
        return self.v1_reference.positions[-1]

    def reference(self, role: str) -> Trajectory:
        return self.v1_reference if role == "V1" else self.v2_reference

    def start(self, role: str) -> np.ndarray:
        return self.v1_start if role == "V1" else self.v2_start

    def to_dict(self) -> dict:
        return {
            "case": self.case.value, "kind": self.kind.value, "scene_id": self.scene_id, "seed": int(self.seed),
            "dt": self.v2_reference.dt,
            "v1_start": self.v1_start.tolist(), "v2_start": self.v2_start.tolist(),
            "v1_route": self.v1_route.tolist(), "v2_route": self.v2_route.tolist(),
            "v1_reference": self.v1_reference.positions.tolist(),
            "v2_reference": self.v2_reference.positions.tolist(),
            "v2_goal": self.v2_goal.tolist(),
        }

    @staticmethod
    def from_dict(record: dict) -> "ScenarioSpec":
        dt = float(record["dt"])
        return ScenarioSpec(
            Case(record["case"]), SceneKind(record["kind"]), record["scene_id"],
            np.asarray(record["v1_start"], float), np.asarray(record["v2_start"], float),
            np.asarray(record["v1_route"], float), np.asarray(record["v2_route"], float),
            Trajectory(np.asarray(record["v1_reference"], float), dt),
            Trajectory(np.asarray(record["v2_reference"], float), dt),
            np.asarray(record["v2_goal"], float), int(record.get("seed", 0)))


def drive_route(route: np.ndarray, s_start: float, speed: float, steps: int, dt: float,
                wobble: float = 0.0, phase: float = 0.0, period: float = 4.0) -> np.ndarray:
    """
    Positions along `route` starting at arc length s_start with speed v(t) = speed * (1 + wobble * sin(2 pi t / period + phase)).
    The vehicle holds at the end of the route.

    :return:    Array (steps + 1, 2)
    """
    arclength = geometry.polyline_arclength(route)
    t = np.arange(steps + 1) * dt
    # closed-form integral of the speed profile
    travelled = speed * t - speed * wobble * period / (2.0 * math.pi) * \
        (np.cos(2.0 * math.pi * t / period + phase) - math.cos(phase))
    return geometry.point_at_arclength(route, s_start + travelled, arclength)


def sample_scenario(scene: Scene, case, rng: np.random.Generator, dt: float = 0.1, steps: int = 100,
                    window_steps: int = 30, speed_range: Tuple[float, float] = (0.2, 0.3),
                    seed: int = 0) -> ScenarioSpec:
    """
    Rejection-sample a scenario of the given case on the scene.

    Case I and II put both vehicles on the same lane, V1 behind (I) or ahead (II) of V2 by 0.15-0.35 units.
    Case III puts them on opposite lanes meeting each other (straight road, and half of the intersection draws)
    or on crossing routes reaching the crossing around the same time (other intersection draws, roundabouts).
    Nominal meeting/crossing times fall inside the first `window_steps` steps.

    :param scene:           Scene the scenario lives on (its kind drives the case geometry)
    :param case:            Case or its string value
    :param rng:             numpy Generator, the only source of randomness
    :param dt:              Timestep, seconds
    :param steps:           Reference trajectories have steps + 1 positions
    :param window_steps:    Interaction window for the nominal conflict timing
    :param speed_range:     Uniform range of nominal speeds, units/s
    :param seed:            Recorded in the spec
    :return:                ScenarioSpec whose references stay on drivable cells
    """
    case = Case(case)
    routes = scene.routes()
    names = sorted(routes)
    if not names:
        raise ValueError(f"Scene {scene.scene_id} has no lane routes to place vehicles on")
    window = window_steps * dt
    for _ in range(MAX_SCENARIO_TRIES):
        v1_speed, v2_speed = rng.uniform(*speed_range, size=2)
        if case in (Case.I, Case.II):
            name = names[rng.integers(len(names))]
            r1 = r2 = routes[name]
            length = geometry.polyline_arclength(r2)[-1]
            gap = rng.uniform(0.15, 0.35)
            s2 = rng.uniform(0.15, 0.55) * length
            s1 = s2 - gap if case == Case.I else s2 + gap
            v1_speed = v2_speed * rng.uniform(0.9, 1.1)
        else:
            pairs = _conflicting_pairs(scene, routes, names, rng)
            if not pairs:
                raise ValueError(f"Scene kind {scene.kind.value} has no route pair for case III")
            name1, name2, c1, c2 = pairs[rng.integers(len(pairs))]
            r1, r2 = routes[name1], routes[name2]
            t_conflict = rng.uniform(0.4, 0.8) * window
            s1 = c1 - v1_speed * t_conflict
            s2 = c2 - v2_speed * t_conflict
        if min(s1, s2) < 0.02 or s1 > geometry.polyline_arclength(r1)[-1] - 0.05:
            continue
        wobble1, wobble2 = rng.uniform(0.0, 0.1, size=2)
        phase1, phase2 = rng.uniform(0.0, 2.0 * math.pi, size=2)
        x1 = drive_route(r1, s1, v1_speed, steps, dt, wobble1, phase1)
        x2 = drive_route(r2, s2, v2_speed, steps, dt, wobble2, phase2)
        if not (on_road_mask(scene, x1).all() and on_road_mask(scene, x2).all()):
            continue
        if np.hypot(*(x1[0] - x2[0])) < MIN_START_GAP:
            continue
        return ScenarioSpec(case, scene.kind, scene.scene_id, x1[0].copy(), x2[0].copy(), r1, r2,
                            Trajectory(x1, dt), Trajectory(x2, dt), x2[-1].copy(), int(seed))
    raise RuntimeError(f"Could not sample a valid case {case.value} scenario on {scene.scene_id} "
                       f"after {MAX_SCENARIO_TRIES} tries")


OPPOSITE = {"east": "west", "west": "east", "south": "north", "north": "south"}


def _conflicting_pairs(scene: Scene, routes: Dict[str, np.ndarray], names: List[str],
                       rng: np.random.Generator) -> List[Tuple[str, str, float, float]]:
    """
    (V1 route, V2 route, V1 conflict arc length, V2 conflict arc length) candidates for case III
    """
    pairs = []
    use_opposite = scene.kind == SceneKind.STRAIGHT or (scene.kind == SceneKind.INTERSECTION and rng.random() < 0.5)
    if use_opposite:
        for name2 in names:
            name1 = OPPOSITE.get(name2)
            if name1 not in routes:
                continue
            r1, r2 = routes[name1], routes[name2]
            # meeting point: where the lanes pass each other, at a random fraction of V2's route
            c2 = rng.uniform(0.3, 0.6) * geometry.polyline_arclength(r2)[-1]
            meet = geometry.point_at_arclength(r2, c2)
            c1, _ = geometry.project_to_polyline(r1, meet)
            pairs.append((name1, name2, c1, c2))
        return pairs
    return list(_cached_crossing_pairs(*scene.layout_key))


@functools.lru_cache(maxsize=32)
def _cached_crossing_pairs(kind: str, width_px: int, height_px: int, params_json: str) -> tuple:
    routes = _cached_routes(kind, width_px, height_px, params_json)
    names = sorted(routes)
    pairs = []
    for name1 in names:
        for name2 in names:
            if name1 == name2 or name1.split("-")[0] == name2.split("-")[0]:
                continue
            r1, r2 = routes[name1], routes[name2]
            crossings = geometry.polyline_crossings(r1, r2)
            if not crossings:
                continue
            i1, i2 = crossings[0]
            a1, a2 = geometry.polyline_arclength(r1), geometry.polyline_arclength(r2)
            c1 = float(np.interp(i1, np.arange(len(a1)), a1))
            c2 = float(np.interp(i2, np.arange(len(a2)), a2))
            pairs.append((name1, name2, c1, c2))
    return tuple(pairs)


############################################################################################
#                                                                                          #
#                                      ROAD CONSTRAINT                                     #
#                                                                                          #
############################################################################################

def road_loss_tensor(points, offroad: np.ndarray, frame: Frame, sigma: float) -> Tensor:
    """
    Batched, differentiable road loss: for every sample b,
        mean over the grid of (1/K) sum_k (1 - y_b) * Heatmap(points[b, k])
    averaged over the batch. The Gaussian heatmap is separable, so the grid sum is gy^T (1 - y) gx.

    :param points:  Tensor (B, K, 2) of generated key waypoints (the initial position excluded)
    :param offroad: (B, H, W) array of (1 - y)
    :param frame:   Grid frame shared by all samples
    :param sigma:   Heatmap width, normalized units
    :return:        Scalar Tensor
    """
    if sigma is None or sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    points = as_tensor(points)
    scale = -1.0 / (2.0 * sigma ** 2)
    gx = ((points[:, :, 0:1] - frame.column_centers()).square() * scale).exp()      # (B, K, W)
    gy = ((points[:, :, 1:2] - frame.row_centers()).square() * scale).exp()         # (B, K, H)
    mass = ((gy @ np.asarray(offroad, dtype=float)) * gx).sum(axis=2)               # (B, K)
    return mass.mean(axis=1).mean() * (1.0 / (frame.width_px * frame.height_px))


def road_loss(kw: KeyWaypoints, scene: Scene, sigma: float = 0.05) -> float:
    """
    Road-constraint loss of one key-waypoint sequence: the heatmap mass of keypoints 1..m over off-road cells,
    averaged over keypoints and grid cells. Zero iff all mass sits on drivable cells.
    """
    with no_grad():
        value = road_loss_tensor(kw.points[None, 1:, :], scene.offroad[None], scene.frame, sigma)
    return value.item()


def road_loss_grad(kw: KeyWaypoints, scene: Scene, sigma: float = 0.05) -> np.ndarray:
    """
    Gradient of road_loss with respect to every keypoint (row 0, the given start, is zero)
    """
    points = Tensor(kw.points[None, 1:, :].copy(), requires_grad=True)
    road_loss_tensor(points, scene.offroad[None], scene.frame, sigma).backward()
    grad = np.zeros_like(kw.points)
    grad[1:] = points.grad[0]
    return grad


############################################################################################
#                                                                                          #
#                                       SCENE FILES                                        #
#                                                                                          #
############################################################################################

def save_scene(scene: Scene, directory: str) -> str:
    """
    Write `<scene_id>.pgm` (plain P2, 0 = off-road, 255 = drivable) and `<scene_id>.json` (frame and kind)
    :return:    Path of the PGM file
    """
    os.makedirs(directory, exist_ok=True)
    pgm_path = os.path.join(directory, f"{scene.scene_id}.pgm")
    lines = ["P2", f"# routebench scene {scene.scene_id}", f"{scene.width_px} {scene.height_px}", "255"]
    for row in scene.drivable:
        lines.append(" ".join("255" if v else "0" for v in row))
    with open(pgm_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    sidecar = {"scene_id": scene.scene_id, "kind": scene.kind.value, "width_px": scene.width_px,
               "height_px": scene.height_px, "params": scene.params,
               "frame": {"up_left": [-1.0, -1.0], "bottom_right": [1.0, 1.0]}}
    with open(os.path.join(directory, f"{scene.scene_id}.json"), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    logger.debug(f"Scene `{scene.scene_id}` written to {pgm_path}")
    return pgm_path


def load_scene(pgm_path: str) -> Scene:
    """
    Read a scene written by save_scene() (the sidecar JSON must sit next to the PGM)
    """
    with open(pgm_path) as f:
        tokens = [tok for line in f for tok in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{pgm_path} is not a plain (P2) PGM file")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.asarray(tokens[4:4 + width * height], dtype=int)
    if values.size != width * height:
        raise ValueError(f"{pgm_path} holds {values.size} pixels, expected {width * height}")
    drivable = (values.reshape(height, width) > maxval // 2).astype(np.uint8)
    with open(os.path.splitext(pgm_path)[0] + ".json") as f:
        sidecar = json.load(f)
    return Scene(drivable, SceneKind(sidecar["kind"]), Frame(width, height), sidecar["params"], sidecar["scene_id"])
