"""
Interaction dataset: two-vehicle episodes, safe/critical labeling, the pseudo-critical augmentations
(temporal realignment, local deformation), the normalization-plus-rotation Gamma used by the
discriminators, and the JSONL dataset store.
"""

import json
import math
import os
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from logger.logger import logger
from routebench import geometry
from routebench.geometry import KeyWaypoints, Trajectory
from routebench.scene import Case, Scene, ScenarioSpec, drive_route, load_scene, on_road_mask, sample_scenario, save_scene

COLLISION_RADIUS = 0.03
CRITICAL_MARGIN = 0.02
MAX_DEFORM = 0.3
MAX_EPISODE_TRIES = 200
DATASET_VERSION = 1
SOURCES = ("reference", "conflict", "realignment", "deformation")


class Label(str, Enum):
    SAFE = "SAFE"
    CRITICAL = "CRITICAL"


class NotApplicableError(ValueError):
    """
    An augmentation whose precondition does not hold for the given episode
    """


@dataclass(frozen=True)
class InteractionEpisode:
    """
    x1, x2:   trajectories of V1 and V2 (equal length and timestep)
    goal:     final position of V2
    source:   how the episode was produced (reference, conflict, realignment, deformation)
    """
    x1: Trajectory
    x2: Trajectory
    scene_id: str
    label: Label
    goal: np.ndarray
    source: str = "reference"

    def __post_init__(self):
        if len(self.x1) != len(self.x2):
            raise ValueError(f"Episode trajectories differ in length: {len(self.x1)} vs {len(self.x2)}")
        if self.x1.dt != self.x2.dt:
            raise ValueError(f"Episode trajectories differ in dt: {self.x1.dt} vs {self.x2.dt}")
        if not np.allclose(self.goal, self.x2.positions[-1], atol=1e-12):
            raise ValueError(f"Episode goal {self.goal} is not V2's final position {self.x2.positions[-1]}")

    @property
    def dt(self) -> float:
        return self.x1.dt

    def __len__(self) -> int:
        return len(self.x1)

    @property
    def min_distance(self) -> float:
        return min_distance(self.x1, self.x2)

    @staticmethod
    def from_trajectories(x1: Trajectory, x2: Trajectory, scene_id: str, r: float = COLLISION_RADIUS,
                          margin: float = CRITICAL_MARGIN, source: str = "reference") -> "InteractionEpisode":
        """
        Episode labeled by the labeling rule, goal taken from x2
        """
        label = Label.CRITICAL if min_distance(x1, x2) < 2.0 * r + margin else Label.SAFE
        return InteractionEpisode(x1, x2, scene_id, label, x2.positions[-1].copy(), source)

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "label": self.label.value, "dt": self.dt,
                "x1": self.x1.positions.tolist(), "x2": self.x2.positions.tolist(),
                "goal": self.goal.tolist(), "source": self.source}

    @staticmethod
    def from_dict(record: dict) -> "InteractionEpisode":
        dt = float(record["dt"])
        return InteractionEpisode(Trajectory(np.asarray(record["x1"], dtype=float), dt),
                                  Trajectory(np.asarray(record["x2"], dtype=float), dt),
                                  record["scene_id"], Label(record["label"]),
                                  np.asarray(record["goal"], dtype=float), record.get("source", "reference"))


@dataclass(frozen=True)
class KeypointPair:
    k1: KeyWaypoints
    k2: KeyWaypoints

    def __post_init__(self):
        if self.k1.stride_s != self.k2.stride_s or len(self.k1) != len(self.k2):
            raise ValueError(f"Keypoint sequences disagree: stride {self.k1.stride_s}/{self.k2.stride_s}, "
                             f"count {len(self.k1)}/{len(self.k2)}")


def keypoint_pair(ep: InteractionEpisode, s: int) -> KeypointPair:
    return KeypointPair(geometry.extract_keypoints(ep.x1, s), geometry.extract_keypoints(ep.x2, s))


############################################################################################
#                                                                                          #
#                                         LABELING                                         #
#                                                                                          #
############################################################################################

def min_distance(x1: Trajectory, x2: Trajectory) -> float:
    """
    Minimum over common timesteps of the distance between the two vehicles
    """
    if len(x1) == 0 or len(x2) == 0:
        raise ValueError("Trajectories must be nonempty")
    n = min(len(x1), len(x2))
    return float(np.min(np.hypot(*(x1.positions[:n] - x2.positions[:n]).T)))


def label_episode(ep: InteractionEpisode, r: float = COLLISION_RADIUS, margin: float = CRITICAL_MARGIN) -> Label:
    """
    CRITICAL iff the vehicles come closer than 2r + margin at some timestep (strict inequality)
    """
    return Label.CRITICAL if min_distance(ep.x1, ep.x2) < 2.0 * r + margin else Label.SAFE


def _relabel(ep: InteractionEpisode, x1: Trajectory, source: str, r: float, margin: float) -> InteractionEpisode:
    return InteractionEpisode.from_trajectories(x1, ep.x2, ep.scene_id, r, margin, source)


############################################################################################
#                                                                                          #
#                                   PSEUDO-CRITICAL AUGMENTATION                           #
#                                                                                          #
############################################################################################

def temporal_realignment(ep: InteractionEpisode, rng: np.random.Generator, r: float = COLLISION_RADIUS,
                         margin: float = CRITICAL_MARGIN) -> InteractionEpisode:
    """
    Re-time V1 along its own path so that it reaches a spatial crossing of the two paths at the timestep
    where V2 passes it. Both path shapes are kept; V1 holds at its path ends when the shift runs past them.

    EXAMPLE: perpendicular straight paths crossing at the origin, V1 there 20 steps after V2
             -> V1 is shifted 20 steps earlier and the pair becomes CRITICAL

    :param ep:      Episode (usually SAFE) whose polylines cross
    :param rng:     Picks the crossing when there are several
    :param r:       Collision radius
    :param margin:  Critical margin
    :return:        Relabeled episode with source "realignment"
    """
    crossings = geometry.polyline_crossings(ep.x1.positions, ep.x2.positions)
    if not crossings:
        raise NotApplicableError("V1 and V2 paths never cross spatially")
    i1, i2 = crossings[int(rng.integers(len(crossings)))]
    target = int(round(i2))
    shift = i1 - target
    n = len(ep.x1)
    index = np.clip(np.arange(n) + shift, 0.0, n - 1)
    steps = np.arange(n)
    positions = np.stack([np.interp(index, steps, ep.x1.positions[:, 0]),
                          np.interp(index, steps, ep.x1.positions[:, 1])], axis=1)
    out = _relabel(ep, Trajectory(positions, ep.dt), "realignment", r, margin)
    if out.label != Label.CRITICAL:
        raise NotApplicableError(f"Realignment by {shift:.2f} steps leaves the pair {out.min_distance:.3f} apart")
    logger.debug(f"Realigned V1 by {shift:.2f} steps, min distance now {out.min_distance:.4f}")
    return out


def local_deformation(ep: InteractionEpisode, rng: np.random.Generator, r: float = COLLISION_RADIUS,
                      margin: float = CRITICAL_MARGIN, max_deform: float = MAX_DEFORM,
                      amplitude: Optional[float] = None, half_width: Optional[float] = None) -> InteractionEpisode:
    """
    Push V1 toward V2 with a raised-cosine bump in arc length centred on the timestep of closest approach.
    The endpoints of x1 are kept exactly; the result is relabeled by the labeling rule.

    :param ep:          Episode to deform
    :param rng:         Draws the amplitude when it is not given (just enough to fall under the threshold)
    :param r:           Collision radius
    :param margin:      Critical margin
    :param max_deform:  Largest amplitude allowed, normalized units
    :param amplitude:   Fixed amplitude (0 returns the episode unchanged up to relabeling)
    :param half_width:  Arc-length half width of the bump (default max(0.2, 2 * amplitude))
    :return:            Episode with source "deformation"
    """
    x1, x2 = ep.x1.positions, ep.x2.positions
    n = len(x1)
    if n < 3:
        raise NotApplicableError("Episode too short to deform without moving its endpoints")
    distances = np.hypot(*(x2 - x1).T)
    t_star = 1 + int(np.argmin(distances[1:-1]))
    gap = distances[t_star]
    if amplitude is None:
        amplitude = max(gap - rng.uniform(0.0, 0.5) * (2.0 * r + margin), 0.0)
    if amplitude < 0:
        raise ValueError(f"amplitude must be non-negative, got {amplitude}")
    if amplitude > max_deform:
        raise NotApplicableError(f"Deformation of {amplitude:.3f} exceeds max_deform {max_deform}")
    if amplitude == 0.0:
        return _relabel(ep, ep.x1, "deformation", r, margin)
    direction = (x2[t_star] - x1[t_star]) / gap if gap > 0 else geometry.unit(rng.uniform(0.0, 2.0 * math.pi))
    arclength = geometry.polyline_arclength(x1)
    centre = arclength[t_star]
    width = half_width if half_width is not None else max(0.2, 2.0 * amplitude)
    if arclength[-1] <= 0.0:
        raise NotApplicableError("V1 does not move; no arc length to place the bump on")
    offset = np.abs(arclength - centre) / width
    weight = np.where(offset < 1.0, 0.5 * (1.0 + np.cos(math.pi * np.minimum(offset, 1.0))), 0.0)
    weight[0] = weight[-1] = 0.0
    positions = x1 + amplitude * weight[:, None] * direction[None, :]
    positions[0], positions[-1] = x1[0], x1[-1]
    return _relabel(ep, Trajectory(positions, ep.dt), "deformation", r, margin)


############################################################################################
#                                                                                          #
#                                  GAMMA (NORMALIZE + ROTATE)                              #
#                                                                                          #
############################################################################################

def rotation_matrices(theta) -> np.ndarray:
    """
    U(theta) for a scalar (2, 2) or a vector of angles (B, 2, 2)
    """
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2)


def gamma(x1, x2, theta):
    """
    Subtract the joint mean of both sequences and rotate both by U(theta).
    Works on numpy arrays and on nn.Tensor alike, shapes (..., K, 2); theta is a scalar or one angle per batch row.

    :return:    (x1', x2') of the same type as the inputs
    """
    count = x1.shape[-2] + x2.shape[-2]
    mean = (x1.sum(axis=-2, keepdims=True) + x2.sum(axis=-2, keepdims=True)) * (1.0 / count)
    # row vectors: p' = p U^T
    rot_t = np.swapaxes(rotation_matrices(theta), -1, -2)
    return (x1 - mean) @ rot_t, (x2 - mean) @ rot_t


def gamma_augment(pair: KeypointPair, theta: float) -> KeypointPair:
    """
    Gamma applied to a keypoint pair; the output is zero-mean over all 2(m+1) points and pairwise distances are kept
    """
    p1, p2 = gamma(pair.k1.points, pair.k2.points, float(theta))
    return KeypointPair(KeyWaypoints(p1, pair.k1.stride_s), KeyWaypoints(p2, pair.k2.stride_s))


############################################################################################
#                                                                                          #
#                                          DATASET                                         #
#                                                                                          #
############################################################################################

@dataclass
class Dataset:
    """
    scenes:     scene_id -> Scene
    episodes:   all episodes in build order
    config:     dataset-level settings (s, m, dt, r, margin, ...)
    """
    scenes: Dict[str, Scene]
    episodes: List[InteractionEpisode]
    config: dict

    def __len__(self) -> int:
        return len(self.episodes)

    def by_label(self, label) -> List[InteractionEpisode]:
        label = Label(label)
        return [ep for ep in self.episodes if ep.label == label]

    def counts(self) -> Dict[str, int]:
        return dict(Counter(ep.label.value for ep in self.episodes))

    def source_counts(self) -> Dict[str, int]:
        return dict(Counter(ep.source for ep in self.episodes))

    def scene_of(self, ep: InteractionEpisode) -> Scene:
        try:
            return self.scenes[ep.scene_id]
        except KeyError:
            raise ValueError(f"Episode refers to unknown scene `{ep.scene_id}`")

    def save(self, directory: str) -> str:
        """
        Write episodes.jsonl, one PGM + JSON per scene under scenes/, and manifest.json
        :return:    Path of the manifest
        """
        os.makedirs(directory, exist_ok=True)
        scene_files = [os.path.relpath(save_scene(scene, os.path.join(directory, "scenes")), directory)
                       for scene in self.scenes.values()]
        with open(os.path.join(directory, "episodes.jsonl"), "w") as f:
            for ep in self.episodes:
                f.write(json.dumps(ep.to_dict()) + "\n")
        manifest = {"version": DATASET_VERSION, "episodes": "episodes.jsonl", "scenes": scene_files,
                    "config": self.config, "counts": self.counts()}
        manifest_path = os.path.join(directory, "manifest.json")
        with open(manifest_path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        logger.info(f"Dataset of {len(self)} episodes {self.counts()} written to {directory}")
        return manifest_path

    @staticmethod
    def load(directory: str) -> "Dataset":
        manifest_path = os.path.join(directory, "manifest.json")
        if not os.path.exists(manifest_path):
            raise ValueError(f"No dataset manifest at {manifest_path}")
        with open(manifest_path) as f:
            manifest = json.load(f)
        if manifest.get("version") != DATASET_VERSION:
            raise ValueError(f"Unsupported dataset version {manifest.get('version')}")
        scenes = {}
        for name in manifest["scenes"]:
            scene = load_scene(os.path.join(directory, name))
            scenes[scene.scene_id] = scene
        with open(os.path.join(directory, manifest["episodes"])) as f:
            episodes = [InteractionEpisode.from_dict(json.loads(line)) for line in f if line.strip()]
        dataset = Dataset(scenes, episodes, manifest["config"])
        for ep in episodes:
            dataset.scene_of(ep)
        logger.debug(f"Loaded {len(episodes)} episodes over {len(scenes)} scenes from {directory}")
        return dataset


def _route_state(spec: ScenarioSpec):
    """
    V1's start arc length and nominal speed along its route
    """
    s0, _ = geometry.project_to_polyline(spec.v1_route, spec.v1_start)
    travelled = np.sum(np.hypot(*np.diff(spec.v1_reference.positions, axis=0).T))
    duration = (len(spec.v1_reference) - 1) * spec.v1_reference.dt
    return s0, travelled / duration if duration > 0 else 0.0


def _v1_variant(spec: ScenarioSpec, rng: np.random.Generator, offset_scale: float) -> Trajectory:
    s0, speed = _route_state(spec)
    steps = len(spec.v2_reference) - 1
    s_start = max(s0 + rng.uniform(-offset_scale, offset_scale), 0.0)
    positions = drive_route(spec.v1_route, s_start, speed * rng.uniform(0.8, 1.2), steps, spec.v2_reference.dt,
                            rng.uniform(0.0, 0.1), rng.uniform(0.0, 2.0 * math.pi))
    return Trajectory(positions, spec.v2_reference.dt)


def _safe_episode(scene: Scene, spec: ScenarioSpec, rng: np.random.Generator, r: float,
                  margin: float) -> Optional[InteractionEpisode]:
    for _ in range(20):
        x1 = _v1_variant(spec, rng, 0.4)
        ep = InteractionEpisode.from_trajectories(x1, spec.v2_reference, scene.scene_id, r, margin)
        if ep.label == Label.SAFE and on_road_mask(scene, x1.positions).all():
            return ep
    return None


def _conflict_episode(scene: Scene, spec: ScenarioSpec, rng: np.random.Generator, r: float,
                      margin: float) -> InteractionEpisode:
    """
    V1 timed along its own lane so that it is where V2 is at a sampled conflict step
    """
    x2 = spec.v2_reference.positions
    threshold = 2.0 * r + margin
    candidates = []
    route_arc = geometry.polyline_arclength(spec.v1_route)
    for t in range(1, len(x2)):
        s, lateral = geometry.project_to_polyline(spec.v1_route, x2[t], route_arc)
        if lateral < 0.5 * threshold:
            candidates.append((t, s))
    if not candidates:
        raise NotApplicableError("V2 never enters V1's lane")
    t_c, s_c = candidates[int(rng.integers(len(candidates)))]
    _, speed = _route_state(spec)
    speed *= rng.uniform(0.8, 1.2)
    dt = spec.v2_reference.dt
    s_start = s_c - speed * t_c * dt
    if s_start < 0.0:
        speed, s_start = s_c / (t_c * dt), 0.0
    positions = drive_route(spec.v1_route, s_start, speed, len(x2) - 1, dt)
    return InteractionEpisode.from_trajectories(Trajectory(positions, dt), spec.v2_reference, scene.scene_id,
                                                r, margin, "conflict")


def dataset_build(scenes: Sequence[Scene], n_safe: int, n_critical: int, rng: np.random.Generator,
                  s: int = 5, m: int = 6, dt: float = 0.1, r: float = COLLISION_RADIUS,
                  margin: float = CRITICAL_MARGIN, max_deform: float = MAX_DEFORM,
                  critical_mix: Optional[Dict[str, float]] = None, verbose: bool = False) -> Dataset:
    """
    Synthesize a labeled interaction dataset on the given scenes.

    SAFE episodes: a scenario of a random case on a random scene, V1 re-timed along its lane until the pair is SAFE
    and V1 stays on road. CRITICAL episodes: drawn from `critical_mix` sources, i.e. directly constructed
    conflicts (V1 timed into V2's position), temporal realignment and local deformation of SAFE episodes.
    Every episode is labeled by label_episode and has m * s + 1 timesteps; each one draws from its own RNG
    stream spawned from one SeedSequence.

    :param scenes:          Scenes to draw scenarios on (unique scene_id)
    :param n_safe:          Number of SAFE episodes, > 0
    :param n_critical:      Number of CRITICAL episodes, > 0
    :param rng:             Source of the root seed
    :param s:               Keypoint stride
    :param m:               Keypoints per generated route
    :param dt:              Timestep
    :param r:               Collision radius
    :param margin:          Critical margin
    :param max_deform:      Cap on local deformation amplitude
    :param critical_mix:    Weights of the CRITICAL sources {"conflict", "realignment", "deformation"}
    :param verbose:         Log progress
    :return:                Dataset, SAFE episodes first
    """
    if n_safe <= 0 or n_critical <= 0:
        raise ValueError(f"n_safe and n_critical must be positive, got {n_safe}, {n_critical}")
    if not scenes:
        raise ValueError("At least one scene is required")
    ids = [scene.scene_id for scene in scenes]
    if len(set(ids)) != len(ids):
        raise ValueError(f"Scene ids must be unique, got {ids}")
    mix = critical_mix or {"conflict": 1.0, "realignment": 1.0, "deformation": 1.0}
    unknown = set(mix) - set(SOURCES[1:])
    if unknown or sum(mix.values()) <= 0:
        raise ValueError(f"Invalid critical_mix {mix}")
    sources = sorted(mix)
    weights = np.array([mix[k] for k in sources], dtype=float)
    weights /= weights.sum()

    steps = m * s
    root = np.random.SeedSequence(int(rng.integers(2 ** 63)))
    streams = [np.random.default_rng(child) for child in root.spawn(n_safe + n_critical)]
    episodes = []
    for i, erng in enumerate(streams):
        wanted = Label.SAFE if i < n_safe else Label.CRITICAL
        episode = None
        for _ in range(MAX_EPISODE_TRIES):
            scene = scenes[int(erng.integers(len(scenes)))]
            case = list(Case)[int(erng.integers(len(Case)))]
            spec = sample_scenario(scene, case, erng, dt=dt, steps=steps, window_steps=steps,
                                   seed=int(erng.integers(2 ** 31)))
            try:
                if wanted == Label.SAFE:
                    episode = _safe_episode(scene, spec, erng, r, margin)
                else:
                    source = sources[int(erng.choice(len(sources), p=weights))]
                    if source == "conflict":
                        episode = _conflict_episode(scene, spec, erng, r, margin)
                    else:
                        base = _safe_episode(scene, spec, erng, r, margin)
                        if base is None:
                            continue
                        if source == "realignment":
                            episode = temporal_realignment(base, erng, r, margin)
                        else:
                            episode = local_deformation(base, erng, r, margin, max_deform)
            except NotApplicableError as ex:
                logger.debug(f"Episode {i}: {ex}")
                episode = None
            if episode is not None and episode.label == wanted:
                break
            episode = None
        if episode is None:
            raise RuntimeError(f"Could not build a {wanted.value} episode after {MAX_EPISODE_TRIES} tries")
        episodes.append(episode)
        if verbose and (i + 1) % 100 == 0:
            logger.info(f"Built {i + 1}/{len(streams)} episodes")

    config = {"s": s, "m": m, "dt": dt, "r": r, "margin": margin, "max_deform": max_deform,
              "critical_mix": {k: float(v) for k, v in mix.items()}, "steps": steps}
    dataset = Dataset({scene.scene_id: scene for scene in scenes}, episodes, config)
    if verbose:
        logger.info(f"Dataset labels {dataset.counts()}, sources {dataset.source_counts()}")
    return dataset
