"""
RouteGAN: a recurrent key-waypoint generator conditioned on the scene, V2's goal, V1's start,
a style code q and noise z; a three-branch discriminator (valid / safe / critical); the auxiliary
network Q reconstructing q; their losses and the alternating training loop.
"""

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from logger.logger import logger
from routebench import nn
from routebench.data import Dataset, Label, gamma
from routebench.geometry import Frame, KeyWaypoints, Trajectory, extract_keypoints
from routebench.nn import Conv, Dense, NetworkSpec, ParameterSet, Tensor, as_tensor, concat, no_grad, stack
from routebench.scene import Scene, ScenarioSpec, road_loss_tensor

STYLE_LIMIT = 2.0
BRANCHES = ("VALID", "SAFE", "CRITICAL")
GENERATOR = ("f_scene", "f_g", "f_init", "h_init", "h_2", "f_update", "f_trajectory")
DISCRIMINATOR = ("d_valid", "d_safe", "d_critical")
AUXILIARY = ("q",)
LOSS_TERMS = ("d_valid", "d_safe", "d_critical", "g_valid", "g_safe", "g_critical", "info", "road")
METRIC_COLUMNS = ("step",) + LOSS_TERMS + ("d_accuracy", "on_road_rate", "unrouted")
SCENE_ENCODER = (Conv(8), Conv(16), Conv(32))


class NonFiniteLossError(FloatingPointError):
    """
    Training produced a non-finite loss (or gradient); parameters are those of the last finite step
    """

    def __init__(self, step: int, breakdown: Dict[str, float], message: str = ""):
        self.step = step
        self.breakdown = breakdown
        self.metrics: Optional[pd.DataFrame] = None
        terms = ", ".join(f"{k}={v:.4g}" for k, v in breakdown.items())
        super().__init__(f"Non-finite loss at step {step} ({terms}) {message}".strip())


@dataclass(frozen=True)
class RouteGanConfig:
    alpha: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 10.0
    sigma: float = 0.05
    s: int = 5
    m: int = 6
    c: int = 2
    z_dim: int = 8
    d_h: int = 64
    hidden: int = 64
    embed_dim: int = 32
    width_px: int = 64
    height_px: int = 64
    dt: float = 0.1
    bezier_k: float = 0.25
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 32
    steps: int = 20000
    d_steps: int = 4
    log_every: int = 100

    def __post_init__(self):
        if self.c < 2:
            raise ValueError(f"Style code needs at least 2 dimensions, got c={self.c}")
        for name in ("s", "z_dim", "d_h", "hidden", "embed_dim", "batch_size", "d_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.m < 0 or self.steps < 0:
            raise ValueError(f"m and steps must be non-negative, got m={self.m}, steps={self.steps}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(values: dict) -> "RouteGanConfig":
        known = {f.name for f in fields(RouteGanConfig)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"Unknown RouteGAN settings {sorted(unknown)}")
        return RouteGanConfig(**values)


@dataclass(frozen=True)
class StyleCode:
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 1 or len(q) < 2:
            raise ValueError(f"Style code must be a vector of length >= 2, got shape {q.shape}")
        if not np.all(np.isfinite(q)) or np.any(np.abs(q) > STYLE_LIMIT):
            raise ValueError(f"Style code entries must lie in [-{STYLE_LIMIT}, {STYLE_LIMIT}], got {q}")
        object.__setattr__(self, "q", q)

    @property
    def q1(self) -> float:
        """criticality coefficient"""
        return float(self.q[0])

    @staticmethod
    def of(values, c: int) -> "StyleCode":
        """
        Style from the given leading values, remaining dimensions 0
        """
        values = np.atleast_1d(np.asarray(values, dtype=float))
        if len(values) > c:
            raise ValueError(f"{len(values)} style values given for c={c}")
        return StyleCode(np.concatenate([values, np.zeros(c - len(values))]))


@dataclass(frozen=True)
class NoiseCode:
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim != 1 or not np.all(np.isfinite(z)):
            raise ValueError(f"Noise code must be a finite vector, got {z}")
        object.__setattr__(self, "z", z)

    @staticmethod
    def sample(rng: np.random.Generator, z_dim: int) -> "NoiseCode":
        return NoiseCode(rng.standard_normal(z_dim))


@dataclass(frozen=True)
class GeneratorContext:
    z_scene: np.ndarray
    z_g: np.ndarray
    z_init: np.ndarray
    q: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class GeneratorState:
    h: np.ndarray
    t: int


############################################################################################
#                                                                                          #
#                                           MODEL                                          #
#                                                                                          #
############################################################################################

def network_specs(config: RouteGanConfig) -> Dict[str, NetworkSpec]:
    """
    Architecture of all eleven networks; scene encoders are small strided CNNs on the (1, H, W) drivable image,
    everything else 2-hidden-layer MLPs
    """
    hidden = (config.hidden, config.hidden)
    keypoints = (config.m + 1) * 2
    image = (1, config.height_px, config.width_px)
    embed = config.embed_dim

    def mlp(n_in, n_out, out_act="linear"):
        return nn.mlp_spec(n_in, n_out, hidden, "leaky_relu", out_act)

    def cnn():
        return NetworkSpec(image, SCENE_ENCODER + (Dense(embed, "leaky_relu"),))

    return {
        "f_scene": cnn(),
        "f_g": mlp(2, embed),
        "f_init": mlp(2, embed),
        "h_init": mlp(3 * embed + config.c + config.z_dim, config.d_h, "tanh"),
        "h_2": mlp(2, embed),
        "f_update": mlp(embed + config.d_h, config.d_h, "tanh"),
        "f_trajectory": mlp(config.d_h + config.c + config.z_dim, 2, "tanh"),
        "d_valid.scene": cnn(),
        "d_valid.head": mlp(keypoints + embed, 1),
        "d_safe": mlp(2 * keypoints, 1),
        "d_critical": mlp(2 * keypoints, 1),
        "q.scene": cnn(),
        "q.head": mlp(keypoints + embed, config.c),
    }


class RouteGanModel:
    """
    Parameters of the generator (F_scene, F_g, F_init, H_init, H_2, F_update, F_trajectory),
    the discriminators (D_valid, D_safe, D_critical) and Q in one ParameterSet, plus the hyperparameters.
    """

    def __init__(self, config: RouteGanConfig, params: ParameterSet):
        self.config = config
        self.params = params
        self.specs = network_specs(config)
        missing = [name for name in self.specs if f"{name}.0.weight" not in params]
        if missing:
            raise ValueError(f"Parameters missing for networks {missing}")

    @staticmethod
    def create(config: Optional[RouteGanConfig] = None, seed: int = 0) -> "RouteGanModel":
        config = config or RouteGanConfig()
        params = ParameterSet()
        rng = np.random.default_rng(seed)
        for name, spec in network_specs(config).items():
            nn.init_network(spec, params, name, rng)
        return RouteGanModel(config, params)

    @staticmethod
    def load(path: str) -> Tuple["RouteGanModel", dict]:
        params, config, meta = nn.load_checkpoint(path)
        model = RouteGanModel(RouteGanConfig.from_dict(config["routegan"]), params)
        return model, meta

    def save(self, path: str, run_config: Optional[dict] = None, extra: Optional[dict] = None) -> str:
        """
        :return:    parameters hash
        """
        config = {"routegan": self.config.to_dict(), "run": run_config or {}}
        return nn.save_checkpoint(path, self.params, config, extra)

    @property
    def frame(self) -> Frame:
        return Frame(self.config.width_px, self.config.height_px)

    @property
    def hash(self) -> str:
        return nn.parameters_hash(self.params)

    def apply(self, name: str, x) -> Tensor:
        return nn.apply_network(self.specs[name], self.params, name, x)

    def names(self, groups: Sequence[str]) -> List[str]:
        return self.params.names(groups)

    def scene_image(self, scene: Scene) -> np.ndarray:
        if (scene.width_px, scene.height_px) != (self.config.width_px, self.config.height_px):
            raise ValueError(f"Model expects {self.config.width_px}x{self.config.height_px} scenes, "
                             f"got {scene.width_px}x{scene.height_px}")
        return scene.drivable.astype(float)[None]


############################################################################################
#                                                                                          #
#                                         GENERATOR                                        #
#                                                                                          #
############################################################################################

def encode_batch(model: RouteGanModel, images, goals, x1_init, q, z) -> Tuple[Tuple[Tensor, Tensor, Tensor], Tensor]:
    """
    Batched context encoding: (z_scene, z_g, z_init) and h_init = H_init([z_scene, z_g, z_init, q, z])
    """
    z_scene = model.apply("f_scene", images)
    z_g = model.apply("f_g", goals)
    z_init = model.apply("f_init", x1_init)
    h = model.apply("h_init", concat([z_scene, z_g, z_init, as_tensor(q), as_tensor(z)], axis=1))
    return (z_scene, z_g, z_init), h


def step_batch(model: RouteGanModel, h, q, z, x2_obs) -> Tuple[Tensor, Tensor]:
    """
    h' = F_update([H_2(x2_obs), h]); keypoint = F_trajectory([h', q, z])
    """
    z2 = model.apply("h_2", x2_obs)
    h = model.apply("f_update", concat([z2, as_tensor(h)], axis=1))
    keypoint = model.apply("f_trajectory", concat([h, as_tensor(q), as_tensor(z)], axis=1))
    return h, keypoint


def rollout_batch(model: RouteGanModel, images, goals, x1_init, x2_obs, q, z) -> Tensor:
    """
    Differentiable batched rollout.

    :param images:  (B, 1, H, W) drivable images
    :param goals:   (B, 2) V2 goals
    :param x1_init: (B, 2) V1 start positions
    :param x2_obs:  (B, m, 2) V2 positions at times 0, s, ..., (m-1)s
    :param q:       (B, c) style codes
    :param z:       (B, z_dim) noise, reused at every step
    :return:        Tensor (B, m + 1, 2), row 0 the given start
    """
    x2_obs = np.asarray(x2_obs, dtype=float)
    _, h = encode_batch(model, images, goals, x1_init, q, z)
    points = [as_tensor(np.asarray(x1_init, dtype=float))]
    for k in range(x2_obs.shape[1]):
        h, keypoint = step_batch(model, h, q, z, x2_obs[:, k, :])
        points.append(keypoint)
    return stack(points, axis=1)


def _check_style(model: RouteGanModel, q, z) -> Tuple[np.ndarray, np.ndarray]:
    q = q.q if isinstance(q, StyleCode) else StyleCode(q).q
    z = z.z if isinstance(z, NoiseCode) else NoiseCode(z).z
    if len(q) != model.config.c:
        raise ValueError(f"Style code of length {len(q)}, model has c={model.config.c}")
    if len(z) != model.config.z_dim:
        raise ValueError(f"Noise of length {len(z)}, model has z_dim={model.config.z_dim}")
    return q, z


def encode_context(model: RouteGanModel, scene: Scene, goal, x1_init, q, z) -> Tuple[GeneratorContext, GeneratorState]:
    """
    Pack up the environment for one rollout: state.h = H_init([z_scene, z_g, z_init, q, z]) at step -s
    """
    q, z = _check_style(model, q, z)
    goal = np.asarray(goal, dtype=float).reshape(2)
    x1_init = np.asarray(x1_init, dtype=float).reshape(2)
    with no_grad():
        (z_scene, z_g, z_init), h = encode_batch(model, model.scene_image(scene)[None], goal[None], x1_init[None],
                                                 q[None], z[None])
    ctx = GeneratorContext(z_scene.data[0], z_g.data[0], z_init.data[0], q, z)
    return ctx, GeneratorState(h.data[0], -model.config.s)


def generator_step(model: RouteGanModel, state: GeneratorState, q, z, x2_obs) -> Tuple[GeneratorState, np.ndarray]:
    """
    Consume V2's newest observation (time state.t + s) and emit V1's next key waypoint (time state.t + 2s)
    """
    q, z = _check_style(model, q, z)
    with no_grad():
        h, keypoint = step_batch(model, state.h[None], q[None], z[None], np.asarray(x2_obs, dtype=float).reshape(1, 2))
    return GeneratorState(h.data[0], state.t + model.config.s), keypoint.data[0]


def generator_goal(reference: Trajectory, model: RouteGanModel) -> np.ndarray:
    """
    V2's expected position at the end of the generator horizon (m * s steps ahead)
    """
    index = min(model.config.m * model.config.s, len(reference) - 1)
    return reference.positions[index].copy()


def rollout(model: RouteGanModel, scenario: ScenarioSpec, scene: Scene, q, z, m: Optional[int] = None,
            observe: Optional[Callable[[int, np.ndarray], np.ndarray]] = None) -> KeyWaypoints:
    """
    Generate V1's key waypoints for a scenario.

    :param model:       RouteGanModel
    :param scenario:    Provides V1's start, V2's goal and (by default) V2's observations
    :param scene:       Scene of the scenario
    :param q:           Style code (StyleCode or array)
    :param z:           Noise (NoiseCode or array)
    :param m:           Number of keypoints to generate (default model m)
    :param observe:     observe(t, keypoints so far) -> V2 position at time t for a live opponent;
                        defaults to V2's reference (clamped at its end)
    :return:            KeyWaypoints with m + 1 points, the first one V1's start
    """
    m = model.config.m if m is None else int(m)
    if m < 0:
        raise ValueError(f"m must be non-negative, got {m}")
    s = model.config.s
    reference = scenario.v2_reference.positions
    if observe is None:
        def observe(t, _):
            return reference[min(t, len(reference) - 1)]
    _, state = encode_context(model, scene, generator_goal(scenario.v2_reference, model), scenario.v1_start, q, z)
    points = [np.asarray(scenario.v1_start, dtype=float)]
    for _ in range(m):
        state, keypoint = generator_step(model, state, q, z, observe(state.t + s, np.array(points)))
        points.append(keypoint)
    return KeyWaypoints(np.array(points), s)


############################################################################################
#                                                                                          #
#                                   DISCRIMINATOR AND Q                                    #
#                                                                                          #
############################################################################################

def _flat(points) -> Tensor:
    points = as_tensor(points)
    return points.reshape(points.shape[0], -1)


def discriminate(model: RouteGanModel, branch: str, *inputs) -> Tensor:
    """
    Raw logits, one per batch row.

    VALID:          discriminate(model, "VALID", keypoints (B, m+1, 2), images (B, 1, H, W))
    SAFE/CRITICAL:  discriminate(model, "SAFE", k1 (B, m+1, 2), k2 (B, m+1, 2)), pairs already Gamma-augmented
    """
    branch = str(branch).upper()
    if branch not in BRANCHES:
        raise ValueError(f"Unknown discriminator branch `{branch}`, expected one of {BRANCHES}")
    if len(inputs) != 2:
        raise ValueError(f"Branch {branch} takes 2 inputs, got {len(inputs)}")
    if branch == "VALID":
        keypoints, images = inputs
        features = concat([_flat(keypoints), model.apply("d_valid.scene", images)], axis=1)
        logits = model.apply("d_valid.head", features)
    else:
        k1, k2 = inputs
        logits = model.apply("d_safe" if branch == "SAFE" else "d_critical", concat([_flat(k1), _flat(k2)], axis=1))
    return logits.reshape(-1)


def reconstruct_style(model: RouteGanModel, keypoints, images) -> Tensor:
    """
    Q(x1 keypoints, y): (B, c)
    """
    return model.apply("q.head", concat([_flat(keypoints), model.apply("q.scene", images)], axis=1))


############################################################################################
#                                                                                          #
#                                           BATCHES                                        #
#                                                                                          #
############################################################################################

@dataclass
class TrainingPool:
    """
    Dataset episodes as keypoint arrays (first m+1 keypoints of each vehicle) with scene indices
    """
    k1: np.ndarray              # (N, m+1, 2)
    k2: np.ndarray              # (N, m+1, 2)
    labels: np.ndarray          # (N,) True for CRITICAL
    scene_index: np.ndarray     # (N,)
    images: np.ndarray          # (S, 1, H, W)

    @staticmethod
    def from_dataset(dataset: Dataset, model: RouteGanModel) -> "TrainingPool":
        s, m = model.config.s, model.config.m
        if not dataset.by_label(Label.SAFE) or not dataset.by_label(Label.CRITICAL):
            raise ValueError(f"Training needs both SAFE and CRITICAL episodes, dataset has {dataset.counts()}")
        scene_ids = sorted(dataset.scenes)
        images = np.stack([model.scene_image(dataset.scenes[sid]) for sid in scene_ids])
        k1, k2, labels, index = [], [], [], []
        for ep in dataset.episodes:
            kp1, kp2 = extract_keypoints(ep.x1, s).points, extract_keypoints(ep.x2, s).points
            if len(kp1) < m + 1:
                raise ValueError(f"Episode of {len(ep)} steps is too short for m={m}, s={s}")
            k1.append(kp1[:m + 1])
            k2.append(kp2[:m + 1])
            labels.append(ep.label == Label.CRITICAL)
            index.append(scene_ids.index(dataset.scene_of(ep).scene_id))
        return TrainingPool(np.array(k1), np.array(k2), np.array(labels), np.array(index), images)


@dataclass
class TrainingBatch:
    safe_k1: np.ndarray
    safe_k2: np.ndarray
    critical_k1: np.ndarray
    critical_k2: np.ndarray
    valid_keypoints: np.ndarray
    valid_images: np.ndarray
    images: np.ndarray          # generation conditioning, (B, 1, H, W)
    goals: np.ndarray
    x1_init: np.ndarray
    x2_obs: np.ndarray
    x2_keypoints: np.ndarray
    q: np.ndarray
    z: np.ndarray
    theta_safe: np.ndarray
    theta_critical: np.ndarray
    theta_generated: np.ndarray

    @property
    def offroad(self) -> np.ndarray:
        return 1.0 - self.images[:, 0]


def sample_training_batch(pool: TrainingPool, config: RouteGanConfig, rng: np.random.Generator,
                          batch_size: Optional[int] = None) -> TrainingBatch:
    """
    Real safe and critical pairs, real D_valid samples (either vehicle of any episode), and generation
    conditions taken from random episodes with q ~ U([-2, 2]^c), z ~ N(0, I) and Gamma angles ~ U[0, 2 pi)
    """
    b = config.batch_size if batch_size is None else int(batch_size)
    safe = np.flatnonzero(~pool.labels)
    critical = np.flatnonzero(pool.labels)
    pick_safe = safe[rng.integers(len(safe), size=b)]
    pick_critical = critical[rng.integers(len(critical), size=b)]

    pick_valid = rng.integers(len(pool.labels), size=b)
    vehicle = rng.integers(2, size=b)
    valid = np.where(vehicle[:, None, None] == 0, pool.k1[pick_valid], pool.k2[pick_valid])

    pick_gen = rng.integers(len(pool.labels), size=b)
    m = config.m
    x2 = pool.k2[pick_gen]
    return TrainingBatch(
        safe_k1=pool.k1[pick_safe], safe_k2=pool.k2[pick_safe],
        critical_k1=pool.k1[pick_critical], critical_k2=pool.k2[pick_critical],
        valid_keypoints=valid, valid_images=pool.images[pool.scene_index[pick_valid]],
        images=pool.images[pool.scene_index[pick_gen]],
        goals=x2[:, m].copy(), x1_init=pool.k1[pick_gen, 0].copy(), x2_obs=x2[:, :m].copy(), x2_keypoints=x2,
        q=rng.uniform(-STYLE_LIMIT, STYLE_LIMIT, size=(b, config.c)),
        z=rng.standard_normal((b, config.z_dim)),
        theta_safe=rng.uniform(0.0, 2.0 * math.pi, size=b),
        theta_critical=rng.uniform(0.0, 2.0 * math.pi, size=b),
        theta_generated=rng.uniform(0.0, 2.0 * math.pi, size=b),
    )


def generate(model: RouteGanModel, batch: TrainingBatch) -> Tensor:
    return rollout_batch(model, batch.images, batch.goals, batch.x1_init, batch.x2_obs, batch.q, batch.z)


############################################################################################
#                                                                                          #
#                                          LOSSES                                          #
#                                                                                          #
############################################################################################

def _require(batch: TrainingBatch, *names: str) -> None:
    for name in names:
        if len(getattr(batch, name)) == 0:
            raise ValueError(f"Batch category `{name}` is empty")


def loss_discriminator(model: RouteGanModel, batch: TrainingBatch,
                       generated=None) -> Tuple[Tensor, Dict[str, float]]:
    """
    L^D = L^D_valid + L^D_safe + L^D_critical, each the negated log-likelihood of the branch's real class:
    D_valid: real (keypoints, scene) vs generated; D_safe: real safe vs generated and real critical;
    D_critical: real critical vs generated and real safe. Generated keypoints are constants here.
    """
    _require(batch, "safe_k1", "critical_k1", "valid_keypoints", "x1_init")
    if generated is None:
        with no_grad():
            generated = generate(model, batch)
    fake = as_tensor(generated).detach()
    gen_pair = gamma(fake, batch.x2_keypoints, batch.theta_generated)
    safe_pair = gamma(batch.safe_k1, batch.safe_k2, batch.theta_safe)
    critical_pair = gamma(batch.critical_k1, batch.critical_k2, batch.theta_critical)

    valid_real = discriminate(model, "VALID", batch.valid_keypoints, batch.valid_images)
    valid_fake = discriminate(model, "VALID", fake, batch.images)
    l_valid = -(valid_real.log_sigmoid().mean() + (-valid_fake).log_sigmoid().mean())

    l_safe = -(discriminate(model, "SAFE", *safe_pair).log_sigmoid().mean()
               + (-discriminate(model, "SAFE", *gen_pair)).log_sigmoid().mean()
               + (-discriminate(model, "SAFE", *critical_pair)).log_sigmoid().mean())
    l_critical = -(discriminate(model, "CRITICAL", *critical_pair).log_sigmoid().mean()
                   + (-discriminate(model, "CRITICAL", *gen_pair)).log_sigmoid().mean()
                   + (-discriminate(model, "CRITICAL", *safe_pair)).log_sigmoid().mean())
    total = l_valid + l_safe + l_critical
    accuracy = 0.5 * (np.mean(valid_real.data > 0) + np.mean(valid_fake.data < 0))
    breakdown = {"d_valid": l_valid.item(), "d_safe": l_safe.item(), "d_critical": l_critical.item(),
                 "d_accuracy": float(accuracy)}
    return total, breakdown


def loss_generator(model: RouteGanModel, batch: TrainingBatch, generated) -> Tuple[Tensor, Dict[str, float]]:
    """
    L^G = alpha L^G_valid + L^G_safe + L^G_critical in the non-saturating form (-log D on generated samples).
    Rollouts with q1 < 0 feed D_safe, q1 > 0 feed D_critical, q1 = 0 neither; the pair terms sum over their
    routed rows and divide by the full batch size.
    """
    _require(batch, "x1_init")
    generated = as_tensor(generated)
    b = generated.shape[0]
    q1 = np.asarray(batch.q)[:, 0]
    to_safe, to_critical = (q1 < 0).astype(float), (q1 > 0).astype(float)
    gen_pair = gamma(generated, batch.x2_keypoints, batch.theta_generated)

    l_valid = -discriminate(model, "VALID", generated, batch.images).log_sigmoid().mean()
    l_safe = -(discriminate(model, "SAFE", *gen_pair).log_sigmoid() * to_safe).sum() * (1.0 / b)
    l_critical = -(discriminate(model, "CRITICAL", *gen_pair).log_sigmoid() * to_critical).sum() * (1.0 / b)
    total = l_valid * model.config.alpha + l_safe + l_critical
    breakdown = {"g_valid": l_valid.item(), "g_safe": l_safe.item(), "g_critical": l_critical.item(),
                 "unrouted": int(np.sum(q1 == 0)), "routed_safe": int(to_safe.sum()),
                 "routed_critical": int(to_critical.sum())}
    return total, breakdown


def loss_info(model: RouteGanModel, batch: TrainingBatch, generated) -> Tensor:
    """
    L^Q = 1/2 mean over rollouts of ||q - Q(generated keypoints, y)||^2; gradients reach Q and G
    """
    diff = reconstruct_style(model, generated, batch.images) - np.asarray(batch.q, dtype=float)
    return diff.square().sum(axis=1).mean() * 0.5


def loss_road(model: RouteGanModel, batch: TrainingBatch, generated) -> Tensor:
    generated = as_tensor(generated)
    return road_loss_tensor(generated[:, 1:, :], batch.offroad, model.frame, model.config.sigma)


############################################################################################
#                                                                                          #
#                                          TRAINING                                        #
#                                                                                          #
############################################################################################

def _finite(step: int, loss: Tensor, breakdown: Dict[str, float]) -> None:
    if not np.isfinite(loss.item()) or not all(np.isfinite(v) for v in breakdown.values()):
        raise NonFiniteLossError(step, breakdown)


def _on_road_rate(generated: Tensor, batch: TrainingBatch, model: RouteGanModel) -> float:
    frame = model.frame
    hits = []
    for points, image in zip(generated.data[:, 1:, :], batch.images):
        for p in points:
            i, j = frame.cell_of(p)
            hits.append(image[0, i, j] > 0.5 and abs(p[0]) <= 1.0 and abs(p[1]) <= 1.0)
    return float(np.mean(hits)) if hits else 1.0


def train(model: RouteGanModel, dataset: Dataset, rng: np.random.Generator, steps: Optional[int] = None,
          log_every: Optional[int] = None, callback: Optional[Callable[[int, RouteGanModel], None]] = None,
          callback_every: int = 0, verbose: bool = False) -> Tuple[RouteGanModel, pd.DataFrame]:
    """
    Alternating adversarial training. Every outer step runs d_steps discriminator updates minimizing L^D
    (generator and Q untouched), then one joint update of generator and Q minimizing
        L^G + lambda1 L^Q + lambda2 L_road
    (discriminators untouched). Each update draws a fresh batch from `rng`.
    A step that hits a non-finite loss or gradient is undone as a whole (parameters and Adam state) before
    NonFiniteLossError is raised, so the model holds the last completed step.

    :param model:           Model trained in place
    :param dataset:         Needs SAFE and CRITICAL episodes of at least m * s + 1 steps
    :param rng:             Only source of randomness; same seed, config and dataset give the same parameters
    :param steps:           Outer steps (default config.steps); 0 leaves the model unchanged
    :param log_every:       Log every this many steps (default config.log_every)
    :param callback:        Called as callback(step, model) every callback_every steps
    :param callback_every:  0 disables the callback
    :param verbose:         Log loss terms at INFO (DEBUG otherwise)
    :return:                (model, metrics DataFrame with one row per outer step)
    """
    config = model.config
    steps = config.steps if steps is None else int(steps)
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    log_every = config.log_every if log_every is None else int(log_every)
    pool = TrainingPool.from_dataset(dataset, model)
    d_names = model.names(DISCRIMINATOR)
    gq_names = model.names(GENERATOR + AUXILIARY)
    rows = []
    adam = {"lr": config.lr, "beta1": config.beta1, "beta2": config.beta2}

    for step in range(steps):
        values, state = model.params.snapshot(), model.params.optimizer_snapshot()
        try:
            for _ in range(config.d_steps):
                batch = sample_training_batch(pool, config, rng)
                d_loss, d_terms = loss_discriminator(model, batch)
                _finite(step, d_loss, d_terms)
                model.params.zero_grad()
                d_loss.backward()
                nn.adam_step(model.params, model.params.gradients(d_names), **adam)

            batch = sample_training_batch(pool, config, rng)
            generated = generate(model, batch)
            g_loss, g_terms = loss_generator(model, batch, generated)
            info = loss_info(model, batch, generated)
            road = loss_road(model, batch, generated)
            total = g_loss + info * config.lambda1 + road * config.lambda2
            g_terms.update({"info": info.item(), "road": road.item()})
            _finite(step, total, g_terms)
            model.params.zero_grad()
            total.backward()
            nn.adam_step(model.params, model.params.gradients(gq_names), **adam)
        except NonFiniteLossError as ex:
            model.params.restore(values, state)
            ex.metrics = pd.DataFrame(rows, columns=list(METRIC_COLUMNS))
            raise
        except FloatingPointError as ex:
            model.params.restore(values, state)
            error = NonFiniteLossError(step, {}, str(ex))
            error.metrics = pd.DataFrame(rows, columns=list(METRIC_COLUMNS))
            raise error

        row = {"step": step, "on_road_rate": _on_road_rate(generated, batch, model)}
        row.update({k: d_terms[k] for k in ("d_valid", "d_safe", "d_critical", "d_accuracy")})
        row.update({k: g_terms[k] for k in ("g_valid", "g_safe", "g_critical", "info", "road", "unrouted")})
        rows.append(row)
        if log_every and step % log_every == 0:
            message = f"step {step}: " + ", ".join(f"{k}={row[k]:.4f}" for k in LOSS_TERMS) + \
                      f", d_acc={row['d_accuracy']:.2f}, on_road={row['on_road_rate']:.2f}"
            if verbose:
                logger.info(message)
            else:
                logger.debug(message)
        if callback is not None and callback_every and (step + 1) % callback_every == 0:
            callback(step + 1, model)
    model.params.zero_grad()
    return model, pd.DataFrame(rows, columns=list(METRIC_COLUMNS))


def q_reconstruction(model: RouteGanModel, dataset: Dataset, rng: np.random.Generator, n: int = 200) -> pd.DataFrame:
    """
    Rollouts with random styles on dataset conditions, and Q's reconstruction of them.

    :return:    DataFrame with columns q1, q1_hat, q2, q2_hat, ...; DataFrame.attrs["spearman_q1"] holds the rank
                correlation of q1 with its reconstruction
    """
    pool = TrainingPool.from_dataset(dataset, model)
    batch = sample_training_batch(pool, model.config, rng, batch_size=n)
    with no_grad():
        generated = generate(model, batch)
        q_hat = reconstruct_style(model, generated, batch.images).data
    frame = pd.DataFrame({f"q{i + 1}": batch.q[:, i] for i in range(model.config.c)})
    for i in range(model.config.c):
        frame[f"q{i + 1}_hat"] = q_hat[:, i]
    # DataFrame.corr ranks in pandas itself; Series.corr(method="spearman") would pull in scipy
    frame.attrs["spearman_q1"] = float(frame[["q1", "q1_hat"]].corr(method="spearman").iloc[0, 1])
    frame.attrs["mse_q1"] = float(np.mean((frame["q1"] - frame["q1_hat"]) ** 2))
    return frame


def sample_rollouts(model: RouteGanModel, scenario: ScenarioSpec, scene: Scene, q_values: Sequence[float],
                    rng: np.random.Generator) -> Dict[float, KeyWaypoints]:
    """
    One rollout per q1 value with a shared noise draw (used for training-time previews)
    """
    z = NoiseCode.sample(rng, model.config.z_dim)
    return {q1: rollout(model, scenario, scene, StyleCode.of([q1], model.config.c), z) for q1 in q_values}
