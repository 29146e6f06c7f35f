# Testing of episode labeling, pseudo-critical augmentation, Gamma and the dataset store

import numpy as np
import pytest

from routebench import data
from routebench.data import Dataset, InteractionEpisode, Label, NotApplicableError
from routebench.geometry import Trajectory
from routebench.nn import Tensor
from routebench.scene import SceneKind, make_scene


def line(start, velocity, n=41, dt=0.1):
    t = np.arange(n)[:, None]
    return Trajectory(np.asarray(start, float) + t * np.asarray(velocity, float), dt)


def episode(x1, x2, scene_id="straightroad"):
    return InteractionEpisode.from_trajectories(x1, x2, scene_id)


@pytest.fixture(scope="module")
def scenes():
    return [make_scene(SceneKind.STRAIGHT), make_scene(SceneKind.INTERSECTION)]


@pytest.fixture(scope="module")
def dataset(scenes):
    return data.dataset_build(scenes, 6, 6, np.random.default_rng(0))


def test_label_threshold_is_strict():
    x1 = Trajectory(np.zeros((3, 2)))
    at = Trajectory(np.tile([1.0, 0.0], (3, 1)))
    inside = Trajectory(np.tile([0.999, 0.0], (3, 1)))
    ep = InteractionEpisode(x1, at, "s", Label.SAFE, np.array([1.0, 0.0]))
    assert data.label_episode(ep, r=0.25, margin=0.5) == Label.SAFE
    ep = InteractionEpisode(x1, inside, "s", Label.SAFE, np.array([0.999, 0.0]))
    assert data.label_episode(ep, r=0.25, margin=0.5) == Label.CRITICAL


def test_episode_validation():
    with pytest.raises(ValueError):
        InteractionEpisode(Trajectory(np.zeros((3, 2))), Trajectory(np.zeros((4, 2))), "s", Label.SAFE,
                           np.zeros(2))
    with pytest.raises(ValueError):
        InteractionEpisode(Trajectory(np.zeros((3, 2))), Trajectory(np.zeros((3, 2))), "s", Label.SAFE,
                           np.ones(2))
    ep = episode(line((-0.5, 0.0), (0.02, 0.0)), line((-0.5, 0.5), (0.02, 0.0)))
    assert ep.label == Label.SAFE
    assert ep.min_distance == pytest.approx(0.5)
    assert np.array_equal(ep.goal, ep.x2.positions[-1])


def test_temporal_realignment_perpendicular_paths():
    # V1 reaches the origin at step 30, V2 at step 10
    x1 = line((-0.6, 0.0), (0.02, 0.0))
    x2 = line((0.0, -0.2), (0.0, 0.02))
    ep = episode(x1, x2)
    assert ep.label == Label.SAFE

    out = data.temporal_realignment(ep, np.random.default_rng(0))
    assert out.label == Label.CRITICAL
    assert out.source == "realignment"
    assert np.allclose(out.x1.positions[10], [0.0, 0.0], atol=1e-9)
    assert np.allclose(out.x1.positions[0], x1.positions[20])
    # V1 holds at the end of its path
    assert np.allclose(out.x1.positions[-1], x1.positions[-1])
    assert np.array_equal(out.x2.positions, x2.positions)


def test_temporal_realignment_without_crossing():
    ep = episode(line((-0.5, 0.0), (0.02, 0.0)), line((-0.5, 0.3), (0.02, 0.0)))
    with pytest.raises(NotApplicableError):
        data.temporal_realignment(ep, np.random.default_rng(0))
    assert issubclass(NotApplicableError, ValueError)


def test_local_deformation():
    ep = episode(line((-0.5, 0.0), (0.02, 0.0)), line((-0.5, 0.2), (0.02, 0.0)))
    out = data.local_deformation(ep, np.random.default_rng(1))
    assert out.label == Label.CRITICAL
    assert out.source == "deformation"
    assert np.array_equal(out.x1.positions[0], ep.x1.positions[0])
    assert np.array_equal(out.x1.positions[-1], ep.x1.positions[-1])
    # Displacement only toward V2
    shift = out.x1.positions - ep.x1.positions
    assert np.allclose(shift[:, 0], 0.0)
    assert np.all(shift[:, 1] >= 0.0)


def test_local_deformation_limits():
    ep = episode(line((-0.5, 0.0), (0.02, 0.0)), line((-0.5, 0.2), (0.02, 0.0)))
    same = data.local_deformation(ep, np.random.default_rng(0), amplitude=0.0)
    assert np.array_equal(same.x1.positions, ep.x1.positions)
    assert same.label == Label.SAFE
    with pytest.raises(NotApplicableError):
        data.local_deformation(ep, np.random.default_rng(0), amplitude=0.5)
    far = episode(line((-0.5, 0.0), (0.02, 0.0)), line((-0.5, 0.6), (0.02, 0.0)))
    with pytest.raises(NotApplicableError):
        data.local_deformation(far, np.random.default_rng(0))


def test_gamma_centres_and_rotates():
    rng = np.random.default_rng(2)
    k1, k2 = rng.uniform(-1, 1, (7, 2)), rng.uniform(-1, 1, (7, 2))
    g1, g2 = data.gamma(k1, k2, 0.7)
    both = np.concatenate([g1, g2])
    assert np.allclose(both.mean(axis=0), 0.0, atol=1e-12)
    before = np.hypot(*(k1 - k2).T)
    after = np.hypot(*(g1 - g2).T)
    assert np.allclose(before, after, atol=1e-12)
    # Rotation by pi/2 maps (1, 0) to (0, 1)
    r1, _ = data.gamma(np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]]), np.pi / 2)
    assert np.allclose(r1, [[0.0, 1.0]], atol=1e-12)


def test_gamma_on_tensors_matches_numpy():
    rng = np.random.default_rng(3)
    k1, k2 = rng.uniform(-1, 1, (4, 7, 2)), rng.uniform(-1, 1, (4, 7, 2))
    theta = rng.uniform(0, 2 * np.pi, 4)
    n1, n2 = data.gamma(k1, k2, theta)
    t1, t2 = data.gamma(Tensor(k1), Tensor(k2), theta)
    assert np.allclose(t1.data, n1) and np.allclose(t2.data, n2)


def test_keypoint_pair():
    ep = episode(line((-0.5, 0.0), (0.02, 0.0), n=31), line((-0.5, 0.2), (0.02, 0.0), n=31))
    pair = data.keypoint_pair(ep, 5)
    assert len(pair.k1) == len(pair.k2) == 7
    augmented = data.gamma_augment(pair, 1.0)
    assert np.allclose(np.concatenate([augmented.k1.points, augmented.k2.points]).mean(axis=0), 0.0)


def test_dataset_build(dataset, scenes):
    assert len(dataset) == 12
    assert dataset.counts() == {"SAFE": 6, "CRITICAL": 6}
    assert [ep.label for ep in dataset.episodes[:6]] == [Label.SAFE] * 6
    for ep in dataset.episodes:
        assert len(ep) == 31
        assert data.label_episode(ep) == ep.label
        assert ep.scene_id in {scene.scene_id for scene in scenes}
    assert set(dataset.source_counts()) <= set(data.SOURCES)
    assert dataset.config["s"] == 5 and dataset.config["m"] == 6


def test_dataset_build_is_deterministic(dataset, scenes):
    again = data.dataset_build(scenes, 6, 6, np.random.default_rng(0))
    for a, b in zip(dataset.episodes, again.episodes):
        assert np.array_equal(a.x1.positions, b.x1.positions)
        assert np.array_equal(a.x2.positions, b.x2.positions)
        assert a.source == b.source


def test_dataset_build_errors(scenes):
    with pytest.raises(ValueError):
        data.dataset_build(scenes, 5, 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        data.dataset_build([], 5, 5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        data.dataset_build(scenes, 5, 5, np.random.default_rng(0), critical_mix={"teleport": 1.0})


def test_dataset_files(dataset, tmp_path):
    dataset.save(str(tmp_path / "a"))
    dataset.save(str(tmp_path / "b"))
    for name in ("episodes.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len((tmp_path / "a" / "episodes.jsonl").read_text().splitlines()) == 12

    restored = Dataset.load(str(tmp_path / "a"))
    assert restored.counts() == dataset.counts()
    assert sorted(restored.scenes) == sorted(dataset.scenes)
    assert np.array_equal(restored.episodes[3].x1.positions, dataset.episodes[3].x1.positions)
    assert restored.episodes[7].source == dataset.episodes[7].source

    with pytest.raises(ValueError):
        Dataset.load(str(tmp_path / "missing"))
