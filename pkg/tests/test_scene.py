# Testing of scene rasterization, lane routes, scenario sampling and the road loss

import numpy as np
import pytest

from routebench import geometry
from routebench.geometry import Frame, KeyWaypoints
from routebench.scene import Case, Scene, SceneKind, ScenarioSpec, is_on_road, load_scene, make_scene, \
    on_road_mask, road_loss, road_loss_grad, sample_scenario, save_scene


@pytest.fixture(scope="module")
def scenes():
    return {kind: make_scene(kind) for kind in SceneKind}


def test_straight_road_band():
    scene = make_scene("StraightRoad", 64, 64, {"lane_width_px": 9})
    rows = np.flatnonzero(scene.drivable.any(axis=1))
    assert rows.tolist() == list(range(28, 37))
    assert scene.drivable[28:37].all()
    assert scene.kind == SceneKind.STRAIGHT
    assert scene.scene_id == "straightroad"


def test_intersection_is_a_cross(scenes):
    scene = scenes[SceneKind.INTERSECTION]
    assert scene.drivable[32, :].all()
    assert scene.drivable[:, 32].all()
    assert not scene.drivable[0, 0]
    assert not scene.drivable[63, 63]


def test_roundabout_island_and_arms():
    scene = make_scene(SceneKind.ROUNDABOUT, params={"arms": 0})
    assert not is_on_road(scene, (0.0, 0.0))
    assert is_on_road(scene, (0.45, 0.0))
    assert not is_on_road(scene, (0.9, 0.0))
    with_arms = make_scene(SceneKind.ROUNDABOUT)
    assert is_on_road(with_arms, (0.9, 0.0))
    assert not is_on_road(with_arms, (0.0, 0.0))


def test_make_scene_errors():
    with pytest.raises(ValueError):
        make_scene("Highway")
    with pytest.raises(ValueError):
        make_scene(SceneKind.STRAIGHT, 16, 16)
    with pytest.raises(ValueError):
        make_scene(SceneKind.ROUNDABOUT, params={"arms": 2})
    with pytest.raises(ValueError):
        make_scene(SceneKind.ROUNDABOUT, params={"inner_radius": 0.6, "outer_radius": 0.3})


def test_is_on_road(scenes):
    scene = scenes[SceneKind.STRAIGHT]
    assert is_on_road(scene, (0.0, 0.0))
    assert not is_on_road(scene, (0.0, 0.9))
    assert not is_on_road(scene, (1.5, 0.0))
    assert not is_on_road(scene, (float("nan"), 0.0))
    assert on_road_mask(scene, np.array([[0.0, 0.0], [0.0, 0.9]])).tolist() == [True, False]


def test_routes_stay_on_road(scenes):
    assert sorted(scenes[SceneKind.STRAIGHT].routes()) == ["east", "west"]
    assert sorted(scenes[SceneKind.INTERSECTION].routes()) == ["east", "north", "south", "west"]
    assert len(scenes[SceneKind.ROUNDABOUT].routes()) == 12
    for scene in scenes.values():
        for name, route in scene.routes().items():
            assert on_road_mask(scene, route).all(), name

    # East and west lanes run in opposite directions
    routes = scenes[SceneKind.STRAIGHT].routes()
    assert routes["east"][-1, 0] > routes["east"][0, 0]
    assert routes["west"][-1, 0] < routes["west"][0, 0]


def test_routes_are_copies(scenes):
    scene = scenes[SceneKind.STRAIGHT]
    scene.routes()["east"][:] = 5.0
    assert np.abs(scene.routes()["east"]).max() <= 1.0


@pytest.mark.parametrize("case", list(Case))
@pytest.mark.parametrize("kind", list(SceneKind))
def test_sample_scenario(scenes, kind, case):
    scene = scenes[kind]
    spec = sample_scenario(scene, case, np.random.default_rng(4), steps=60)
    assert len(spec.v1_reference) == len(spec.v2_reference) == 61
    assert on_road_mask(scene, spec.v1_reference.positions).all()
    assert on_road_mask(scene, spec.v2_reference.positions).all()
    assert np.array_equal(spec.v2_goal, spec.v2_reference.positions[-1])
    assert np.array_equal(spec.v1_start, spec.v1_reference.positions[0])
    assert np.hypot(*(spec.v1_start - spec.v2_start)) >= 0.1
    if case == Case.I:
        assert np.array_equal(spec.v1_route, spec.v2_route)
        s1, _ = geometry.project_to_polyline(spec.v2_route, spec.v1_start)
        s2, _ = geometry.project_to_polyline(spec.v2_route, spec.v2_start)
        assert s1 < s2
    elif case == Case.II:
        s1, _ = geometry.project_to_polyline(spec.v2_route, spec.v1_start)
        s2, _ = geometry.project_to_polyline(spec.v2_route, spec.v2_start)
        assert s1 > s2
    else:
        assert not np.array_equal(spec.v1_route, spec.v2_route)


def test_sample_scenario_is_deterministic(scenes):
    scene = scenes[SceneKind.INTERSECTION]
    a = sample_scenario(scene, Case.III, np.random.default_rng(9))
    b = sample_scenario(scene, Case.III, np.random.default_rng(9))
    assert np.array_equal(a.v1_reference.positions, b.v1_reference.positions)
    assert np.array_equal(a.v2_reference.positions, b.v2_reference.positions)
    with pytest.raises(ValueError):
        sample_scenario(scene, "IV", np.random.default_rng(0))


def test_scenario_spec_serialization(scenes):
    spec = sample_scenario(scenes[SceneKind.ROUNDABOUT], Case.III, np.random.default_rng(2), seed=2)
    restored = ScenarioSpec.from_dict(spec.to_dict())
    assert restored.case == spec.case and restored.seed == 2
    assert np.array_equal(restored.v2_reference.positions, spec.v2_reference.positions)
    assert np.array_equal(restored.v1_goal, spec.v1_goal)


def test_road_loss():
    frame = Frame(32, 32)
    everywhere = Scene(np.ones((32, 32), dtype=np.uint8), SceneKind.STRAIGHT, frame)
    kw = KeyWaypoints(np.array([[0.0, 0.0], [0.1, 0.0], [0.2, 0.0]]), 5)
    assert road_loss(kw, everywhere) == 0.0

    scene = make_scene(SceneKind.STRAIGHT, 32, 32)
    on_road = road_loss(kw, scene)
    off_road = road_loss(KeyWaypoints(np.array([[0.0, 0.0], [0.1, 0.8], [0.2, 0.8]]), 5), scene)
    assert 0.0 <= on_road < off_road
    # Only keypoints 1..m count
    moved_start = road_loss(KeyWaypoints(np.array([[0.0, 0.9], [0.1, 0.0], [0.2, 0.0]]), 5), scene)
    assert moved_start == pytest.approx(on_road)
    with pytest.raises(ValueError):
        road_loss(kw, scene, sigma=0.0)


def test_road_loss_grad_matches_finite_differences():
    scene = make_scene(SceneKind.INTERSECTION, 32, 32)
    points = np.array([[0.0, 0.0], [0.12, 0.2], [0.3, 0.25]])
    grad = road_loss_grad(KeyWaypoints(points, 5), scene)
    assert np.array_equal(grad[0], [0.0, 0.0])
    h = 1e-6
    for k in (1, 2):
        for d in (0, 1):
            plus, minus = points.copy(), points.copy()
            plus[k, d] += h
            minus[k, d] -= h
            numeric = (road_loss(KeyWaypoints(plus, 5), scene) - road_loss(KeyWaypoints(minus, 5), scene)) / (2 * h)
            assert grad[k, d] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_scene_files(tmp_path, scenes):
    scene = scenes[SceneKind.ROUNDABOUT]
    path = save_scene(scene, str(tmp_path))
    assert path.endswith("roundabout.pgm")
    with open(path) as f:
        assert f.readline().strip() == "P2"
    restored = load_scene(path)
    assert np.array_equal(restored.drivable, scene.drivable)
    assert restored.kind == scene.kind
    assert restored.params == scene.params
    assert restored.scene_id == scene.scene_id
    assert sorted(restored.routes()) == sorted(scene.routes())
