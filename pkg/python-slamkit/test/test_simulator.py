import sys, os

sys.path.append(os.path.join(os.path.dirname(__file__), ".."))

import math

import numpy as np
import pytest

from slamkit.camera import CameraModel, default_rig, project_landmark, projection_jacobians
from slamkit.data import ConfigError, TrajectoryShape
from slamkit.geometry import Pose, between, rotation_about, so3_exp
from slamkit.scenario import ScenarioConfig, generate_trajectory, sample_times
from slamkit.simulator import ground_mask_pixels, simulate, simulate_increments, stream_rng


def small_config(**kwargs) -> ScenarioConfig:
    values = dict(duration=10.0, landmark_count=400, laps=0.25, name="small")
    values.update(kwargs)
    return ScenarioConfig(**values)


def test_sample_times():
    times = sample_times(1.0, 20.0)
    assert len(times) == 21
    assert times[-1] == pytest.approx(1.0)


@pytest.mark.parametrize("shape", [s.value for s in TrajectoryShape])
def test_trajectory_shapes(shape):
    config = ScenarioConfig(shape=shape, duration=20.0, laps=1.0)
    traj = generate_trajectory(config)
    assert len(traj) == int(20.0 * config.odometry_rate) + 1
    assert all(p.is_valid for p in traj.poses[::50])
    if shape == "straight":
        assert traj.length == pytest.approx(config.speed * config.duration, rel=1e-9)
    elif shape == "ramp-loop":
        assert traj.positions[-1][2] == pytest.approx(config.ramp_height)
        assert np.allclose(traj.positions[-1][:2], traj.positions[0][:2], atol=1e-9)
    else:
        # one full lap returns to the start
        assert np.allclose(traj.positions[-1], traj.positions[0], atol=1e-9)


@pytest.mark.parametrize("shape", ["loop", "figure-eight", "ramp-loop"])
def test_default_loops_close(shape):
    config = ScenarioConfig(shape=shape)
    traj = generate_trajectory(config)
    gap = np.linalg.norm(traj.positions[-1][:2] - traj.positions[0][:2])
    assert gap < 0.5
    # revisits need more than one lap
    assert config.laps > 1.0
    if shape != "ramp-loop":
        assert abs(traj.positions[-1][2] - traj.positions[0][2]) < 0.5


def test_trajectory_heading_follows_path():
    traj = generate_trajectory(ScenarioConfig(shape="figure-eight", duration=30.0, laps=1.0))
    for k in range(0, len(traj) - 1, 100):
        velocity = traj.positions[k + 1] - traj.positions[k]
        heading = traj.poses[k].rotation[:, 0]
        cosine = velocity @ heading / np.linalg.norm(velocity)
        assert cosine > 0.99


def test_scenario_config_errors():
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"shape": "loop", "colour": "red"})
    with pytest.raises(ConfigError):
        ScenarioConfig(shape="spiral").validate()
    with pytest.raises(ConfigError):
        ScenarioConfig(camera_rate=200.0, odometry_rate=100.0).validate()
    with pytest.raises(ConfigError):
        ScenarioConfig(occlusions={0: [(5.0, 1.0)]}).validate()


def test_scenario_config_dict():
    config = ScenarioConfig(shape="straight", occlusions={2: [(1.0, 4.0)]}, seed=3)
    again = ScenarioConfig.from_dict(config.to_dict())
    assert again == config
    assert again.is_occluded(2, 2.0)
    assert not again.is_occluded(1, 2.0)


def test_stream_rng_independent():
    a = stream_rng(5, 1).normal(size=4)
    b = stream_rng(5, 1).normal(size=4)
    c = stream_rng(5, 2).normal(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_increments_noise_free():
    traj = generate_trajectory(small_config())
    log = simulate_increments(traj, (0.0, 0.0), stream_rng(0, 1))
    assert len(log) == len(traj) - 1
    assert log.period == pytest.approx(0.01)
    assert log.compose_all().almost_equal(between(traj.poses[0], traj.poses[-1]), 1e-9)


def test_simulate_deterministic():
    config = small_config(seed=7)
    a = simulate(config)
    b = simulate(config)
    assert np.array_equal(a.landmarks, b.landmarks)
    for cam in a.camera_ids:
        assert np.array_equal(a.tracks[cam].pixels, b.tracks[cam].pixels)
        assert np.array_equal(a.tracks[cam].track, b.tracks[cam].track)
    assert all(x.almost_equal(y, 0.0) for x, y in zip(a.inertial.increments, b.inertial.increments))


def test_noise_free_observations_are_projections():
    dataset = simulate(small_config(pixel_sigma=0.0, outlier_rate=0.0))
    for cam_id in dataset.camera_ids:
        tracks = dataset.tracks[cam_id]
        assert len(tracks) > 0
        cam = dataset.rig[cam_id]
        for k in range(0, len(tracks), 97):
            frame, track = tracks.frame[k], tracks.track[k]
            pose = dataset.groundtruth_at(float(dataset.frame_times[frame]))
            expected = project_landmark(cam, pose, dataset.landmarks[dataset.landmark_of(cam_id, track)])
            assert expected is not None
            assert np.allclose(tracks.pixels[k], expected, atol=1e-6)
        assert not np.any(tracks.is_outlier)


def test_pixel_noise_clipped():
    config = small_config(pixel_sigma=1.0, outlier_rate=0.0)
    dataset = simulate(config)
    tracks = dataset.tracks[0]
    cam = dataset.rig[0]
    for k in range(0, len(tracks), 53):
        pose = dataset.groundtruth_at(float(dataset.frame_times[tracks.frame[k]]))
        expected = cam.project_camera_points(
            cam.world_to_camera(pose, dataset.landmarks[[dataset.landmark_of(0, tracks.track[k])]])
        )[0][0]
        assert np.linalg.norm(tracks.pixels[k] - expected) <= 5.0 + 1e-9


def test_occluded_camera_has_no_observations():
    dataset = simulate(small_config(occlusions={1: [(2.0, 5.0)]}))
    tracks = dataset.tracks[1]
    for f, t in enumerate(dataset.frame_times):
        ids, _ = tracks.observations_at(f)
        if 2.0 <= t <= 5.0:
            assert len(ids) == 0
    # tracks restart after the occlusion
    before = set(tracks.observations_at(int(1.9 * 20))[0].tolist())
    after = set(tracks.observations_at(int(5.1 * 20) + 1)[0].tolist())
    assert before and after
    assert not before & after
    assert all(o.camera != 1 or not 2.0 <= o.timestamp <= 5.0 for o in dataset.ground_observations)


def test_ground_observations_on_road():
    dataset = simulate(small_config())
    assert dataset.ground_observations
    for observation in dataset.ground_observations:
        assert np.allclose(observation.points[:, 2], 0.0, atol=1e-9)
    for cam_id, pixels in dataset.ground_pixels.items():
        assert len(pixels) > 0
        assert np.all(dataset.rig[cam_id].in_image(pixels))


def test_ground_mask_range():
    cam = default_rig()[0]
    near = ground_mask_pixels(cam, 20, 5.0)
    far = ground_mask_pixels(cam, 20, 20.0)
    assert 0 < len(near) < len(far)


def test_camera_dict():
    cam = default_rig()[2]
    again = CameraModel.from_dict(cam.to_dict())
    assert again.extrinsic.almost_equal(cam.extrinsic, 1e-12)
    assert np.array_equal(again.intrinsic_matrix, cam.intrinsic_matrix)
    with pytest.raises(ConfigError):
        CameraModel.from_dict({"fx": 1.0})
    with pytest.raises(ConfigError):
        CameraModel(-1.0, 1.0, 10, 10, 20, 20)


def test_project_landmark():
    cam = default_rig()[2]
    body = Pose.identity()
    # front camera looks along body +x
    assert project_landmark(cam, body, np.array([20.0, 0.0, 1.2])) is not None
    assert project_landmark(cam, body, np.array([-20.0, 0.0, 1.2])) is None


def test_projection_jacobians():
    rng = np.random.default_rng(1)
    cam = default_rig()[0]
    step = 1e-6
    for _ in range(20):
        body = Pose(so3_exp(rng.normal(0, 0.3, 3)), rng.normal(0, 2, 3))
        point = cam.camera_pose(body).transform_point(np.array([*rng.uniform(-2, 2, 2), rng.uniform(5, 20)]))
        _, _, d_pose, d_point = projection_jacobians(cam, body.rotation[None], body.translation[None], point[None])

        def pixel(pose, p):
            return projection_jacobians(cam, pose.rotation[None], pose.translation[None], p[None])[0][0]

        numeric_pose = np.zeros((2, 6))
        for k in range(6):
            delta = np.zeros(6)
            delta[k] = step
            numeric_pose[:, k] = (pixel(body.retract(delta), point) - pixel(body.retract(-delta), point)) / (2 * step)
        numeric_point = np.zeros((2, 3))
        for k in range(3):
            delta = np.zeros(3)
            delta[k] = step
            numeric_point[:, k] = (pixel(body, point + delta) - pixel(body, point - delta)) / (2 * step)
        assert np.allclose(d_pose[0], numeric_pose, rtol=1e-5, atol=1e-4)
        assert np.allclose(d_point[0], numeric_point, rtol=1e-5, atol=1e-4)
