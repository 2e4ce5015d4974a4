import sys, os

sys.path.append(os.path.join(os.path.dirname(__file__), ".."))

import numpy as np
import pytest

from slamkit.camera import CameraModel, camera_extrinsic, default_rig
from slamkit.data import ArgumentError, DegeneracyError, UndefinedMetricError
from slamkit.geometry import Pose, rotation_about, unit_vector
from slamkit.ground_mask import GroundMask
from slamkit.homography import backproject_mask, compute_ground_homography
from slamkit.mapping import MappingParams, RampSurface, build_map, ground_truth_surface
from slamkit.mesh import GROUND_PLANE, Mesh, Plane, reconstruction_error
from slamkit.scenario import ScenarioConfig, generate_trajectory
from slamkit.simulator import simulate
from slamkit.tsdf import TsdfGrid, extract_mesh, free_voxels, integrate


def ray_plane_points(cam: CameraModel, pixels: np.ndarray) -> np.ndarray:
    rays = cam.normalized(pixels) @ cam.extrinsic.rotation.T
    origin = cam.extrinsic.translation
    return origin + (-origin[2] / rays[:, 2])[:, None] * rays


def in_region_pixels(cam: CameraModel, homography, rng, count=1000, max_range=50.0) -> np.ndarray:
    pixels = rng.uniform((0, 0), (cam.width, cam.height), (count, 2))
    pixels = pixels[homography.is_valid(pixels)]
    distance = np.linalg.norm(ray_plane_points(cam, pixels) - cam.extrinsic.translation, axis=1)
    return pixels[distance <= max_range]


@pytest.mark.parametrize("camera_id", [0, 1, 2, 3])
def test_homography_matches_ray_casting(camera_id):
    rng = np.random.default_rng(camera_id)
    cam = default_rig()[camera_id]
    homography = compute_ground_homography(cam)
    pixels = in_region_pixels(cam, homography, rng)
    assert len(pixels) > 100
    expected = ray_plane_points(cam, pixels)
    assert np.allclose(homography.ground_points(pixels), expected, rtol=0, atol=1e-9)
    assert np.allclose(homography.project(homography.ground_xy(pixels)), pixels, rtol=0, atol=1e-9)


def test_homography_random_cameras():
    rng = np.random.default_rng(10)
    for _ in range(20):
        extrinsic = camera_extrinsic(rng.uniform(-180, 180), rng.uniform(5, 80), (rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(0.5, 3)))
        cam = CameraModel(300.0, 310.0, 330.0, 250.0, 640, 480, extrinsic)
        homography = compute_ground_homography(cam)
        pixels = in_region_pixels(cam, homography, rng)
        body = Pose(rotation_about((0, 0, 1), rng.uniform(-3, 3)), rng.normal(0, 10, 3))
        cloud = backproject_mask(pixels, homography, body)
        assert cloud.skipped == 0
        assert np.allclose(cloud.points, body.transform_points(ray_plane_points(cam, pixels)), rtol=0, atol=1e-9)


def test_straight_down_camera():
    cam = CameraModel(320.0, 320.0, 320.0, 240.0, 640, 480, camera_extrinsic(0.0, 90.0, (0.5, -0.3, 1.5)))
    homography = compute_ground_homography(cam)
    assert np.allclose(homography.ground_xy(np.array([[320.0, 240.0]])), [[0.5, -0.3]], atol=1e-12)
    mask = GroundMask.from_pixels(np.array([[u, v] for u in range(0, 640, 40) for v in range(0, 480, 40)]), 640, 480)
    cloud = backproject_mask(mask, homography, Pose.identity())
    assert len(cloud.points) == len(mask)
    assert np.all(np.abs(cloud.points[:, 2]) <= 1e-12)


def test_horizon_pixels_rejected():
    cam = default_rig()[2]
    homography = compute_ground_homography(cam)
    a, b, c = homography.horizon
    u = 320.0
    on_line = np.array([[u, -(a * u + c) / b]])
    assert not homography.is_valid(on_line)[0]
    above = on_line - np.array([[0.0, 5.0]]) * np.sign(b)
    result = backproject_mask(np.vstack([above, on_line]), homography, Pose.identity())
    assert result.skipped == 2
    assert len(result.points) == 0


def test_homography_degenerate_cameras():
    with pytest.raises(DegeneracyError):
        compute_ground_homography(CameraModel(320.0, 320.0, 320.0, 240.0, 640, 480, camera_extrinsic(0.0, 0.0, (0, 0, 1.2))))
    with pytest.raises(DegeneracyError):
        compute_ground_homography(CameraModel(320.0, 320.0, 320.0, 240.0, 640, 480, camera_extrinsic(0.0, 30.0, (0, 0, 0))))


def test_backproject_empty():
    homography = compute_ground_homography(default_rig()[0])
    cloud = backproject_mask(np.zeros((0, 2)), homography, Pose.identity())
    assert cloud.points.shape == (0, 3)
    assert cloud.skipped == 0
    assert len(backproject_mask(GroundMask.empty(640, 480), homography, Pose.identity()).points) == 0


def test_backprojection_matches_simulated_ground():
    dataset = simulate(ScenarioConfig(duration=4.0, laps=0.1, landmark_count=200))
    homographies = {c: compute_ground_homography(dataset.rig[c]) for c in dataset.camera_ids}
    for observation in dataset.ground_observations:
        pose = dataset.groundtruth_at(observation.timestamp)
        cloud = backproject_mask(dataset.ground_pixels[observation.camera], homographies[observation.camera], pose)
        assert cloud.skipped == 0
        assert np.allclose(cloud.points, observation.points, rtol=0, atol=1e-9)


def test_ground_mask():
    mask = GroundMask.from_pixels(np.array([[3.7, 1.2], [0.0, 0.0], [700.0, 5.0]]), 640, 480)
    assert len(mask) == 2
    assert mask[(3, 1)]
    assert not mask[(1, 3)]
    copy = mask.copy()
    copy[(1, 3)] = True
    assert not mask.is_set((1, 3))
    assert np.array_equal(mask.pixels(), [[0.0, 0.0], [3.0, 1.0]])


def test_single_ray():
    grid = TsdfGrid(0.2, 0.4)
    origin = np.array([0.1, 0.1, 0.1])
    integrate(grid, origin, origin[None] + np.array([[2.05, 0.0, 0.0]]))
    assert np.all(grid.weight == 1.0)
    assert np.all(np.abs(grid.tsdf) <= grid.truncation)
    assert set(grid.indices[:, 0].tolist()) == set(range(13))
    assert np.all(grid.indices[:, 1:] == 0)
    tsdf, _ = grid.voxel((10, 0, 0))
    assert abs(tsdf) < grid.voxel_size
    free = free_voxels(grid)
    assert sorted(np.round(free[:, 0] / 0.2 - 0.5).astype(int).tolist()) == list(range(9))
    assert grid.voxel((20, 0, 0)) is None


def test_integrate_empty_cloud():
    grid = TsdfGrid()
    integrate(grid, np.zeros(3), np.zeros((0, 3)))
    assert len(grid) == 0
    assert extract_mesh(grid).is_empty


def test_integration_order_independent():
    rng = np.random.default_rng(0)
    clouds = [
        (np.array([0.0, 0.0, 1.5]), np.column_stack([rng.uniform(-3, 3, (200, 2)), np.zeros(200)])),
        (np.array([1.0, 0.5, 1.2]), np.column_stack([rng.uniform(-2, 4, (200, 2)), np.zeros(200)])),
    ]
    forward, backward = TsdfGrid(), TsdfGrid()
    for origin, cloud in clouds:
        integrate(forward, origin, cloud)
    for origin, cloud in reversed(clouds):
        integrate(backward, origin, cloud)
    assert len(forward) == len(backward)
    order = np.argsort(forward.keys)
    values, found = backward.lookup(forward.keys[order])
    assert np.all(found)
    assert np.allclose(forward.tsdf[order], values, rtol=0, atol=1e-12)


def test_plane_from_rays():
    rng = np.random.default_rng(1)
    grid = TsdfGrid(0.2, 0.4)
    xs, ys = np.meshgrid(np.arange(-4, 4, 0.1), np.arange(-3, 3, 0.1))
    pattern = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)])
    for x in np.linspace(0.0, 10.0, 50):
        origin = np.array([x, rng.uniform(-1, 1), 1.5])
        integrate(grid, origin, pattern + np.array([x, 0.0, 0.0]))
    mesh = extract_mesh(grid)
    assert not mesh.is_empty
    # the zero crossing stays between the voxel centers just above and below the plane
    assert np.max(GROUND_PLANE.distances(mesh.vertices)) <= 0.5 * grid.voxel_size + 1e-9
    assert reconstruction_error(mesh, surface=GROUND_PLANE) < 0.5 * grid.voxel_size
    free = free_voxels(grid)
    assert np.all(free[:, 2] > 0)


def test_mesh_of_linear_field_is_exact():
    normal = unit_vector((0.1, 0.2, 1.0))
    plane = Plane(normal, 0.05)
    grid = TsdfGrid.from_sdf(lambda p: p @ normal - 0.05, (-1, -1, -1), (1, 1, 1), 0.2, 0.4)
    mesh = extract_mesh(grid)
    assert not mesh.is_empty
    assert np.max(plane.distances(mesh.vertices)) < 1e-9
    assert np.all(mesh.areas() > 1e-12)
    assert mesh.triangles.max() < len(mesh.vertices)


def test_sphere_mesh():
    grid = TsdfGrid.from_sdf(lambda p: np.linalg.norm(p, axis=1) - 2.0, (-2.5,) * 3, (2.5,) * 3, 0.1, 0.2)
    mesh = extract_mesh(grid)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert len(mesh) > 1000
    assert np.max(np.abs(radii - 2.0)) < 0.5 * 0.1


def test_reconstruction_error():
    vertices = np.array([[0, 0, 0.05], [1, 0, 0.05], [0, 1, 0.05], [1, 1, 0.05]])
    mesh = Mesh(vertices, [[0, 1, 2], [1, 3, 2]])
    assert reconstruction_error(mesh, surface=GROUND_PLANE) == pytest.approx(0.05)
    assert reconstruction_error(Mesh(vertices - [0, 0, 0.05], mesh.triangles), surface=GROUND_PLANE) == 0.0
    with pytest.raises(UndefinedMetricError):
        reconstruction_error(Mesh.empty(), surface=GROUND_PLANE)


def test_reconstruction_error_against_points():
    rng = np.random.default_rng(2)
    points = rng.uniform(-1, 1, (300, 3))
    vertices = rng.uniform(-1, 1, (40, 3))
    mesh = Mesh(vertices, [[0, 1, 2]])
    nearest = np.min(np.linalg.norm(vertices[:, None, :] - points[None, :, :], axis=2), axis=1)
    assert reconstruction_error(mesh, points=points) == pytest.approx(np.sqrt(np.mean(nearest ** 2)), abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        reconstruction_error(mesh, points=np.zeros((0, 3)))


def test_obj_round_trip(tmp_path):
    grid = TsdfGrid.from_sdf(lambda p: np.linalg.norm(p, axis=1) - 1.0, (-1.5,) * 3, (1.5,) * 3, 0.2, 0.4)
    mesh = extract_mesh(grid)
    path = tmp_path / "mesh.obj"
    mesh.write_obj(path)
    again = Mesh.read_obj(path)
    assert np.array_equal(again.triangles, mesh.triangles)
    assert np.allclose(again.vertices, mesh.vertices, rtol=1e-8, atol=1e-9)


def test_mapping_params():
    with pytest.raises(ArgumentError):
        MappingParams(voxel_size=0.0)
    with pytest.raises(ArgumentError):
        MappingParams(voxel_size=0.2, truncation=0.1)


def test_ramp_surface():
    config = ScenarioConfig(shape="ramp-loop", duration=30.0, laps=1.5)
    surface = ground_truth_surface(config)
    assert isinstance(surface, RampSurface)
    road = generate_trajectory(config).positions[::25]
    assert np.max(surface.distances(road)) < 1e-9
    assert np.allclose(surface.distances(road + [0.0, 0.0, 0.3]), 0.3 * np.cos(np.arctan(3.0 / (2 * np.pi * 25.0))))
    assert ground_truth_surface(ScenarioConfig()) is GROUND_PLANE


def test_map_with_ground_truth_poses():
    dataset = simulate(ScenarioConfig(duration=10.0, laps=0.25, landmark_count=200))
    result = build_map(dataset, dataset.groundtruth)
    assert result.integrated_frames == len(dataset.ground_observations)
    assert result.skipped_pixels == 0
    assert len(result.free_space) > 0
    assert result.error_against(ground_truth_surface(dataset.config)) < 0.1
    only_front = build_map(dataset, dataset.groundtruth, cameras=[2])
    assert only_front.integrated_frames == sum(o.camera == 2 for o in dataset.ground_observations)


@pytest.mark.slow
def test_map_of_ramp_with_ground_truth_poses():
    dataset = simulate(ScenarioConfig(shape="ramp-loop", duration=40.0, laps=1.0, landmark_count=200))
    result = build_map(dataset, dataset.groundtruth)
    assert result.error_against(ground_truth_surface(dataset.config)) < 0.1
