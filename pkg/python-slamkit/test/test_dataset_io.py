import sys, os

sys.path.append(os.path.join(os.path.dirname(__file__), ".."))

import numpy as np
import pytest

from slamkit.data import DatasetFormatError
from slamkit.dataset_io import fmt, load_dataset, read_csv, read_tum, write_csv, write_dataset, write_tum
from slamkit.scenario import ScenarioConfig, generate_trajectory
from slamkit.simulator import simulate


def test_fmt():
    assert fmt(1.0) == "1"
    assert fmt(1 / 3) == "0.333333333"
    assert fmt(np.float64(123456.7891234)) == "123456.789"


def test_tum_round_trip(tmp_path):
    traj = generate_trajectory(ScenarioConfig(shape="ramp-loop", duration=10.0, laps=0.5))
    write_tum(tmp_path / "traj.tum", traj)
    again = read_tum(tmp_path / "traj.tum")
    assert np.allclose(again.timestamps, traj.timestamps, atol=1e-9)
    for a, b in zip(again.poses, traj.poses):
        assert a.almost_equal(b, 1e-6)


def test_tum_malformed(tmp_path):
    path = tmp_path / "bad.tum"
    path.write_text("0 1 2 3 0 0 0\n")
    with pytest.raises(DatasetFormatError):
        read_tum(path)
    path.write_text("# comment\n0 1 2 3 0 0 0 one\n")
    with pytest.raises(DatasetFormatError):
        read_tum(path)


def test_csv_header_checked(tmp_path):
    write_csv(tmp_path / "a.csv", ["x", "y"], [[1, 0.5]])
    assert read_csv(tmp_path / "a.csv", ["x", "y"]) == [["1", "0.5"]]
    with pytest.raises(DatasetFormatError):
        read_csv(tmp_path / "a.csv", ["x", "z"])


def test_dataset_round_trip(tmp_path):
    dataset = simulate(ScenarioConfig(duration=3.0, laps=0.05, landmark_count=300, name="io"))
    write_dataset(dataset, tmp_path / "io")
    again = load_dataset(tmp_path / "io")
    assert again.config == dataset.config
    assert len(again.rig) == len(dataset.rig)
    assert np.allclose(again.frame_times, dataset.frame_times)
    assert np.allclose(again.landmarks, dataset.landmarks, rtol=1e-8, atol=1e-8)
    for cam_id, tracks in dataset.tracks.items():
        loaded = again.tracks[cam_id]
        assert np.array_equal(loaded.frame, tracks.frame)
        assert np.array_equal(loaded.track, tracks.track)
        assert np.array_equal(loaded.is_outlier, tracks.is_outlier)
        assert np.array_equal(loaded.track_landmark, tracks.track_landmark)
        assert np.allclose(loaded.pixels, tracks.pixels, rtol=1e-8, atol=1e-8)
        assert np.allclose(again.ground_pixels[cam_id], dataset.ground_pixels[cam_id])
    assert len(again.ground_observations) == len(dataset.ground_observations)
    assert len(again.inertial) == len(dataset.inertial)
    assert again.inertial.compose_all().almost_equal(dataset.inertial.compose_all(), 1e-5)


def test_missing_dataset(tmp_path):
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path)
