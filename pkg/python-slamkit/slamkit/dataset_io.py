from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np

from .camera import CameraModel
from .data import DatasetFormatError
from .geometry import Pose
from .scenario import ScenarioConfig, Trajectory
from .simulator import CameraTracks, Dataset, GroundObservation, IncrementLog

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def fmt(x: float) -> str:
    """ Every float in every artifact is written with 9 significant digits. """
    return f"{float(x):.9g}"


def write_tum(path: PathLike, trajectory: Trajectory):
    """ TUM trajectory: `timestamp tx ty tz qx qy qz qw` per line. """
    with open(path, "w") as f:
        for t, pose in trajectory:
            values = [t, *pose.translation, *pose.as_quaternion()]
            f.write(" ".join(fmt(v) for v in values) + "\n")


def read_tum(path: PathLike) -> Trajectory:
    timestamps: List[float] = []
    poses: List[Pose] = []
    with open(path) as f:
        for line_number, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DatasetFormatError(f"{path}:{line_number}: expected 8 values, got {len(parts)}")
            try:
                values = [float(x) for x in parts]
            except ValueError as e:
                raise DatasetFormatError(f"{path}:{line_number}: {e}")
            timestamps.append(values[0])
            poses.append(Pose.from_quaternion(values[4:8], values[1:4]))
    return Trajectory(timestamps, poses)


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path: PathLike, expected_header: Sequence[str]) -> List[List[str]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(expected_header):
            raise DatasetFormatError(f"{path}: header {header} does not match {list(expected_header)}")
        return [row for row in reader if row]


ODOMETRY_HEADER = ["t0", "t1", "dx", "dy", "dz", "qx", "qy", "qz", "qw"]
TRACKS_HEADER = ["track_id", "timestamp", "u", "v", "is_outlier"]
GROUND_HEADER = ["timestamp", "cam", "x", "y", "z"]


def write_increments(path: PathLike, log: IncrementLog):
    write_csv(
        path,
        ODOMETRY_HEADER,
        (
            [float(t0), float(t1), *map(float, p.translation), *map(float, p.as_quaternion())]
            for t0, t1, p in zip(log.t0, log.t1, log.increments)
        ),
    )


def read_increments(path: PathLike, sigmas) -> IncrementLog:
    rows = read_csv(path, ODOMETRY_HEADER)
    values = np.array(rows, dtype=float).reshape(-1, 9)
    increments = [Pose.from_quaternion(v[5:9], v[2:5]) for v in values]
    return IncrementLog(values[:, 0], values[:, 1], increments, sigmas)


def write_dataset(dataset: Dataset, directory: PathLike):
    """ One directory per scenario; see README for the file list. """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dataset.config.to_json_file(directory / "scenario.json")
    with open(directory / "rig.json", "w") as f:
        json.dump([cam.to_dict() for cam in dataset.rig], f, indent=2, sort_keys=True)
        f.write("\n")
    write_tum(directory / "groundtruth.tum", dataset.groundtruth)
    write_csv(directory / "landmarks.csv", ["id", "x", "y", "z"], ([i, *map(float, p)] for i, p in enumerate(dataset.landmarks)))
    for cam_id, tracks in dataset.tracks.items():
        write_csv(
            directory / f"tracks_cam{cam_id}.csv",
            TRACKS_HEADER,
            (
                [int(tr), float(dataset.frame_times[f]), float(px[0]), float(px[1]), int(o)]
                for f, tr, px, o in zip(tracks.frame, tracks.track, tracks.pixels, tracks.is_outlier)
            ),
        )
        write_csv(
            directory / f"track_landmarks_cam{cam_id}.csv",
            ["track_id", "landmark_id"],
            ([i, int(lm)] for i, lm in enumerate(tracks.track_landmark)),
        )
    for cam_id, pixels in dataset.ground_pixels.items():
        write_csv(directory / f"groundmask_cam{cam_id}.csv", ["u", "v"], ([float(u), float(v)] for u, v in pixels))
    write_increments(directory / "odometry.csv", dataset.inertial)
    write_increments(directory / "wheel_odometry.csv", dataset.wheel)
    write_csv(
        directory / "groundpoints.csv",
        GROUND_HEADER,
        ([obs.timestamp, obs.camera, *map(float, p)] for obs in dataset.ground_observations for p in obs.points),
    )
    logger.info(f"Wrote dataset {dataset.config.name} to {directory}")


def load_dataset(directory: PathLike) -> Dataset:
    directory = Path(directory)
    if not (directory / "scenario.json").exists():
        raise DatasetFormatError(f"{directory} does not contain scenario.json")
    config = ScenarioConfig.from_json_file(directory / "scenario.json")
    with open(directory / "rig.json") as f:
        rig = [CameraModel.from_dict(d) for d in json.load(f)]
    groundtruth = read_tum(directory / "groundtruth.tum")
    landmark_rows = read_csv(directory / "landmarks.csv", ["id", "x", "y", "z"])
    landmarks = np.array(landmark_rows, dtype=float).reshape(-1, 4)[:, 1:]

    duration = groundtruth.end_time - groundtruth.start_time
    frame_times = np.arange(int(np.floor(duration * config.camera_rate + 1e-9)) + 1) / config.camera_rate
    frame_times = frame_times + groundtruth.start_time
    tracks: Dict[int, CameraTracks] = {}
    for cam_id in range(len(rig)):
        rows = read_csv(directory / f"tracks_cam{cam_id}.csv", TRACKS_HEADER)
        values = np.array(rows, dtype=float).reshape(-1, 5)
        frames = np.rint((values[:, 1] - groundtruth.start_time) * config.camera_rate).astype(np.int64)
        mapping = read_csv(directory / f"track_landmarks_cam{cam_id}.csv", ["track_id", "landmark_id"])
        track_landmark = np.array(mapping, dtype=np.int64).reshape(-1, 2)[:, 1]
        tracks[cam_id] = CameraTracks(
            frames, values[:, 0].astype(np.int64), values[:, 2:4], values[:, 4] > 0.5, track_landmark, len(frame_times)
        )
    ground_pixels = {
        cam_id: np.array(read_csv(directory / f"groundmask_cam{cam_id}.csv", ["u", "v"]), dtype=float).reshape(-1, 2)
        for cam_id in range(len(rig))
    }
    grouped: Dict[tuple, List[List[float]]] = {}
    for row in read_csv(directory / "groundpoints.csv", GROUND_HEADER):
        grouped.setdefault((float(row[0]), int(row[1])), []).append([float(x) for x in row[2:5]])
    ground_observations = [GroundObservation(t, cam, np.array(points)) for (t, cam), points in grouped.items()]
    inertial = read_increments(directory / "odometry.csv", config.odometry_sigmas)
    wheel = read_increments(directory / "wheel_odometry.csv", config.wheel_sigmas)
    return Dataset(config, groundtruth, landmarks, rig, frame_times, tracks, inertial, wheel, ground_pixels, ground_observations)
