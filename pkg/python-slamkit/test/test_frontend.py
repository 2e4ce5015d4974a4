import sys, os

sys.path.append(os.path.join(os.path.dirname(__file__), ".."))

import asyncio

import numpy as np
import pytest

from slamkit.frontend import CameraFrontend, FeatureTrack, FrameStats, FrontendParams, select_keyframe
from slamkit.ransac import RansacParams
from slamkit.scenario import ScenarioConfig
from slamkit.simulator import simulate


def run_frontend(dataset, camera_id, params=None, frames=None):
    frontend = CameraFrontend(camera_id, dataset.rig[camera_id], dataset.tracks[camera_id], params)
    outputs = []

    async def drive():
        keyframe_id = 0
        for f, t in enumerate(dataset.frame_times.tolist()[:frames]):
            if await frontend.process_frame(f, t):
                outputs.append((f, await frontend.make_keyframe(keyframe_id, t)))
                keyframe_id += 1

    asyncio.run(drive())
    return frontend, outputs


def test_select_keyframe():
    params = FrontendParams(keyframe_fraction=0.7, keyframe_min_tracks=20, max_keyframe_interval=0.5)
    last = FrameStats(40)
    assert select_keyframe(FrameStats(39), last, 0.5, params)
    assert not select_keyframe(FrameStats(39), last, 0.1, params)
    assert select_keyframe(FrameStats(27), last, 0.1, params)
    assert not select_keyframe(FrameStats(28), last, 0.1, params)
    assert select_keyframe(FrameStats(19), FrameStats(20), 0.1, params)


def test_feature_track():
    track = FeatureTrack(3, 1)
    track.add(0, np.array([1.0, 2.0]))
    track.add(2, np.array([3.0, 4.0]))
    assert len(track) == 2
    with pytest.raises(AssertionError):
        track.add(2, np.array([0.0, 0.0]))


def test_keyframes_on_clean_data():
    dataset = simulate(ScenarioConfig(duration=6.0, laps=0.15, pixel_sigma=0.0, outlier_rate=0.0, landmark_count=800))
    params = FrontendParams(max_tracks=30)
    frontend, outputs = run_frontend(dataset, 0, params)
    assert outputs
    assert outputs[0][0] == 0
    times = [o.timestamp for _, o in outputs]
    assert np.all(np.diff(times) <= params.max_keyframe_interval + 1e-9)
    for _, output in outputs:
        assert 0 < len(output.observations) <= params.max_tracks
        assert output.camera_id == 0
        assert not output.rejected
    # tracks are followed across keyframes
    seen = {}
    for _, output in outputs:
        for track_id in output.observations:
            seen[track_id] = seen.get(track_id, 0) + 1
    assert max(seen.values()) > 3
    assert all(len(frontend.tracks[t]) == seen[t] for t in frontend.tracks)


def test_outlier_tracks_rejected():
    dataset = simulate(ScenarioConfig(duration=8.0, laps=0.2, outlier_rate=0.15, landmark_count=1000, seed=2))
    tracks = dataset.tracks[0]
    outlier_at = {(int(f), int(t)): bool(o) for f, t, o in zip(tracks.frame, tracks.track, tracks.is_outlier)}
    params = FrontendParams(ransac=RansacParams().scaled_to_noise(dataset.config.pixel_sigma))
    frontend, outputs = run_frontend(dataset, 0, params)
    assert any(output.rejected for _, output in outputs)
    # tracks carried over from the previous keyframe went through the epipolar check
    checked = [
        outlier_at[(f, t)]
        for (_, previous), (f, output) in zip(outputs, outputs[1:])
        for t in output.observations
        if t in previous.observations
    ]
    assert len(checked) > 100
    assert np.mean(checked) < 0.03


def test_ransac_can_be_disabled():
    dataset = simulate(ScenarioConfig(duration=4.0, laps=0.1, outlier_rate=0.15, landmark_count=800, seed=2))
    frontend, outputs = run_frontend(dataset, 0, FrontendParams(use_ransac=False))
    assert outputs
    assert not frontend.rejected
    assert not any(output.rejected for _, output in outputs)


def test_occluded_camera_does_not_vote():
    dataset = simulate(ScenarioConfig(duration=4.0, laps=0.1, landmark_count=600, occlusions={0: [(0.0, 4.0)]}))
    frontend, outputs = run_frontend(dataset, 0)
    assert not outputs
    assert not frontend.is_active


def test_dead_tracks_are_evicted():
    dataset = simulate(ScenarioConfig(duration=8.0, laps=0.2, outlier_rate=0.15, landmark_count=1000, seed=2))
    params = FrontendParams(ransac=RansacParams().scaled_to_noise(dataset.config.pixel_sigma))
    frontend, outputs = run_frontend(dataset, 0, params)
    assert len(outputs) > 5
    assert set(frontend.tracks) == set(outputs[-1][1].observations)
    assert frontend.active <= set(frontend.tracks)
    ever_tracked = {t for _, output in outputs for t in output.observations}
    assert len(frontend.tracks) < len(ever_tracked)
    last_frame = outputs[-1][0]
    alive, _ = dataset.tracks[0].observations_at(last_frame)
    assert frontend.rejected <= set(int(t) for t in alive)
