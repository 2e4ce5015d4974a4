import sys, os

sys.path.append(os.path.join(os.path.dirname(__file__), ".."))
sys.path.append(os.path.join(os.path.dirname(__file__), "..", ".."))

import json

import numpy as np
import pytest

import run
from slamkit.data import ConfigError
from slamkit.dataset_io import read_csv, read_tum, write_tum
from slamkit.main import ABLATION_HEADER, AblationSuite, RunConfig, params_from_dict, prepare_vio, run_ablation, run_pipeline
from slamkit.frontend import FrontendParams
from slamkit.scenario import ScenarioConfig, generate_trajectory

NOISE_FREE = dict(duration=8.0, laps=0.2, pixel_sigma=0.0, outlier_rate=0.0, odometry_sigmas=(0.0, 0.0), landmark_count=800)
SHORT = dict(duration=8.0, laps=0.2, landmark_count=800, name="short")


def test_params_from_dict():
    params = params_from_dict(FrontendParams, {"max_tracks": 25, "ransac": {"threshold": 2.0}})
    assert params.max_tracks == 25
    assert params.ransac.threshold == 2.0
    assert params.ransac.max_iterations == 500
    with pytest.raises(ConfigError):
        params_from_dict(FrontendParams, {"bogus": 1})
    with pytest.raises(ConfigError):
        params_from_dict(FrontendParams, {"ransac": 3})


@pytest.mark.parametrize(
    "overrides",
    [
        {"cameras": []},
        {"cameras": [0, 0]},
        {"cameras": ["left"]},
        {"loop_mode": "bow"},
        {"colour": "red"},
        {"backend": {"window": 3}},
        {"mapping": {"voxel_size": -1.0}},
        {"scenario": {"shape": "spiral"}},
        {"scenario": {"camera_rate": 200.0}},
    ],
)
def test_run_config_errors(overrides):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(overrides)


def test_run_config_round_trip():
    config = RunConfig.from_dict({"scenario": SHORT, "cameras": [2, 0], "loop_mode": "pnp", "backend": {"horizon": 5.0}})
    assert config.label == "short_cam2+0_pnp"
    assert config.backend_params().horizon == 5.0
    again = RunConfig.from_dict(json.loads(json.dumps(config.to_dict())))
    assert again.to_dict() == config.to_dict()


def test_noise_free_pipeline(tmp_path):
    config = RunConfig(ScenarioConfig(**NOISE_FREE), cameras=[0, 2], loop_mode="scaleless", output=str(tmp_path))
    report = run_pipeline(config)
    assert report.succeeded, report.failure_message
    assert report.vio_ate_rmse < 1e-3
    assert report.rpgo_ate_rmse < 1e-3
    assert report.drift == 0.0
    assert set(report.reconstruction_rmse) == {"gt", "vio", "rpgo"}
    assert report.reconstruction_rmse["gt"] < 0.1
    for name in (
        "est_vio.tum",
        "est_rpgo.tum",
        "vio_diagnostics.csv",
        "lc_errors.csv",
        "lc_histograms.csv",
        "rpgo_weights.csv",
        "pose_graph.g2o",
        "mesh.obj",
        "freespace.csv",
        "metrics.json",
    ):
        assert (tmp_path / name).exists(), name
    assert len(read_tum(tmp_path / "est_vio.tum")) == report.keyframes
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["failure_stage"] is None
    assert metrics["cameras"] == [0, 2]
    assert "runtime" not in metrics


def test_runs_are_deterministic():
    config = RunConfig(ScenarioConfig(**SHORT), cameras=[0, 2])
    first = run_pipeline(config).to_dict()
    second = run_pipeline(config).to_dict()
    assert first == second


def test_failures_are_reported(tmp_path):
    missing = RunConfig(dataset=str(tmp_path / "missing"), output=str(tmp_path / "a"))
    report = run_pipeline(missing)
    assert not report.succeeded
    assert report.failure_stage == "simulation"
    assert report.failure_kind == "input"
    assert json.loads((tmp_path / "a" / "metrics.json").read_text())["failure_kind"] == "input"

    too_many = RunConfig(ScenarioConfig(**SHORT), cameras=[0, 7])
    report = run_pipeline(too_many)
    assert report.failure_kind == "config"


def test_ablation_table(tmp_path):
    suite = AblationSuite.from_dict({"scenarios": [SHORT], "camera_sets": [[0, 2]], "wheel": [False]})
    reports = run_ablation(suite, tmp_path)
    assert [r.loop_mode for r in reports] == ["none", "pnp", "scaleless", "rotonly"]
    rows = read_csv(tmp_path / "ablation_table.csv", ABLATION_HEADER)
    assert len(rows) == 4
    assert [r[3] for r in rows] == ["none", "pnp", "scaleless", "rotonly"]
    assert all(r[1] == "0+2" for r in rows)
    for report in reports:
        assert (tmp_path / f"short_cam0+2_{report.loop_mode}" / "metrics.json").exists()
    # one VIO run is shared by the loop modes of a group
    assert len({r.vio_ate_rmse for r in reports}) == 1


def test_ablation_suite_errors():
    with pytest.raises(ConfigError):
        AblationSuite.from_dict({"loop_modes": ["dbow"]})
    with pytest.raises(ConfigError):
        AblationSuite.from_dict({"camera_sets": []})
    with pytest.raises(ConfigError):
        AblationSuite.from_dict({"speed": 3})


def test_cli_evaluate(tmp_path, capsys):
    traj = ScenarioConfig(duration=5.0, laps=0.1)
    path = tmp_path / "gt.tum"
    write_tum(path, generate_trajectory(traj))
    assert run.run(["evaluate", "--est", str(path), "--ref", str(path)]) == run.EXIT_OK
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert result["ate_rmse_m"] < 1e-6
    assert result["drift_pct"] == 0.0


def test_cli_exit_codes(tmp_path):
    out = str(tmp_path / "out")
    assert run.run(["run", "--config", str(tmp_path / "nope.json"), "--out", out]) == run.EXIT_INPUT

    broken = tmp_path / "broken.json"
    broken.write_text("{ not json")
    assert run.run(["run", "--config", str(broken), "--out", out]) == run.EXIT_CONFIG

    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"loop_mode": "bow"}))
    assert run.run(["run", "--config", str(unknown), "--out", out]) == run.EXIT_CONFIG

    missing_dataset = tmp_path / "missing_dataset.json"
    missing_dataset.write_text(json.dumps({"dataset": str(tmp_path / "nowhere")}))
    assert run.run(["run", "--config", str(missing_dataset), "--out", out]) == run.EXIT_INPUT

    bad_tum = tmp_path / "bad.tum"
    bad_tum.write_text("1 2 3\n")
    assert run.run(["evaluate", "--est", str(bad_tum), "--ref", str(bad_tum)]) == run.EXIT_INPUT

    assert run.run(["--log-level", "LOUD", "evaluate", "--est", "a", "--ref", "b"]) == run.EXIT_CONFIG
    assert run.run(["ablate", "--suite", str(unknown), "--out", out, "--jobs", "0"]) == run.EXIT_CONFIG
    with pytest.raises(SystemExit):
        run.run([])


def test_cli_simulate_then_run(tmp_path):
    scenario = tmp_path / "scenario.json"
    ScenarioConfig(**SHORT).to_json_file(scenario)
    dataset = tmp_path / "dataset"
    assert run.run(["simulate", "--config", str(scenario), "--out", str(dataset)]) == run.EXIT_OK
    assert (dataset / "scenario.json").exists()
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"dataset": str(dataset), "cameras": [0, 2]}))
    assert run.run(["run", "--config", str(config), "--out", str(tmp_path / "out")]) == run.EXIT_OK
    assert (tmp_path / "out" / "est_vio.tum").exists()


@pytest.mark.slow
@pytest.mark.parametrize("loop_mode", ["pnp", "scaleless", "rotonly"])
def test_loop_closure_run(loop_mode):
    scenario = ScenarioConfig(duration=60.0, laps=1.25, false_positive_rate=0.1, name="loop")
    report = run_pipeline(RunConfig(scenario, loop_mode=loop_mode))
    assert report.succeeded, report.failure_message
    assert report.loop_statistics["candidates"] > 0
    assert report.rpgo_drift is not None
    assert not report.tracking_failed


@pytest.mark.slow
@pytest.mark.parametrize("cameras", [[0], [0, 1], [0, 1, 2], [0, 1, 2, 3]])
def test_camera_subsets(cameras):
    report = run_pipeline(RunConfig(ScenarioConfig(duration=30.0, laps=0.5), cameras=cameras, use_external_odometry=True))
    assert report.succeeded, report.failure_message
    assert report.vio_ate_rmse is not None


@pytest.mark.slow
def test_loop_mode_ordering():
    ate = {mode: [] for mode in ("none", "pnp", "scaleless", "rotonly")}
    drift = {"none": [], "scaleless": []}
    inliers = {"pnp": [], "scaleless": []}
    for seed in range(10):
        scenario = ScenarioConfig(duration=60.0, laps=1.25, seed=seed, name=f"loop{seed}")
        vio = prepare_vio(RunConfig(scenario, cameras=[0, 1, 2, 3]))
        for mode in ate:
            report = run_pipeline(RunConfig(scenario, cameras=[0, 1, 2, 3], loop_mode=mode), vio)
            assert report.succeeded, report.failure_message
            ate[mode].append(report.ate_rmse)
            if mode in drift:
                drift[mode].append(report.drift)
            if mode in inliers and report.loop_statistics["accepted"]:
                inliers[mode].append(report.loop_statistics["median_inliers"])
    median = {mode: np.median(values) for mode, values in ate.items()}
    assert median["scaleless"] <= median["rotonly"] <= median["none"]
    assert np.median(drift["scaleless"]) <= 0.75 * np.median(drift["none"])
    assert np.median(inliers["pnp"]) < np.median(inliers["scaleless"])


@pytest.mark.slow
def test_external_odometry_helps():
    better = 0
    for seed in range(10):
        scenario = ScenarioConfig(duration=30.0, laps=0.5, seed=seed, name=f"wheel{seed}")
        without = run_pipeline(RunConfig(scenario, cameras=[0]))
        with_wheel = run_pipeline(RunConfig(scenario, cameras=[0], use_external_odometry=True))
        assert without.succeeded and with_wheel.succeeded
        better += with_wheel.vio_ate_rmse < without.vio_ate_rmse
    assert better >= 8
