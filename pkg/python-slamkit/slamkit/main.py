from __future__ import annotations

import asyncio
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

from .backend import BackendParams, KeyframeDiagnostics, VioBackend
from .data import ConfigError, DatasetFormatError, LoopMode, PipelineError, SlamError, Stage, UndefinedMetricError
from .dataset_io import load_dataset, write_csv, write_tum
from .frontend import CameraFrontend, FrontendOutput, FrontendParams
from .loop_closure import LoopClosureParams, LoopResult, LoopStatistics, compute_loop_pose, detect_candidates, loop_errors
from .mapping import MappingParams, build_map, ground_truth_surface
from .metrics import (
    TRACKING_FAILURE_DRIFT,
    LoopErrorRecord,
    evaluate_trajectory,
    loop_error_histograms,
    plot_histograms,
    write_histograms,
    write_loop_errors,
)
from .rpgo import GncParams, PgoResult, PoseGraph, pgo_optimize, write_g2o
from .scenario import ScenarioConfig, Trajectory
from .simulator import Dataset, simulate

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LOOP_MODE_NONE = "none"
ALL_LOOP_MODES = [LOOP_MODE_NONE] + [m.value for m in LoopMode]


def params_from_dict(cls, overrides: Optional[Dict[str, Any]]):
    """ Parameter dataclass with defaults replaced by overrides; nested parameter groups take nested dicts. """
    instance = cls()
    if not overrides:
        return instance
    if not isinstance(overrides, dict):
        raise ConfigError(f"{cls.__name__} overrides must be an object, got {overrides!r}")
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys: {sorted(unknown)}")
    values = {}
    for name, value in overrides.items():
        current = getattr(instance, name)
        if is_dataclass(current):
            values[name] = params_from_dict(type(current), value)
        elif isinstance(current, tuple):
            values[name] = tuple(value)
        else:
            values[name] = value
    try:
        return replace(instance, **values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {cls.__name__}: {e}")


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    cameras: List[int] = field(default_factory=lambda: [0, 1, 2, 3])
    use_external_odometry: bool = False
    loop_mode: str = LOOP_MODE_NONE
    gnc: bool = True
    output: Optional[str] = None
    # simulated dataset directory to run on instead of simulating the scenario
    dataset: Optional[str] = None
    plots: bool = False
    frontend: Dict[str, Any] = field(default_factory=dict)
    backend: Dict[str, Any] = field(default_factory=dict)
    loop_closure: Dict[str, Any] = field(default_factory=dict)
    gnc_params: Dict[str, Any] = field(default_factory=dict)
    mapping: Dict[str, Any] = field(default_factory=dict)

    @property
    def mode(self) -> Optional[LoopMode]:
        if self.loop_mode == LOOP_MODE_NONE:
            return None
        try:
            return LoopMode(self.loop_mode)
        except ValueError:
            raise ConfigError(f"Unknown loop mode {self.loop_mode!r}, expected one of {ALL_LOOP_MODES}")

    @property
    def label(self) -> str:
        cameras = "+".join(str(c) for c in self.cameras)
        wheel = "_wheel" if self.use_external_odometry else ""
        return f"{self.scenario.name}_cam{cameras}{wheel}_{self.loop_mode}"

    def frontend_params(self) -> FrontendParams:
        return params_from_dict(FrontendParams, self.frontend)

    def backend_params(self) -> BackendParams:
        return replace(params_from_dict(BackendParams, self.backend), use_external_odometry=self.use_external_odometry)

    def loop_closure_params(self) -> LoopClosureParams:
        return params_from_dict(LoopClosureParams, self.loop_closure)

    def gnc_parameters(self) -> GncParams:
        return params_from_dict(GncParams, self.gnc_params)

    def mapping_params(self) -> MappingParams:
        return params_from_dict(MappingParams, self.mapping)

    def validate(self) -> RunConfig:
        if not self.cameras:
            raise ConfigError("Camera subset must not be empty")
        if len(set(self.cameras)) != len(self.cameras) or min(self.cameras) < 0:
            raise ConfigError(f"Invalid camera subset {self.cameras}")
        self.mode
        self.scenario.validate()
        try:
            self.frontend_params()
            self.backend_params()
            self.loop_closure_params()
            self.gnc_parameters()
            self.mapping_params()
        except SlamError as e:
            raise ConfigError(str(e))
        return self

    def to_dict(self) -> Dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["scenario"] = self.scenario.to_dict()
        d["cameras"] = list(self.cameras)
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"Unknown run keys: {sorted(unknown)}")
        d = dict(d)
        scenario = d.get("scenario", {})
        if isinstance(scenario, str):
            d["scenario"] = ScenarioConfig.from_json_file(scenario)
        elif isinstance(scenario, dict):
            d["scenario"] = ScenarioConfig.from_dict(scenario)
        else:
            raise ConfigError(f"scenario must be an object or a file name, got {scenario!r}")
        if "cameras" in d:
            try:
                d["cameras"] = [int(c) for c in d["cameras"]]
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Malformed camera subset: {e}")
        return cls(**d).validate()

    @classmethod
    def from_json_file(cls, path: PathLike) -> RunConfig:
        with open(path) as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path} is not valid JSON: {e}")


@dataclass
class MetricsReport:
    scenario: str
    cameras: List[int]
    wheel: bool
    loop_mode: str
    keyframes: int = 0
    # reference trajectory length [m]
    length: float = 0.0
    vio_ate_rmse: Optional[float] = None
    vio_drift: Optional[float] = None
    rpgo_ate_rmse: Optional[float] = None
    rpgo_drift: Optional[float] = None
    loop_statistics: Dict[str, float] = field(default_factory=dict)
    loop_errors: List[LoopErrorRecord] = field(default_factory=list)
    rpgo_rejected_loops: int = 0
    # per trajectory column: gt, vio, rpgo
    reconstruction_rmse: Dict[str, float] = field(default_factory=dict)
    failure_stage: Optional[str] = None
    failure_message: str = ""
    # "config", "input" or "stage"
    failure_kind: Optional[str] = None
    runtime: float = 0.0

    def record_failure(self, error: PipelineError):
        self.failure_stage = error.stage.value
        self.failure_message = f"{type(error.cause).__name__}: {error.cause}"
        if error.is_config_error:
            self.failure_kind = "config"
        elif isinstance(error.cause, (DatasetFormatError, OSError)):
            self.failure_kind = "input"
        else:
            self.failure_kind = "stage"

    @property
    def ate_rmse(self) -> Optional[float]:
        return self.rpgo_ate_rmse if self.rpgo_ate_rmse is not None else self.vio_ate_rmse

    @property
    def drift(self) -> Optional[float]:
        return self.rpgo_drift if self.rpgo_drift is not None else self.vio_drift

    @property
    def tracking_failed(self) -> bool:
        return self.drift is not None and self.drift > TRACKING_FAILURE_DRIFT

    @property
    def succeeded(self) -> bool:
        return self.failure_stage is None

    def to_dict(self) -> Dict[str, Any]:
        """ Everything but the runtime and the per-candidate loop errors (those go to lc_errors.csv). """
        return {
            "scenario": self.scenario,
            "cameras": list(self.cameras),
            "wheel": self.wheel,
            "loop_mode": self.loop_mode,
            "keyframes": self.keyframes,
            "length_m": self.length,
            "ate_rmse_m": self.ate_rmse,
            "drift_pct": self.drift,
            "tracking_failed": self.tracking_failed,
            "vio": {"ate_rmse_m": self.vio_ate_rmse, "drift_pct": self.vio_drift},
            "rpgo": {"ate_rmse_m": self.rpgo_ate_rmse, "drift_pct": self.rpgo_drift, "rejected_loops": self.rpgo_rejected_loops},
            "loop_closure": dict(self.loop_statistics),
            "reconstruction_rmse_m": dict(self.reconstruction_rmse),
            "failure_stage": self.failure_stage,
            "failure_message": self.failure_message,
            "failure_kind": self.failure_kind,
        }

    def write_json(self, path: PathLike):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


@contextmanager
def stage(name: Stage) -> Iterator[None]:
    """ Attributes any estimator failure inside the block to a pipeline stage. """
    try:
        yield
    except PipelineError:
        raise
    except SlamError as e:
        raise PipelineError(name, e)


class VioRun(NamedTuple):
    dataset: Dataset
    backend: VioBackend

    @property
    def trajectory(self) -> Trajectory:
        return self.backend.trajectory

    @property
    def keyframes(self) -> List[Tuple[int, float]]:
        return sorted(self.backend.keyframe_times.items())


async def _run_vio(dataset: Dataset, config: RunConfig) -> VioBackend:
    """
    Camera frontends run side by side on every frame; keyframe epochs are queued to the backend,
    which consumes them in order.
    """
    frontend_params = config.frontend_params()
    frontend_params = replace(frontend_params, ransac=frontend_params.ransac.scaled_to_noise(dataset.config.pixel_sigma))
    backend_params = config.backend_params()
    frontends = [CameraFrontend(c, dataset.rig[c], dataset.tracks[c], frontend_params) for c in config.cameras]
    queue: asyncio.Queue = asyncio.Queue()

    async def produce():
        keyframe_id = 0
        try:
            with stage(Stage.FRONTEND):
                for f, t in enumerate(dataset.frame_times.tolist()):
                    votes = await asyncio.gather(*(fe.process_frame(f, t) for fe in frontends))
                    if not any(votes):
                        continue
                    active = [fe for fe in frontends if fe.is_active]
                    outputs: List[FrontendOutput] = await asyncio.gather(
                        *(fe.make_keyframe(keyframe_id, t) for fe in active)
                    )
                    await queue.put(list(outputs))
                    keyframe_id += 1
        finally:
            await queue.put(None)

    async def consume() -> Optional[VioBackend]:
        backend: Optional[VioBackend] = None
        while True:
            outputs = await queue.get()
            if outputs is None:
                return backend
            with stage(Stage.BACKEND):
                if backend is None:
                    initial_pose = dataset.groundtruth_at(outputs[0].timestamp)
                    wheel = dataset.wheel if backend_params.use_external_odometry else None
                    backend = VioBackend(
                        dataset.rig, dataset.inertial, initial_pose, backend_params, wheel, dataset.config.pixel_sigma
                    )
                backend.add_keyframe(outputs)

    _, backend = await asyncio.gather(produce(), consume())
    if backend is None:
        raise PipelineError(Stage.FRONTEND, SlamError("No camera produced a keyframe"))
    return backend


def prepare_vio(config: RunConfig) -> VioRun:
    """ Simulates (or loads) the dataset and runs the visual-inertial front and back end. """
    with stage(Stage.SIMULATION):
        if config.dataset:
            try:
                dataset = load_dataset(config.dataset)
            except OSError as e:
                raise PipelineError(Stage.SIMULATION, e)
        else:
            dataset = simulate(config.scenario)
        if max(config.cameras) >= len(dataset.rig):
            raise ConfigError(f"Camera subset {config.cameras} exceeds the {len(dataset.rig)}-camera rig")
    started = time.perf_counter()
    backend = asyncio.run(_run_vio(dataset, config))
    logger.info(
        f"VIO {config.label}: {len(backend.estimates)} keyframes in {time.perf_counter() - started:.1f} s, "
        f"{backend.deferred_triangulations} deferred triangulations"
    )
    return VioRun(dataset, backend)


def close_loops(vio: VioRun, config: RunConfig) -> Tuple[List[LoopResult], List[LoopErrorRecord], LoopStatistics]:
    mode = config.mode
    assert mode is not None, "Loop closure needs a loop mode"
    params = config.loop_closure_params()
    params = replace(params, ransac=params.ransac.scaled_to_noise(vio.dataset.config.pixel_sigma))
    dataset = vio.dataset
    camera_id = config.cameras[0]
    cam = dataset.rig[camera_id]
    candidates = detect_candidates(dataset, vio.keyframes, params, camera_id, vio.backend.landmark_snapshots)
    results: List[LoopResult] = []
    records: List[LoopErrorRecord] = []
    statistics = LoopStatistics()
    for candidate in candidates:
        result = compute_loop_pose(candidate, mode, cam, params)
        results.append(result)
        statistics.add(result)
        record = LoopErrorRecord(
            candidate.query,
            candidate.match,
            mode,
            candidate.is_injected_false_positive,
            result.accepted,
            result.num_inliers,
        )
        if result.accepted:
            rotation_error, translation_error = loop_errors(
                result.measurement,
                dataset.groundtruth_at(candidate.match_time),
                dataset.groundtruth_at(candidate.query_time),
            )
            record.kind = result.measurement.kind
            record.rotation_error_deg = rotation_error
            record.translation_error = translation_error
        records.append(record)
    if statistics.rejected:
        logger.warning(f"{statistics.rejected} of {statistics.candidates} loop candidates rejected")
    logger.info(f"Loop closure ({mode.value}): {statistics.to_dict()}")
    return results, records, statistics


def _write_diagnostics(path: Path, diagnostics: Sequence[KeyframeDiagnostics]):
    write_csv(
        path,
        ["timestamp", "num_factors_per_camera", "cost", "iterations"],
        ([d.timestamp, d.factors_field, float(d.cost), d.iterations] for d in diagnostics),
    )


def _write_weights(path: Path, graph: PoseGraph, result: PgoResult):
    rows = [[m.i, m.j, m.kind.value, 1.0] for m in graph.odometry]
    rows += [[m.i, m.j, m.kind.value, float(w)] for m, w in zip(graph.loops, result.weights)]
    write_csv(path, ["i", "j", "kind", "weight"], rows)


def _run_stages(config: RunConfig, report: MetricsReport, output: Optional[Path], vio: Optional[VioRun]):
    vio = vio or prepare_vio(config)
    dataset = vio.dataset
    vio_trajectory = vio.trajectory
    report.scenario = dataset.config.name
    report.keyframes = len(vio_trajectory)
    if output:
        write_tum(output / "est_vio.tum", vio_trajectory)
        _write_diagnostics(output / "vio_diagnostics.csv", vio.backend.diagnostics)

    with stage(Stage.EVALUATION):
        report.vio_ate_rmse, report.vio_drift, report.length = evaluate_trajectory(vio_trajectory, dataset.groundtruth)
    logger.info(f"VIO {config.label}: ATE {report.vio_ate_rmse:.3f} m, drift {report.vio_drift} %")

    trajectories: Dict[str, Trajectory] = {"gt": dataset.groundtruth, "vio": vio_trajectory}
    if config.mode is not None:
        with stage(Stage.LOOP_CLOSURE):
            results, records, statistics = close_loops(vio, config)
        report.loop_statistics = statistics.to_dict()
        report.loop_errors = records
        if output:
            write_loop_errors(output / "lc_errors.csv", records)
            histograms = loop_error_histograms(records)
            write_histograms(output / "lc_histograms.csv", histograms)
            if config.plots:
                plot_histograms(output / "lc_histograms.png", histograms)

        with stage(Stage.RPGO):
            keys = [k for k, _ in vio.keyframes]
            graph = PoseGraph.from_trajectory(keys, vio_trajectory, vio.backend.odometry_information)
            for result in results:
                if result.accepted:
                    graph.add_edge(result.measurement)
            pgo = pgo_optimize(graph, robust=config.gnc, params=config.gnc_parameters())
            rpgo_trajectory = pgo.trajectory(graph)
        report.rpgo_rejected_loops = sum(w == 0.0 for w in pgo.weights)
        trajectories["rpgo"] = rpgo_trajectory
        if output:
            write_tum(output / "est_rpgo.tum", rpgo_trajectory)
            _write_weights(output / "rpgo_weights.csv", graph, pgo)
            write_g2o(graph, output / "pose_graph.g2o")
        with stage(Stage.EVALUATION):
            report.rpgo_ate_rmse, report.rpgo_drift, _ = evaluate_trajectory(rpgo_trajectory, dataset.groundtruth)
        logger.info(f"RPGO {config.label}: ATE {report.rpgo_ate_rmse:.3f} m, drift {report.rpgo_drift} %")

    with stage(Stage.MAPPING):
        params = config.mapping_params()
        surface = ground_truth_surface(dataset.config)
        final = "rpgo" if "rpgo" in trajectories else "vio"
        for column, trajectory in trajectories.items():
            result = build_map(dataset, trajectory, config.cameras, params)
            try:
                report.reconstruction_rmse[column] = result.error_against(surface)
            except UndefinedMetricError as e:
                logger.warning(f"No reconstruction error for the {column} map: {e}")
            if output and column == final:
                result.mesh.write_obj(output / "mesh.obj")
                write_csv(output / "freespace.csv", ["x", "y", "z"], (list(map(float, c)) for c in result.free_space))


def run_pipeline(config: RunConfig, vio: Optional[VioRun] = None) -> MetricsReport:
    """
    Runs simulation, frontends, backend, loop closure, pose-graph optimization and mapping for one
    configuration and writes the artifacts into config.output when set.

    A failing stage is recorded in the report; artifacts written before it are kept.
    """
    config.validate()
    started = time.perf_counter()
    output = Path(config.output) if config.output else None
    if output:
        output.mkdir(parents=True, exist_ok=True)
    report = MetricsReport(config.scenario.name, list(config.cameras), config.use_external_odometry, config.loop_mode)
    try:
        _run_stages(config, report, output, vio)
    except PipelineError as e:
        logger.error(f"{config.label}: {e}")
        report.record_failure(e)
    report.runtime = time.perf_counter() - started
    if output:
        report.write_json(output / "metrics.json")
    logger.info(f"Finished {config.label} in {report.runtime:.1f} s")
    return report


@dataclass
class AblationSuite:
    scenarios: List[ScenarioConfig] = field(default_factory=lambda: [ScenarioConfig()])
    camera_sets: List[List[int]] = field(default_factory=lambda: [[0, 1, 2, 3]])
    wheel: List[bool] = field(default_factory=lambda: [False])
    loop_modes: List[str] = field(default_factory=lambda: list(ALL_LOOP_MODES))
    gnc: bool = True

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> AblationSuite:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"Unknown ablation keys: {sorted(unknown)}")
        d = dict(d)
        if "scenarios" in d:
            d["scenarios"] = [ScenarioConfig.from_dict(s) for s in d["scenarios"]]
        suite = cls(**d)
        for mode in suite.loop_modes:
            if mode not in ALL_LOOP_MODES:
                raise ConfigError(f"Unknown loop mode {mode!r}, expected one of {ALL_LOOP_MODES}")
        if not suite.scenarios or not suite.camera_sets or not suite.wheel or not suite.loop_modes:
            raise ConfigError("Every ablation axis needs at least one entry")
        return suite

    @classmethod
    def from_json_file(cls, path: PathLike) -> AblationSuite:
        with open(path) as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path} is not valid JSON: {e}")

    def groups(self, output: Optional[PathLike] = None) -> List[List[RunConfig]]:
        """ Run configurations grouped by (scenario, cameras, wheel); a group shares one VIO run. """
        groups = []
        for scenario in self.scenarios:
            for cameras in self.camera_sets:
                for wheel in self.wheel:
                    group = []
                    for mode in self.loop_modes:
                        config = RunConfig(scenario, list(cameras), wheel, mode, self.gnc)
                        if output:
                            config.output = str(Path(output) / config.label)
                        group.append(config.validate())
                    groups.append(group)
        return groups


def _run_group(group: List[RunConfig]) -> List[MetricsReport]:
    try:
        vio = prepare_vio(group[0])
    except PipelineError as e:
        logger.error(f"{group[0].label}: {e}")
        reports = []
        for config in group:
            report = MetricsReport(config.scenario.name, list(config.cameras), config.use_external_odometry, config.loop_mode)
            report.record_failure(e)
            if config.output:
                Path(config.output).mkdir(parents=True, exist_ok=True)
                report.write_json(Path(config.output) / "metrics.json")
            reports.append(report)
        return reports
    return [run_pipeline(config, vio) for config in group]


ABLATION_HEADER = ["scenario", "cameras", "wheel", "loop_mode", "ate_rmse_m", "drift_pct"]


def ablation_rows(reports: Sequence[MetricsReport]) -> List[List[Any]]:
    rows = []
    for r in reports:
        failed = not r.succeeded or r.tracking_failed or r.ate_rmse is None
        rows.append(
            [
                r.scenario,
                "+".join(str(c) for c in r.cameras),
                int(r.wheel),
                r.loop_mode,
                "-" if failed else float(r.ate_rmse),
                "-" if failed else f"{r.drift:.1f}",
            ]
        )
    return rows


def run_ablation(suite: AblationSuite, output: Optional[PathLike] = None, jobs: int = 1) -> List[MetricsReport]:
    """ Every combination of the suite's axes; rows come out in suite order whatever the job count. """
    groups = suite.groups(output)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_group, groups))
    else:
        results = [_run_group(group) for group in groups]
    reports = [report for group in results for report in group]
    if output:
        Path(output).mkdir(parents=True, exist_ok=True)
        write_csv(Path(output) / "ablation_table.csv", ABLATION_HEADER, ablation_rows(reports))
    failed = sum(not r.succeeded for r in reports)
    logger.info(f"Ablation: {len(reports)} runs, {failed} failed")
    return reports
