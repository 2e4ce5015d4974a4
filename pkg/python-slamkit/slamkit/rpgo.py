from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import chi2

from .data import ArgumentError, DatasetFormatError, DisconnectedGraphError, MeasurementKind, kind_dof
from .dataset_io import fmt
from .factors import PriorFactor, RelativePoseFactor, RelativePoseMeasurement
from .geometry import Pose
from .optimizer import LevenbergMarquardtParams, Values, levenberg_marquardt
from .scenario import Trajectory

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GAUGE_SIGMAS = (1e-4, 1e-4)


@dataclass
class GncParams:
    # chi2 quantile of the per-edge inlier threshold c_bar^2
    confidence: float = 0.99
    mu_multiplier: float = 1.4
    max_iterations: int = 100
    # weights within this distance of 0 or 1 count as converged
    epsilon: float = 1e-3
    lm: LevenbergMarquardtParams = field(default_factory=LevenbergMarquardtParams)

    def __post_init__(self):
        if not self.mu_multiplier > 1.0:
            raise ArgumentError(f"GNC mu multiplier must exceed 1, got {self.mu_multiplier}")
        if not 0.0 < self.confidence < 1.0:
            raise ArgumentError(f"GNC confidence must be in (0, 1), got {self.confidence}")

    def threshold(self, kind: MeasurementKind) -> float:
        """ c_bar^2 for an edge of this kind. """
        return float(chi2.ppf(self.confidence, kind_dof[kind]))


class PoseGraph:
    """ Keyframe poses with odometry edges between consecutive nodes and loop edges of any kind. """

    def __init__(self):
        self.nodes: Dict[int, Pose] = {}
        self.timestamps: Dict[int, float] = {}
        self.odometry: List[RelativePoseMeasurement] = []
        self.loops: List[RelativePoseMeasurement] = []

    def __repr__(self) -> str:
        return f"PoseGraph({len(self.nodes)} nodes, {len(self.odometry)} odometry, {len(self.loops)} loops)"

    def add_node(self, key: int, pose: Pose, timestamp: Optional[float] = None):
        self.nodes[key] = pose
        if timestamp is not None:
            self.timestamps[key] = timestamp

    def add_edge(self, measurement: RelativePoseMeasurement):
        if measurement.i not in self.nodes or measurement.j not in self.nodes:
            raise ArgumentError(f"Edge {measurement.i} -> {measurement.j} references a missing node")
        if measurement.kind is MeasurementKind.ODOMETRY:
            self.odometry.append(measurement)
        else:
            self.loops.append(measurement)

    @property
    def first(self) -> int:
        return next(iter(self.nodes))

    def check_connected(self):
        """ The odometry edges alone must connect every node. """
        if not self.nodes:
            raise DisconnectedGraphError("Pose graph has no nodes")
        parent = {k: k for k in self.nodes}

        def find(k):
            while parent[k] != k:
                parent[k] = parent[parent[k]]
                k = parent[k]
            return k

        for m in self.odometry:
            parent[find(m.i)] = find(m.j)
        roots = {find(k) for k in self.nodes}
        if len(roots) > 1:
            raise DisconnectedGraphError(f"Odometry chain splits the graph into {len(roots)} components")

    def transformed(self, g: Pose) -> PoseGraph:
        result = PoseGraph()
        for k, p in self.nodes.items():
            result.add_node(k, g @ p, self.timestamps.get(k))
        result.odometry = list(self.odometry)
        result.loops = list(self.loops)
        return result

    @classmethod
    def from_trajectory(
        cls, keys: Sequence[int], trajectory: Trajectory, information: Dict[Tuple[int, int], np.ndarray]
    ) -> PoseGraph:
        """ Nodes at the trajectory poses, odometry edges between consecutive ones. """
        graph = cls()
        for key, (t, pose) in zip(keys, trajectory):
            graph.add_node(key, pose, t)
        for (a, pose_a), (b, pose_b) in zip(zip(keys, trajectory.poses), zip(keys[1:], trajectory.poses[1:])):
            graph.add_edge(RelativePoseMeasurement(a, b, pose_a.inverse() @ pose_b, information[(a, b)]))
        return graph


class PgoResult(NamedTuple):
    poses: Dict[int, Pose]
    # one weight per loop edge, in PoseGraph.loops order
    weights: List[float]
    iterations: int
    cost: float

    def trajectory(self, graph: PoseGraph) -> Trajectory:
        keys = [k for k in graph.nodes if k in graph.timestamps]
        return Trajectory([graph.timestamps[k] for k in keys], [self.poses[k] for k in keys])


def gnc_weight_update(r2: float, mu: float, c2: float) -> float:
    """ Closed-form truncated-least-squares weight of one edge at GNC control parameter mu. """
    assert mu > 0, f"mu must be positive, got {mu}"
    if r2 <= mu / (mu + 1.0) * c2:
        return 1.0
    if r2 >= (mu + 1.0) / mu * c2:
        return 0.0
    w = math.sqrt(c2 * mu * (mu + 1.0) / r2) - mu
    return min(max(w, 0.0), 1.0)


def _factors(graph: PoseGraph, weights: Sequence[float]) -> list:
    gauge = np.diag([GAUGE_SIGMAS[0] ** -2] * 3 + [GAUGE_SIGMAS[1] ** -2] * 3)
    factors = [PriorFactor(graph.first, graph.nodes[graph.first], gauge)]
    factors.extend(RelativePoseFactor(m) for m in graph.odometry)
    factors.extend(RelativePoseFactor(m, w) for m, w in zip(graph.loops, weights) if w > 0.0)
    return factors


def _solve(graph: PoseGraph, values: Values, weights: Sequence[float], params: GncParams) -> Tuple[Values, float]:
    result = levenberg_marquardt(_factors(graph, weights), values, params.lm)
    return result.values, result.cost


def loop_residuals(graph: PoseGraph, values: Values) -> np.ndarray:
    """ Weighted squared residual r^T Omega r of every loop edge. """
    return np.array([RelativePoseFactor(m).squared_error(values) for m in graph.loops])


def pgo_optimize(graph: PoseGraph, robust: bool = True, params: Optional[GncParams] = None) -> PgoResult:
    """
    Pose-graph optimization over odometry and loop edges.

    With robust set, graduated non-convexity on a truncated-least-squares cost decides which loop
    edges to keep; odometry edges always keep weight 1.
    """
    params = params or GncParams()
    graph.check_connected()
    values = Values(dict(graph.nodes))
    weights = [1.0] * len(graph.loops)
    values, cost = _solve(graph, values, weights, params)
    if not robust or not graph.loops:
        logger.info(f"PGO: {len(graph.nodes)} nodes, {len(graph.loops)} loops, cost {cost:.6g}")
        return PgoResult(values.poses, weights, 1, cost)

    c2 = np.array([params.threshold(m.kind) for m in graph.loops])
    r2 = loop_residuals(graph, values)
    denominator = 2.0 * float(np.max(r2 / c2)) - 1.0
    if denominator <= 0.0:
        logger.info(f"GNC: every loop residual inside the inlier band, {len(graph.loops)} loops kept")
        return PgoResult(values.poses, weights, 1, cost)
    mu = 1.0 / denominator

    iteration = 0
    while iteration < params.max_iterations:
        iteration += 1
        weights = [gnc_weight_update(float(r), mu, float(c)) for r, c in zip(r2, c2)]
        values, cost = _solve(graph, values, weights, params)
        r2 = loop_residuals(graph, values)
        if all(w <= params.epsilon or w >= 1.0 - params.epsilon for w in weights):
            break
        mu *= params.mu_multiplier
    weights = [1.0 if w >= 0.5 else 0.0 for w in weights]
    values, cost = _solve(graph, values, weights, params)
    rejected = sum(w == 0.0 for w in weights)
    logger.info(f"GNC: {iteration} outer iterations, {len(weights) - rejected} loops kept, {rejected} rejected")
    return PgoResult(values.poses, weights, iteration, cost)


def _g2o_permutation() -> np.ndarray:
    """ Maps our (rotation, translation) order to g2o's (translation, quaternion vector) order with scaling. """
    transform = np.zeros((6, 6))
    # g2o error = [t; q_vec] with q_vec ~ theta / 2
    transform[0:3, 3:6] = np.eye(3)
    transform[3:6, 0:3] = 0.5 * np.eye(3)
    return transform


def information_to_g2o(information: np.ndarray) -> np.ndarray:
    t = np.linalg.inv(_g2o_permutation())
    return t.T @ information @ t


def information_from_g2o(information: np.ndarray) -> np.ndarray:
    t = _g2o_permutation()
    return t.T @ information @ t


def _upper_triangle(m: np.ndarray) -> List[float]:
    return [float(m[r, c]) for r in range(6) for c in range(r, 6)]


def _from_upper_triangle(values: Sequence[float]) -> np.ndarray:
    m = np.zeros((6, 6))
    it = iter(values)
    for r in range(6):
        for c in range(r, 6):
            m[r, c] = m[c, r] = next(it)
    return m


def _pose_fields(pose: Pose) -> List[float]:
    return [*map(float, pose.translation), *map(float, pose.as_quaternion())]


def write_g2o(graph: PoseGraph, path: PathLike):
    offsets: List[Pose] = []
    lines: List[str] = []
    for key, pose in graph.nodes.items():
        lines.append(" ".join(["VERTEX_SE3:QUAT", str(key)] + [fmt(v) for v in _pose_fields(pose)]))
    for m in graph.odometry + graph.loops:
        info = [fmt(v) for v in _upper_triangle(information_to_g2o(m.information))]
        measurement = [fmt(v) for v in _pose_fields(m.transform)]
        if m.sensor_offset is None:
            lines.append(" ".join(["EDGE_SE3:QUAT", str(m.i), str(m.j)] + measurement + info))
            continue
        index = next((n for n, o in enumerate(offsets) if o.almost_equal(m.sensor_offset, 1e-12)), None)
        if index is None:
            index = len(offsets)
            offsets.append(m.sensor_offset)
        lines.append(" ".join(["EDGE_SE3_OFFSET", str(m.i), str(m.j), str(index), str(index)] + measurement + info))
    params = [" ".join(["PARAMS_SE3OFFSET", str(n)] + [fmt(v) for v in _pose_fields(o)]) for n, o in enumerate(offsets)]
    with open(path, "w") as f:
        f.write("\n".join(params + lines) + "\n")


def _infer_kind(i: int, j: int, information: np.ndarray, has_offset: bool) -> MeasurementKind:
    if abs(i - j) == 1 and not has_offset:
        return MeasurementKind.ODOMETRY
    block = information[3:, 3:]
    scale = max(float(np.max(np.abs(block))), 1e-300)
    rank = int(np.sum(np.linalg.eigvalsh(block) > 1e-6 * scale)) if np.any(block) else 0
    return {3: MeasurementKind.LOOP_FULL, 2: MeasurementKind.LOOP_SCALELESS}.get(rank, MeasurementKind.LOOP_ROTONLY)


def read_g2o(path: PathLike) -> PoseGraph:
    graph = PoseGraph()
    offsets: Dict[int, Pose] = {}
    edges = []
    with open(path) as f:
        for line_number, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "VERTEX_SE3:QUAT":
                    v = [float(x) for x in parts[2:9]]
                    graph.add_node(int(parts[1]), Pose.from_quaternion(v[3:7], v[0:3]))
                elif tag == "PARAMS_SE3OFFSET":
                    v = [float(x) for x in parts[2:9]]
                    offsets[int(parts[1])] = Pose.from_quaternion(v[3:7], v[0:3])
                elif tag == "EDGE_SE3:QUAT":
                    edges.append((int(parts[1]), int(parts[2]), None, [float(x) for x in parts[3:31]]))
                elif tag == "EDGE_SE3_OFFSET":
                    edges.append((int(parts[1]), int(parts[2]), int(parts[3]), [float(x) for x in parts[5:33]]))
                else:
                    logger.warning(f"{path}:{line_number}: skipping unsupported g2o tag {tag}")
            except (ValueError, IndexError) as e:
                raise DatasetFormatError(f"{path}:{line_number}: malformed {tag} line ({e})")
    for i, j, offset_id, v in edges:
        if len(v) != 28:
            raise DatasetFormatError(f"{path}: edge {i} -> {j} has {len(v)} values, expected 28")
        information = information_from_g2o(_from_upper_triangle(v[7:]))
        offset = offsets.get(offset_id) if offset_id is not None else None
        if offset_id is not None and offset is None:
            raise DatasetFormatError(f"{path}: edge {i} -> {j} references unknown offset {offset_id}")
        kind = _infer_kind(i, j, information, offset is not None)
        graph.add_edge(RelativePoseMeasurement(i, j, Pose.from_quaternion(v[3:7], v[0:3]), information, kind, offset))
    return graph
