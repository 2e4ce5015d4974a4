import sys, os

sys.path.append(os.path.join(os.path.dirname(__file__), ".."))

import itertools
import math

import numpy as np
import pytest

from slamkit.camera import default_rig
from slamkit.data import ArgumentError, DatasetFormatError, DisconnectedGraphError, LoopMode, MeasurementKind
from slamkit.factors import RelativePoseMeasurement
from slamkit.geometry import Pose, between, rotation_about, unit_vector
from slamkit.loop_closure import build_information
from slamkit.rpgo import (
    GncParams,
    PoseGraph,
    gnc_weight_update,
    information_from_g2o,
    information_to_g2o,
    pgo_optimize,
    read_g2o,
    write_g2o,
)

ODOMETRY_INFORMATION = np.diag([0.01 ** -2] * 3 + [0.05 ** -2] * 3)
LOOP_INFORMATION = np.diag([0.02 ** -2] * 3 + [0.1 ** -2] * 3)
LAP = 40


def circle_pose(k: int, radius: float = 10.0) -> Pose:
    angle = 2 * math.pi * k / LAP
    return Pose(rotation_about((0, 0, 1), angle), (radius * math.sin(angle), radius * (1 - math.cos(angle)), 0.0))


def loop_graph(seed=0, inliers=(2, 3, 4, 5, 6), outliers=(), count=48, odometry_noise=(0.003, 0.015)) -> PoseGraph:
    """ Noisy odometry around a circle driven 1.2 times, loop edges between revisits. """
    rng = np.random.default_rng(seed)
    truth = [circle_pose(k) for k in range(count)]
    graph = PoseGraph()
    node = truth[0]
    graph.add_node(0, node, 0.0)
    for k in range(count - 1):
        noise = np.concatenate([rng.normal(0, odometry_noise[0], 3), rng.normal(0, odometry_noise[1], 3)])
        measured = between(truth[k], truth[k + 1]).retract(noise)
        node = node @ measured
        graph.add_node(k + 1, node, 0.5 * (k + 1))
        graph.add_edge(RelativePoseMeasurement(k, k + 1, measured, ODOMETRY_INFORMATION))
    for i in inliers:
        noise = np.concatenate([rng.normal(0, 0.005, 3), rng.normal(0, 0.02, 3)])
        measured = between(truth[i], truth[i + LAP]).retract(noise)
        graph.add_edge(RelativePoseMeasurement(i, i + LAP, measured, LOOP_INFORMATION, MeasurementKind.LOOP_FULL))
    for i, j in outliers:
        wrong = between(truth[i], truth[j]) @ Pose(rotation_about((0, 0, 1), math.radians(60)), (5.0, 0.0, 0.0))
        graph.add_edge(RelativePoseMeasurement(i, j, wrong, LOOP_INFORMATION, MeasurementKind.LOOP_FULL))
    return graph


def tls_cost(graph: PoseGraph, subset, params: GncParams) -> float:
    """ Truncated least-squares cost when exactly the loops in subset are trusted. """
    sub = PoseGraph()
    for k, p in graph.nodes.items():
        sub.add_node(k, p)
    sub.odometry = list(graph.odometry)
    sub.loops = [graph.loops[k] for k in subset]
    result = pgo_optimize(sub, robust=False, params=params)
    return result.cost + sum(params.threshold(m.kind) for k, m in enumerate(graph.loops) if k not in subset)


def test_gnc_weight_update():
    mu, c2 = 0.7, 12.0
    inner = mu / (mu + 1) * c2
    outer = (mu + 1) / mu * c2
    assert gnc_weight_update(0.0, mu, c2) == 1.0
    assert gnc_weight_update(10 * outer, mu, c2) == 0.0
    assert abs(gnc_weight_update(inner * (1 + 1e-12), mu, c2) - 1.0) < 1e-9
    assert abs(gnc_weight_update(outer * (1 - 1e-12), mu, c2)) < 1e-9
    middle = [gnc_weight_update(r, mu, c2) for r in np.linspace(inner, outer, 20)]
    assert all(a >= b for a, b in zip(middle, middle[1:]))


def test_gnc_thresholds():
    params = GncParams()
    assert params.threshold(MeasurementKind.LOOP_FULL) == pytest.approx(16.8119, abs=1e-3)
    assert params.threshold(MeasurementKind.LOOP_SCALELESS) == pytest.approx(15.0863, abs=1e-3)
    assert params.threshold(MeasurementKind.LOOP_ROTONLY) == pytest.approx(11.3449, abs=1e-3)
    with pytest.raises(ArgumentError):
        GncParams(mu_multiplier=1.0)
    with pytest.raises(ArgumentError):
        GncParams(confidence=1.0)


def test_noise_free_odometry_graph_is_unchanged():
    graph = loop_graph(inliers=(), odometry_noise=(0.0, 0.0))
    result = pgo_optimize(graph)
    for k, pose in graph.nodes.items():
        assert result.poses[k].almost_equal(pose, 1e-9)
    assert result.weights == []


def test_graph_errors():
    graph = PoseGraph()
    graph.add_node(0, Pose())
    graph.add_node(1, Pose())
    graph.add_node(2, Pose())
    graph.add_edge(RelativePoseMeasurement(0, 1, Pose(), np.eye(6)))
    with pytest.raises(DisconnectedGraphError):
        pgo_optimize(graph)
    with pytest.raises(ArgumentError):
        graph.add_edge(RelativePoseMeasurement(1, 5, Pose(), np.eye(6)))
    with pytest.raises(DisconnectedGraphError):
        PoseGraph().check_connected()


def test_correct_loops_are_kept():
    result = pgo_optimize(loop_graph())
    assert all(w > 0.99 for w in result.weights)


def test_robust_without_outliers_matches_plain():
    graph = loop_graph(seed=3)
    robust = pgo_optimize(graph, robust=True)
    plain = pgo_optimize(graph, robust=False)
    for k in graph.nodes:
        assert robust.poses[k].almost_equal(plain.poses[k], 1e-7)


def test_gross_outlier_rejected():
    graph = loop_graph(seed=1, outliers=[(10, 44)])
    result = pgo_optimize(graph)
    assert result.weights[-1] < 0.01
    assert all(w > 0.99 for w in result.weights[:-1])
    truth = [circle_pose(k) for k in range(len(graph.nodes))]
    errors = [np.linalg.norm(result.poses[k].translation - truth[k].translation) for k in graph.nodes]
    assert max(errors) < 0.5


@pytest.mark.parametrize("seed", [1, 2])
def test_gnc_matches_brute_force(seed):
    graph = loop_graph(seed=seed, outliers=[(10, 44)])
    params = GncParams()
    result = pgo_optimize(graph, params=params)
    selected = {k for k, w in enumerate(result.weights) if w >= 0.5}
    n = len(graph.loops)
    subsets = [set(s) for r in range(n + 1) for s in itertools.combinations(range(n), r)]
    best = min(subsets, key=lambda s: tls_cost(graph, s, params))
    assert selected == best


def test_gauge_invariance():
    graph = loop_graph(seed=2, outliers=[(12, 45)])
    g = Pose(rotation_about((0.2, 0.1, 1.0), 0.7), (3.0, -2.0, 1.0))
    result = pgo_optimize(graph)
    moved = pgo_optimize(graph.transformed(g))
    assert moved.weights == result.weights
    for k in graph.nodes:
        assert moved.poses[k].almost_equal(g @ result.poses[k], 1e-6)


def test_g2o_information_convention():
    information = np.diag([1.0, 2.0, 3.0, 10.0, 20.0, 30.0])
    g2o = information_to_g2o(information)
    assert np.allclose(g2o, np.diag([10.0, 20.0, 30.0, 4.0, 8.0, 12.0]))
    assert np.allclose(information_from_g2o(g2o), information)


def test_g2o_round_trip(tmp_path):
    graph = loop_graph(inliers=(2, 3))
    offset = default_rig()[0].extrinsic
    truth = [circle_pose(k) for k in range(48)]
    rotation_information = np.eye(3) / 0.02 ** 2
    for mode, (i, j) in ((LoopMode.SCALELESS, (4, 44)), (LoopMode.ROTONLY, (5, 45))):
        relative = between(truth[i] @ offset, truth[j] @ offset)
        direction = unit_vector(relative.translation + np.array([0.0, 0.0, 0.5]))
        information = build_information(mode, direction, relative.rotation, rotation_information)
        graph.add_edge(RelativePoseMeasurement(i, j, Pose(relative.rotation, direction), information, mode.kind, offset))
    path = tmp_path / "pose_graph.g2o"
    write_g2o(graph, path)
    again = read_g2o(path)
    assert set(again.nodes) == set(graph.nodes)
    for k, pose in graph.nodes.items():
        assert again.nodes[k].almost_equal(pose, 1e-6)
    assert len(again.odometry) == len(graph.odometry)
    assert [m.kind for m in again.loops] == [m.kind for m in graph.loops]
    for a, b in zip(again.odometry + again.loops, graph.odometry + graph.loops):
        assert (a.i, a.j) == (b.i, b.j)
        assert a.transform.almost_equal(b.transform, 1e-6)
        assert np.allclose(a.information, b.information, rtol=1e-6, atol=1e-6 * np.max(np.abs(b.information)))
        assert (a.sensor_offset is None) == (b.sensor_offset is None)
        if b.sensor_offset is not None:
            assert a.sensor_offset.almost_equal(b.sensor_offset, 1e-6)


def test_g2o_malformed(tmp_path):
    path = tmp_path / "broken.g2o"
    path.write_text("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\nEDGE_SE3:QUAT 0 1 1 0 0\n")
    with pytest.raises(DatasetFormatError):
        read_g2o(path)
    path.write_text("VERTEX_SE3:QUAT x 0 0\n")
    with pytest.raises(DatasetFormatError):
        read_g2o(path)


def graph_ate(result, count: int = 48) -> float:
    truth = [circle_pose(k) for k in range(count)]
    return float(np.sqrt(np.mean([np.sum((result.poses[k].translation - truth[k].translation) ** 2) for k in range(count)])))


@pytest.mark.slow
def test_gnc_matches_brute_force_sweep():
    params = GncParams()
    agreements = 0
    seeds = range(20)
    for seed in seeds:
        rng = np.random.default_rng(100 + seed)
        count = int(rng.integers(1, 4))
        outliers = [(int(i), int(i) + int(rng.integers(20, 30))) for i in rng.choice(np.arange(8, 18), count, replace=False)]
        graph = loop_graph(seed=seed, inliers=tuple(range(8 - count)), outliers=outliers)
        result = pgo_optimize(graph, params=params)
        selected = {k for k, w in enumerate(result.weights) if w >= 0.5}
        n = len(graph.loops)
        subsets = [set(s) for r in range(n + 1) for s in itertools.combinations(range(n), r)]
        best = min(subsets, key=lambda s: tls_cost(graph, s, params))
        agreements += selected == best
        clean = pgo_optimize(loop_graph(seed=seed, inliers=tuple(range(8 - count))), robust=False)
        assert graph_ate(result) <= 1.5 * graph_ate(clean) + 1e-9
    assert agreements >= 0.95 * len(seeds)
