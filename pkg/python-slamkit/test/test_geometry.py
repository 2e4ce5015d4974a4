import sys, os

sys.path.append(os.path.join(os.path.dirname(__file__), ".."))

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slamkit.data import ArgumentError, ChartBoundaryError, DegeneracyError
from slamkit.geometry import (
    Pose,
    Twist,
    angle_between,
    between,
    exp_map,
    interpolate,
    is_rotation,
    log_map,
    right_jacobian,
    right_jacobian_inverse,
    rigid_alignment,
    rotation_about,
    rotation_angle,
    scale_motion,
    so3_exp,
    so3_log,
    unit_vector,
)


def rotation_vectors(max_angle=3.0):
    return st.tuples(
        st.floats(min_value=-1, max_value=1), st.floats(min_value=-1, max_value=1), st.floats(min_value=-1, max_value=1)
    ).map(lambda v: np.array(v) * max_angle / math.sqrt(3))


translations = st.tuples(
    st.floats(min_value=-100, max_value=100), st.floats(min_value=-100, max_value=100), st.floats(min_value=-100, max_value=100)
).map(np.array)

poses = st.builds(lambda w, t: Pose(so3_exp(w), t), rotation_vectors(), translations)


@given(rotation_vectors())
@settings(max_examples=200)
def test_so3_exp_log(omega):
    rotation = so3_exp(omega)
    assert is_rotation(rotation)
    assert np.allclose(so3_log(rotation), omega, atol=1e-9)


@given(poses)
@settings(max_examples=200)
def test_exp_log_identity(pose):
    assert exp_map(log_map(pose)).almost_equal(pose, 1e-9)
    twist = log_map(pose)
    assert np.allclose(log_map(exp_map(twist)).as_vector(), twist.as_vector(), atol=1e-9)


@given(poses, poses, poses)
@settings(max_examples=100)
def test_compose_associative(a, b, c):
    assert ((a @ b) @ c).almost_equal(a @ (b @ c), 1e-8)


@given(poses)
@settings(max_examples=100)
def test_inverse(pose):
    assert (pose @ pose.inverse()).almost_equal(Pose.identity(), 1e-9)
    assert (pose.inverse() @ pose).almost_equal(Pose.identity(), 1e-9)


@given(poses, poses)
@settings(max_examples=100)
def test_between(a, b):
    assert between(a, b).almost_equal(a.inverse() @ b, 1e-9)
    assert (a @ between(a, b)).almost_equal(b, 1e-8)


@given(poses, rotation_vectors(1.0), translations)
@settings(max_examples=100)
def test_retract_local(pose, omega, t):
    delta = np.concatenate([omega, t])
    assert np.allclose(pose.local(pose.retract(delta)), delta, atol=1e-8)


def test_log_near_pi():
    rotation = rotation_about((0, 0, 1), math.pi - 1e-7)
    with pytest.raises(ChartBoundaryError):
        so3_log(rotation)
    # the angle itself is still defined on the whole group
    assert abs(rotation_angle(rotation) - (math.pi - 1e-7)) < 1e-6


def test_small_angle():
    omega = np.array([1e-10, -2e-10, 3e-10])
    assert np.allclose(so3_log(so3_exp(omega)), omega, atol=1e-14)
    assert np.allclose(right_jacobian(omega), np.eye(3), atol=1e-9)


@given(rotation_vectors(2.0), rotation_vectors(1e-5))
@settings(max_examples=100)
def test_right_jacobian_inverse(phi, d):
    assert np.allclose(right_jacobian(phi) @ right_jacobian_inverse(phi), np.eye(3), atol=1e-9)
    # Log(Exp(phi) Exp(d)) ~ phi + Jr^-1 d
    assert np.allclose(so3_log(so3_exp(phi) @ so3_exp(d)), phi + right_jacobian_inverse(phi) @ d, atol=1e-7)


def test_quaternion_sign():
    pose = Pose(rotation_about((1, 2, 3), 2.0), (1, 2, 3))
    q = pose.as_quaternion()
    assert q[3] >= 0
    assert Pose.from_quaternion(q, pose.translation).almost_equal(pose)
    assert Pose.from_quaternion(-q, pose.translation).almost_equal(pose)


def test_pose_immutable():
    pose = Pose()
    with pytest.raises(AttributeError):
        pose.translation = np.ones(3)
    with pytest.raises(ValueError):
        pose.translation[0] = 1.0


def test_interpolate():
    a = Pose(rotation_about((0, 0, 1), 0.2), (0, 0, 0))
    b = Pose(rotation_about((0, 0, 1), 0.6), (2, 0, 0))
    assert interpolate(a, b, 0.0) is a
    assert interpolate(a, b, 1.0) is b
    middle = interpolate(a, b, 0.5)
    assert middle.almost_equal(Pose(rotation_about((0, 0, 1), 0.4), (1, 0, 0)), 1e-12)
    with pytest.raises(ArgumentError):
        interpolate(a, b, 1.5)


def test_scale_motion():
    p = exp_map(Twist.from_vector([0.1, 0.0, 0.2, 1.0, 2.0, 3.0]))
    assert scale_motion(p, 1.0).almost_equal(p, 1e-12)
    assert np.allclose((scale_motion(p, 0.5) @ scale_motion(p, 0.5)).rotation, p.rotation, atol=1e-12)


def test_unit_vector():
    assert np.allclose(unit_vector((3, 0, 4)), (0.6, 0, 0.8))
    with pytest.raises(ArgumentError):
        unit_vector((0, 0, 0))
    assert angle_between((1, 0, 0), (0, 1, 0)) == pytest.approx(math.pi / 2)


@given(poses)
@settings(max_examples=50)
def test_rigid_alignment_recovers_transform(g):
    rng = np.random.default_rng(0)
    source = rng.uniform(-10, 10, size=(20, 3))
    target = g.transform_points(source)
    assert rigid_alignment(source, target).almost_equal(g, 1e-7)


def test_rigid_alignment_collinear():
    source = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    with pytest.raises(DegeneracyError):
        rigid_alignment(source, source + 1.0)
