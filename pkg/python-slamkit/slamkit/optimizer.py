from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Hashable, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .data import ChartBoundaryError, NumericalFailure
from .geometry import Pose

""" Sparse Levenberg-Marquardt shared by the fixed-lag smoother and the pose-graph solver.

Variables are poses (6 dof, perturbed with Pose.retract) and points (3 dof, additive).
Factors report their cost as sum of w * rho(r^T Omega r) and linearize into Hessian blocks
H = J^T Omega J and gradients g = J^T Omega r over global variable indices.
"""

logger = logging.getLogger(__name__)

POSE_DIM = 6
POINT_DIM = 3


class Values:
    def __init__(self, poses: Optional[Dict[Hashable, Pose]] = None, points: Optional[Dict[Hashable, np.ndarray]] = None):
        self.poses: Dict[Hashable, Pose] = dict(poses or {})
        self.points: Dict[Hashable, np.ndarray] = dict(points or {})

    def copy(self) -> Values:
        return Values(self.poses, self.points)

    def retract(self, delta: np.ndarray, ordering: Ordering) -> Values:
        result = self.copy()
        for key, offset in ordering.pose_offsets.items():
            result.poses[key] = self.poses[key].retract(delta[offset : offset + POSE_DIM])
        for key, offset in ordering.point_offsets.items():
            result.points[key] = self.points[key] + delta[offset : offset + POINT_DIM]
        return result


class Ordering:
    """ Column layout of the normal system: poses first in the given order, then points. """

    def __init__(self, pose_keys: Iterable[Hashable], point_keys: Iterable[Hashable] = ()):
        self.pose_offsets: Dict[Hashable, int] = OrderedDict()
        self.point_offsets: Dict[Hashable, int] = OrderedDict()
        offset = 0
        for key in pose_keys:
            if key not in self.pose_offsets:
                self.pose_offsets[key] = offset
                offset += POSE_DIM
        for key in point_keys:
            if key not in self.point_offsets:
                self.point_offsets[key] = offset
                offset += POINT_DIM
        self.dim = offset

    def pose_indices(self, key: Hashable) -> np.ndarray:
        offset = self.pose_offsets[key]
        return np.arange(offset, offset + POSE_DIM)

    def point_indices(self, key: Hashable) -> np.ndarray:
        offset = self.point_offsets[key]
        return np.arange(offset, offset + POINT_DIM)

    @classmethod
    def for_factors(cls, factors: Sequence, values: Values) -> Ordering:
        pose_keys: List[Hashable] = []
        point_keys: List[Hashable] = []
        for factor in factors:
            pose_keys.extend(factor.pose_keys)
            point_keys.extend(factor.point_keys)
        return cls(sorted(set(pose_keys), key=_sort_key), sorted(set(point_keys), key=_sort_key))


def _sort_key(key: Hashable):
    return key if isinstance(key, tuple) else (key,)


class Linearization(NamedTuple):
    # (N, D) global column indices, (N, D, D) Hessian blocks, (N, D) gradients
    indices: np.ndarray
    hessians: np.ndarray
    gradients: np.ndarray
    cost: float


@dataclass
class LevenbergMarquardtParams:
    initial_lambda: float = 1e-4
    lambda_factor: float = 10.0
    max_lambda: float = 1e10
    max_iterations: int = 50
    # converged when the largest tangent update is below this
    step_tolerance: float = 1e-8
    relative_cost_tolerance: float = 1e-12


class OptimizationResult(NamedTuple):
    values: Values
    cost_history: List[float]
    iterations: int
    converged: bool

    @property
    def cost(self) -> float:
        return self.cost_history[-1]


def _grouped(factors: Sequence) -> Dict[type, List]:
    groups: Dict[type, List] = OrderedDict()
    for factor in factors:
        groups.setdefault(type(factor), []).append(factor)
    return groups


def total_cost(factors: Sequence, values: Values) -> float:
    return float(sum(cls.cost_many(group, values) for cls, group in _grouped(factors).items()))


def linearize(factors: Sequence, values: Values, ordering: Ordering):
    """ Sparse Hessian (CSC), gradient and cost of the whole factor set. """
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    data: List[np.ndarray] = []
    gradient = np.zeros(ordering.dim)
    cost = 0.0
    for cls, group in _grouped(factors).items():
        for lin in cls.linearize_many(group, values, ordering):
            if len(lin.indices) == 0:
                continue
            d = lin.indices.shape[1]
            rows.append(np.repeat(lin.indices, d, axis=1).ravel())
            cols.append(np.tile(lin.indices, (1, d)).ravel())
            data.append(lin.hessians.ravel())
            np.add.at(gradient, lin.indices.ravel(), lin.gradients.ravel())
            cost += lin.cost
    if rows:
        hessian = sparse.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(ordering.dim, ordering.dim)
        ).tocsc()
    else:
        hessian = sparse.csc_matrix((ordering.dim, ordering.dim))
    return hessian, gradient, cost


def solve_normal_equations(hessian: sparse.csc_matrix, gradient: np.ndarray, damping: float) -> Optional[np.ndarray]:
    """
    Solves (H + damping * diag(H)) x = -g by a symmetric sparse LU.

    :return: the step, or None when the damped system is not positive definite
    """
    diagonal = hessian.diagonal()
    floor = 1e-9 * max(float(np.max(diagonal)) if len(diagonal) else 1.0, 1.0)
    damped = (hessian + sparse.diags(damping * np.maximum(diagonal, floor))).tocsc()
    try:
        lu = splu(damped, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
    except RuntimeError:
        return None
    if np.any(lu.U.diagonal() <= 0.0):
        return None
    step = lu.solve(-gradient)
    if not np.all(np.isfinite(step)):
        return None
    return step


def levenberg_marquardt(
    factors: Sequence, values: Values, params: Optional[LevenbergMarquardtParams] = None, ordering: Optional[Ordering] = None
) -> OptimizationResult:
    params = params or LevenbergMarquardtParams()
    ordering = ordering or Ordering.for_factors(factors, values)
    if ordering.dim == 0:
        cost = total_cost(factors, values)
        return OptimizationResult(values, [cost], 0, True)

    damping = params.initial_lambda
    hessian, gradient, cost = linearize(factors, values, ordering)
    history = [cost]
    converged = False
    iteration = 0
    while iteration < params.max_iterations:
        iteration += 1
        accepted = False
        while not accepted:
            step = solve_normal_equations(hessian, gradient, damping)
            if step is None:
                damping *= params.lambda_factor
                if damping > params.max_lambda:
                    raise NumericalFailure(f"Normal system stays indefinite with damping {damping:.3g}")
                continue
            candidate = values.retract(step, ordering)
            try:
                new_cost = total_cost(factors, candidate)
            except ChartBoundaryError:
                new_cost = math.inf
            if new_cost <= cost:
                accepted = True
                damping = max(damping / params.lambda_factor, 1e-15)
            else:
                damping *= params.lambda_factor
                if damping > params.max_lambda:
                    break
        if not accepted:
            # no descent left at any damping
            converged = True
            break
        decrease = cost - new_cost
        values, cost = candidate, new_cost
        history.append(cost)
        if np.max(np.abs(step)) < params.step_tolerance or decrease <= params.relative_cost_tolerance * cost:
            converged = True
            break
        hessian, gradient, _ = linearize(factors, values, ordering)
    logger.debug(f"LM: {iteration} iterations, cost {history[0]:.6g} -> {history[-1]:.6g}")
    return OptimizationResult(values, history, iteration, converged)
