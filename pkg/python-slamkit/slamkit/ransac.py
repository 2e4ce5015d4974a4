from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Generic, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .data import RansacFailure

logger = logging.getLogger(__name__)

Model = TypeVar("Model")


@dataclass
class RansacParams:
    max_iterations: int = 500
    # symmetric epipolar distance / reprojection error [px]
    threshold: float = 1.0
    min_inliers: int = 8
    confidence: float = 0.999
    seed: int = 0

    def scaled_to_noise(self, pixel_sigma: float) -> RansacParams:
        """ Threshold of at least 3 sigma, never below the configured one. """
        return RansacParams(
            self.max_iterations, max(self.threshold, 3.0 * pixel_sigma), self.min_inliers, self.confidence, self.seed
        )


def required_iterations(inlier_ratio: float, sample_size: int, confidence: float, cap: int) -> int:
    if inlier_ratio <= 0.0:
        return cap
    p_good = inlier_ratio ** sample_size
    if p_good >= 1.0:
        return 1
    return min(cap, int(math.ceil(math.log(1.0 - confidence) / math.log(1.0 - p_good))))


class Ransac(Generic[Model]):
    """
    Hypothesize-and-verify loop with deterministic sampling.

    :param fit_minimal: sample indices -> candidate models (possibly several, possibly none)
    :param score: model -> per-correspondence error
    """

    def __init__(
        self,
        sample_size: int,
        fit_minimal: Callable[[np.ndarray], List[Model]],
        score: Callable[[Model], np.ndarray],
        params: RansacParams,
    ):
        self.sample_size = sample_size
        self.fit_minimal = fit_minimal
        self.score = score
        self.params = params

    def run(self, count: int) -> Tuple[Model, np.ndarray]:
        """ Returns the best model and its boolean inlier mask. """
        assert count >= self.sample_size, f"{count} correspondences, sample size {self.sample_size}"
        rng = np.random.default_rng(self.params.seed)
        best_model: Optional[Model] = None
        best_mask = np.zeros(count, dtype=bool)
        best_count = -1
        best_error = math.inf
        needed = self.params.max_iterations
        iteration = 0
        while iteration < needed:
            iteration += 1
            sample = rng.choice(count, self.sample_size, replace=False)
            for model in self.fit_minimal(sample):
                errors = self.score(model)
                mask = errors < self.params.threshold
                n = int(mask.sum())
                total = float(np.sum(errors[mask])) if n else math.inf
                if n > best_count or (n == best_count and total < best_error):
                    best_model, best_mask, best_count, best_error = model, mask, n, total
                    needed = required_iterations(
                        n / count, self.sample_size, self.params.confidence, self.params.max_iterations
                    )
        if best_model is None or best_count < self.params.min_inliers:
            raise RansacFailure(
                f"No consensus with >= {self.params.min_inliers} inliers after {iteration} iterations "
                f"(best {max(best_count, 0)} of {count})"
            )
        logger.debug(f"RANSAC: {best_count}/{count} inliers after {iteration} iterations")
        return best_model, best_mask
