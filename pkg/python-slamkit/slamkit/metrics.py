from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .data import ArgumentError, AssociationError, DegeneracyError, LoopMode, MeasurementKind
from .dataset_io import read_csv, write_csv
from .geometry import Pose, rigid_alignment
from .scenario import Trajectory

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# half the camera period at 20 Hz [s]
ASSOCIATION_WINDOW = 0.05
MIN_ASSOCIATIONS = 3
TRACKING_FAILURE_DRIFT = 100.0


def associate(est: Trajectory, ref: Trajectory, max_difference: float = ASSOCIATION_WINDOW) -> List[Tuple[int, int]]:
    """
    One-to-one nearest-timestamp association: candidate pairs within max_difference are taken in
    order of increasing time difference.

    :return: (est index, ref index) pairs in est time order
    """
    candidates: List[Tuple[float, int, int]] = []
    for i, t in enumerate(est.timestamps):
        lo = int(np.searchsorted(ref.timestamps, t - max_difference, side="left"))
        hi = int(np.searchsorted(ref.timestamps, t + max_difference, side="right"))
        for j in range(lo, hi):
            difference = abs(float(ref.timestamps[j]) - float(t))
            if difference <= max_difference:
                candidates.append((difference, i, j))
    candidates.sort()
    used_est, used_ref = set(), set()
    pairs: List[Tuple[int, int]] = []
    for _, i, j in candidates:
        if i in used_est or j in used_ref:
            continue
        used_est.add(i)
        used_ref.add(j)
        pairs.append((i, j))
    return sorted(pairs)


class Alignment(NamedTuple):
    aligned: Trajectory
    # maps the estimate onto the reference
    transform: Pose
    pairs: List[Tuple[int, int]]

    def associated(self, ref: Trajectory) -> Tuple[np.ndarray, np.ndarray]:
        """ (N, 3) aligned estimate positions and reference positions of the associated pairs. """
        est = np.array([self.aligned.poses[i].translation for i, _ in self.pairs]).reshape(-1, 3)
        truth = np.array([ref.poses[j].translation for _, j in self.pairs]).reshape(-1, 3)
        return est, truth


def _with_axes(poses: Sequence[Pose]) -> np.ndarray:
    """ Positions plus unit axis tips, so collinear paths still fix the rotation about their line. """
    positions = np.array([p.translation for p in poses])
    tips = [positions + np.array([p.rotation[:, k] for p in poses]) for k in range(3)]
    return np.vstack([positions, *tips])


def align_trajectories(est: Trajectory, ref: Trajectory, max_difference: float = ASSOCIATION_WINDOW) -> Alignment:
    """ Rigid SE(3) alignment without scale of est onto ref over nearest-timestamp associations. """
    pairs = associate(est, ref, max_difference)
    if len(pairs) < MIN_ASSOCIATIONS:
        raise AssociationError(f"Only {len(pairs)} associated poses within {max_difference} s, need {MIN_ASSOCIATIONS}")
    est_poses = [est.poses[i] for i, _ in pairs]
    ref_poses = [ref.poses[j] for _, j in pairs]
    try:
        transform = rigid_alignment(
            np.array([p.translation for p in est_poses]), np.array([p.translation for p in ref_poses])
        )
    except DegeneracyError:
        logger.debug("Associated positions are collinear, aligning with orientations as well")
        transform = rigid_alignment(_with_axes(est_poses), _with_axes(ref_poses))
    return Alignment(est.transformed(transform), transform, pairs)


def ate_rmse(aligned: Alignment, ref: Trajectory) -> float:
    """ Root mean square translation error over the associated pairs [m]. """
    est, truth = aligned.associated(ref)
    return math.sqrt(float(np.mean(np.sum(np.square(est - truth), axis=1))))


def drift_percent(rmse: float, length: float) -> float:
    """ ATE as a percentage of trajectory length, one decimal, round half to even. """
    if not length > 0:
        raise ArgumentError(f"Trajectory length must be positive, got {length}")
    return round(100.0 * rmse / length, 1)


def evaluate_trajectory(est: Trajectory, ref: Trajectory) -> Tuple[float, float, float]:
    """ (ATE RMSE, drift %, reference length) """
    alignment = align_trajectories(est, ref)
    rmse = ate_rmse(alignment, ref)
    length = ref.length
    return rmse, drift_percent(rmse, length), length


@dataclass
class LoopErrorRecord:
    query: int
    match: int
    mode: LoopMode
    injected: bool
    accepted: bool
    inliers: int
    kind: Optional[MeasurementKind] = None
    rotation_error_deg: float = math.nan
    # degrees for scale-less and rotation-only measurements, meters for full ones
    translation_error: float = math.nan

    @property
    def has_errors(self) -> bool:
        return self.kind is not None

    @property
    def translation_unit(self) -> str:
        if self.kind is None:
            return ""
        return "m" if self.kind is MeasurementKind.LOOP_FULL else "deg"


LC_ERROR_HEADER = ["query_kf", "match_kf", "mode", "accepted", "rot_err_deg", "trans_err", "num_inliers", "is_injected"]


def write_loop_errors(path: PathLike, records: Sequence[LoopErrorRecord]):
    """ Empty error cells mark candidates that produced no measurement; the translation unit follows from the mode. """
    rows = []
    for r in records:
        rows.append(
            [
                r.query,
                r.match,
                r.mode.value,
                int(r.accepted),
                r.rotation_error_deg if r.has_errors else "",
                r.translation_error if r.has_errors else "",
                r.inliers,
                int(r.injected),
            ]
        )
    write_csv(path, LC_ERROR_HEADER, rows)


def read_loop_errors(path: PathLike) -> List[LoopErrorRecord]:
    records = []
    for row in read_csv(path, LC_ERROR_HEADER):
        mode = LoopMode(row[2])
        has_errors = row[4] != ""
        records.append(
            LoopErrorRecord(
                int(row[0]),
                int(row[1]),
                mode,
                bool(int(row[7])),
                bool(int(row[3])),
                int(row[6]),
                mode.kind if has_errors else None,
                float(row[4]) if has_errors else math.nan,
                float(row[5]) if has_errors else math.nan,
            )
        )
    return records


class HistogramSpec(NamedTuple):
    quantity: str
    low: float
    high: float
    width: float

    @property
    def edges(self) -> np.ndarray:
        count = int(round((self.high - self.low) / self.width))
        return self.low + self.width * np.arange(count + 1)


HISTOGRAMS = {
    "rotation_deg": HistogramSpec("rotation_deg", 0.0, 20.0, 1.0),
    "direction_deg": HistogramSpec("direction_deg", 0.0, 30.0, 1.5),
    "translation_m": HistogramSpec("translation_m", 0.0, 2.0, 0.1),
}


def histogram(values: Sequence[float], spec: HistogramSpec) -> np.ndarray:
    """ Bin counts; values past the last edge land in the last bin so counts sum to len(values). """
    edges = spec.edges
    clipped = np.clip(np.asarray(values, dtype=float), edges[0], edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    return counts


def loop_error_histograms(records: Sequence[LoopErrorRecord]) -> Dict[Tuple[str, str], np.ndarray]:
    """ (mode, quantity) -> bin counts over every loop candidate that produced a measurement. """
    result: Dict[Tuple[str, str], np.ndarray] = {}
    modes = sorted({r.mode for r in records if r.has_errors}, key=lambda m: m.value)
    for mode in modes:
        measured = [r for r in records if r.mode is mode and r.has_errors]
        result[(mode.value, "rotation_deg")] = histogram([r.rotation_error_deg for r in measured], HISTOGRAMS["rotation_deg"])
        quantity = "translation_m" if mode.kind is MeasurementKind.LOOP_FULL else "direction_deg"
        result[(mode.value, quantity)] = histogram([r.translation_error for r in measured], HISTOGRAMS[quantity])
    return result


def write_histograms(path: PathLike, histograms: Dict[Tuple[str, str], np.ndarray]):
    rows = []
    for (mode, quantity), counts in histograms.items():
        edges = HISTOGRAMS[quantity].edges
        for lo, hi, count in zip(edges[:-1], edges[1:], counts):
            rows.append([mode, quantity, float(lo), float(hi), int(count)])
    write_csv(path, ["mode", "quantity", "bin_lo", "bin_hi", "count"], rows)


def plot_histograms(path: PathLike, histograms: Dict[Tuple[str, str], np.ndarray]):
    """ One bar chart per quantity with a series per loop mode. """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    quantities = sorted({q for _, q in histograms})
    if not quantities:
        return
    fig, axes = plt.subplots(1, len(quantities), figsize=(5 * len(quantities), 4), squeeze=False)
    for ax, quantity in zip(axes[0], quantities):
        spec = HISTOGRAMS[quantity]
        edges = spec.edges
        for (mode, q), counts in sorted(histograms.items()):
            if q == quantity:
                ax.step(edges[:-1], counts, where="post", label=mode)
        ax.set_xlabel(quantity)
        ax.set_ylabel("loop closures")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
