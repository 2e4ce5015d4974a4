import enum
from typing import Dict

""" Enums and error classes shared by every module of the toolkit.

Error hierarchy: every failure the estimators can report on purpose derives from SlamError,
so the pipeline runner can catch one class per stage and record where a run broke down.
"""


class TrajectoryShape(enum.Enum):
    LOOP = "loop"
    FIGURE_EIGHT = "figure-eight"
    STRAIGHT = "straight"
    RAMP_LOOP = "ramp-loop"


class MeasurementKind(enum.Enum):
    ODOMETRY = "odometry"
    LOOP_FULL = "loop-full"
    LOOP_SCALELESS = "loop-scaleless"
    LOOP_ROTONLY = "loop-rotonly"

    @property
    def is_loop(self) -> bool:
        return self is not MeasurementKind.ODOMETRY


class LoopMode(enum.Enum):
    PNP = "pnp"
    SCALELESS = "scaleless"
    ROTONLY = "rotonly"

    @property
    def kind(self) -> MeasurementKind:
        return loop_mode_kind[self]


loop_mode_kind: Dict[LoopMode, MeasurementKind] = {
    LoopMode.PNP: MeasurementKind.LOOP_FULL,
    LoopMode.SCALELESS: MeasurementKind.LOOP_SCALELESS,
    LoopMode.ROTONLY: MeasurementKind.LOOP_ROTONLY,
}

# Effective degrees of freedom of the weighted residual, used for the chi2 inlier threshold
kind_dof: Dict[MeasurementKind, int] = {
    MeasurementKind.ODOMETRY: 6,
    MeasurementKind.LOOP_FULL: 6,
    MeasurementKind.LOOP_SCALELESS: 5,
    MeasurementKind.LOOP_ROTONLY: 3,
}


class Stage(enum.Enum):
    CONFIG = "config"
    SIMULATION = "simulation"
    FRONTEND = "frontend"
    BACKEND = "backend"
    LOOP_CLOSURE = "loopclosure"
    RPGO = "rpgo"
    MAPPING = "mapping"
    EVALUATION = "evaluation"


class SlamError(Exception):
    pass


class ConfigError(SlamError):
    pass


class ArgumentError(SlamError, ValueError):
    pass


class ChartBoundaryError(SlamError):
    pass


class DegeneracyError(SlamError):
    pass


class RansacFailure(SlamError):
    pass


class CoverageError(SlamError):
    pass


class NumericalFailure(SlamError):
    pass


class AssociationError(SlamError):
    pass


class UndefinedMetricError(SlamError):
    pass


class DisconnectedGraphError(SlamError):
    pass


class DatasetFormatError(SlamError):
    pass


class PipelineError(SlamError):
    def __init__(self, stage: Stage, cause: BaseException):
        super().__init__(f"{stage.value} stage failed: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def is_config_error(self) -> bool:
        return isinstance(self.cause, (ConfigError, ArgumentError))


__all__ = [
    "TrajectoryShape",
    "MeasurementKind",
    "LoopMode",
    "Stage",
    "kind_dof",
    "SlamError",
    "ConfigError",
    "ArgumentError",
    "ChartBoundaryError",
    "DegeneracyError",
    "RansacFailure",
    "CoverageError",
    "NumericalFailure",
    "AssociationError",
    "UndefinedMetricError",
    "DisconnectedGraphError",
    "DatasetFormatError",
    "PipelineError",
]
