"""Differentiable particle filters with learned motion and measurement models."""

from .baseline import RecurrentBaseline
from .config import TrainConfig, load_config
from .data import Dataset, generate_dataset, read_dataset, write_dataset
from .estimators import DifferentiableParticleFilter
from .exceptions import DataError, DegenerateScaleError, DPFError, NumericError, ShapeError, UsageError
from .harness import EvalReport, evaluate
from .maze import Maze, NoiseSpec, build_maze

__all__ = [
    "DPFError", "DataError", "Dataset", "DegenerateScaleError", "DifferentiableParticleFilter",
    "EvalReport", "Maze", "NoiseSpec", "NumericError", "RecurrentBaseline", "ShapeError",
    "TrainConfig", "UsageError", "build_maze", "evaluate", "generate_dataset", "load_config",
    "read_dataset", "write_dataset",
]

__version__ = "0.1.0"
