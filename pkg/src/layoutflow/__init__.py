"""Layout-conditioned rectified-flow image generation on a synthetic blob world."""

from .autodiff import Array, Parameter, Tape, backward, finite_diff_check
from .control import ControlConfig, ControlledModel
from .dataset import DatasetConfig, build_dataset
from .dit import BaseModel, ModelConfig
from .layout import BBox, Entity, LayoutCondition
from .metrics import EvalReport, evaluate_records
from .sampling import SampleConfig, euler_sample, euler_sample_many
from .training import TrainConfig, train_loop

__all__ = [
    "Array",
    "Parameter",
    "Tape",
    "backward",
    "finite_diff_check",
    "ControlConfig",
    "ControlledModel",
    "DatasetConfig",
    "build_dataset",
    "BaseModel",
    "ModelConfig",
    "BBox",
    "Entity",
    "LayoutCondition",
    "EvalReport",
    "evaluate_records",
    "SampleConfig",
    "euler_sample",
    "euler_sample_many",
    "TrainConfig",
    "train_loop",
]

__version__ = "0.1.0"
